//! Online preference optimization anchored to the behavior policy, built
//! end-to-end at desk scale.
//!
//! The crate wires together a tiny autoregressive policy with low-rank adapter
//! ensembles ([`model`]), the direct-alignment losses ([`losses`]), a synthetic
//! preference oracle ([`oracle`]), the annotation-frequency training scheduler
//! ([`trainer`]), the evaluation protocol ([`eval`]) and the on-disk formats
//! ([`store`]). [`experiment`] composes them into the runs the CLI exposes.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
