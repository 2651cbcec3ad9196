//! The training side: supervised fine-tuning of the base network and the
//! annotation-frequency alignment loop over an adapter ensemble.

mod adam;
mod align;
mod config;
mod sft;

pub use adam::{clip_global_norm, Adam};
pub use align::{
    ema_update, resolve_reference, run_alignment, run_alignment_with, AlignmentInputs, AlignmentOutcome, AnnotatedPair,
    EvalPlan, EvalRecord, MetricRecord, MetricsSink, ReferencePolicy, StepRecord, StepTrace, TrainState,
    PROMPT_HEADROOM,
};
pub use config::{RefMode, TrainConfig};
pub use sft::{held_out_perplexity, run_sft, EpochStats, SftConfig, SftOutcome};
