use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BaseParams, DenseGrads, Matrix, ModelDims};
use crate::error::{Error, Result};
use crate::rng;

const INIT_STD: f64 = 0.02;

/// The base matrix an adapter modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    #[serde(rename = "w_h")]
    Hidden,
    #[serde(rename = "w_out")]
    Output,
}

impl LoraTarget {
    /// `(out, in)` shape of the target matrix.
    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        match self {
            LoraTarget::Hidden => (dims.hidden_dim, dims.input_width()),
            LoraTarget::Output => (dims.vocab_size, dims.hidden_dim),
        }
    }
}

/// Low-rank update `(alpha / rank) · B · A` to one target matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    #[serde(rename = "r")]
    pub rank: usize,
    pub alpha: f64,
    /// `rank × in`.
    #[serde(rename = "A")]
    pub a: Matrix,
    /// `out × rank`.
    #[serde(rename = "B")]
    pub b: Matrix,
}

impl LoraAdapter {
    fn init(dims: &ModelDims, target: LoraTarget, rank: usize, alpha: f64, rng: &mut rng::Stream) -> Self {
        let (out, inp) = target.shape(dims);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self {
            target,
            rank,
            alpha,
            a: Matrix::from_fn(rank, inp, |_, _| normal.sample(rng)),
            b: Matrix::zeros(out, rank),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Matrix {
        let mut d = self.b.matmul(&self.a);
        d.scale(self.scaling());
        d
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            ..self.clone()
        }
    }

    /// Chain rule from the gradient of the effective matrix to `(A, B)`.
    fn backprop(&self, dense: &Matrix) -> Self {
        let s = self.scaling();
        let mut ga = self.b.transposed_matmul(dense);
        ga.scale(s);
        let mut gb = dense.matmul_transposed(&self.a);
        gb.scale(s);
        Self {
            a: ga,
            b: gb,
            ..self.clone()
        }
    }

    fn check_shape(&self, dims: &ModelDims) -> bool {
        let (out, inp) = self.target.shape(dims);
        self.rank >= 1 && self.a.shape() == (self.rank, inp) && self.b.shape() == (out, self.rank)
    }
}

/// One adapter per target matrix. The same shape doubles as the container for
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub hidden: LoraAdapter,
    pub output: LoraAdapter,
}

impl AdapterSet {
    pub fn init(dims: &ModelDims, rank: usize, alpha: f64, rng: &mut rng::Stream) -> Self {
        let hidden = LoraAdapter::init(dims, LoraTarget::Hidden, rank, alpha, rng);
        let output = LoraAdapter::init(dims, LoraTarget::Output, rank, alpha, rng);
        Self { hidden, output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    /// Trainable tensors in a fixed order: hidden A, hidden B, output A, output B.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.hidden.a.as_slice(),
            self.hidden.b.as_slice(),
            self.output.a.as_slice(),
            self.output.b.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.hidden.a.as_mut_slice(),
            self.hidden.b.as_mut_slice(),
            self.output.a.as_mut_slice(),
            self.output.b.as_mut_slice(),
        ]
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Effective `(W_h, W_out)` of the base with this adapter set applied.
    pub fn effective(&self, base: &BaseParams) -> (Matrix, Matrix) {
        (
            add(&base.w_h, &self.hidden.delta()),
            add(&base.w_out, &self.output.delta()),
        )
    }

    /// Gradient with respect to the adapter entries, given the gradient with
    /// respect to the effective projections.
    pub fn backprop(&self, dense: &DenseGrads) -> AdapterSet {
        AdapterSet {
            hidden: self.hidden.backprop(&dense.w_h),
            output: self.output.backprop(&dense.w_out),
        }
    }
}

pub(crate) fn add(w: &Matrix, delta: &Matrix) -> Matrix {
    assert_eq!(w.shape(), delta.shape(), "delta shape must match target");
    let data = w.as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a + b).collect();
    Matrix::from_vec(w.rows(), w.cols(), data)
}

/// `E` independently initialized adapter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraEnsemble {
    pub members: Vec<AdapterSet>,
}

impl LoraEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Checks member shapes against `dims` and that all members agree on
    /// rank and scale.
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::config("train.ensemble", "ensemble must have at least one member"))?;
        for m in &self.members {
            if !m.hidden.check_shape(dims) || !m.output.check_shape(dims) {
                return Err(Error::config("ensemble", "adapter shape does not match model dims"));
            }
            if m.hidden.target != LoraTarget::Hidden || m.output.target != LoraTarget::Output {
                return Err(Error::config("ensemble", "adapter targets out of order"));
            }
            for (x, y) in [(&m.hidden, &first.hidden), (&m.output, &first.output)] {
                if x.rank != y.rank || x.alpha != y.alpha {
                    return Err(Error::config("ensemble", "members disagree on rank or alpha"));
                }
            }
        }
        Ok(())
    }
}

/// Member-averaged dense deltas for both targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub w_h: Matrix,
    pub w_out: Matrix,
}

/// Each member's adapters are drawn from their own stream, so member `i` is
/// the same regardless of `E`.
pub fn init_ensemble(dims: &ModelDims, members: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraEnsemble> {
    dims.validate()?;
    if members == 0 {
        return Err(Error::config("train.ensemble", "must be at least 1"));
    }
    if rank == 0 {
        return Err(Error::config("train.lora_rank", "must be at least 1"));
    }
    let members = (0..members)
        .map(|i| {
            let mut rng = rng::stream(seed, "lora-member", i as u64);
            AdapterSet::init(dims, rank, alpha, &mut rng)
        })
        .collect();
    Ok(LoraEnsemble { members })
}

/// `Δ = (1/E) · Σᵢ (α/r) · Bᵢ · Aᵢ` for each target.
pub fn merge_ensemble(ens: &LoraEnsemble) -> MergedDelta {
    assert!(!ens.is_empty(), "cannot merge an empty ensemble");
    let e = ens.len() as f64;
    let mut members = ens.members.iter();
    let first = members.next().expect("non-empty");
    let mut w_h = first.hidden.delta();
    let mut w_out = first.output.delta();
    for m in members {
        accumulate(&mut w_h, &m.hidden.delta());
        accumulate(&mut w_out, &m.output.delta());
    }
    for v in w_h.as_mut_slice().iter_mut().chain(w_out.as_mut_slice()) {
        *v /= e;
    }
    MergedDelta { w_h, w_out }
}

fn accumulate(acc: &mut Matrix, d: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
        *a += b;
    }
}
