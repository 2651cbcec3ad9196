use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ModelDims};
use crate::error::Result;
use crate::rng;

/// Frozen weights of the base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub dims: ModelDims,
    /// `V × d` token embeddings.
    pub emb: Matrix,
    /// `h × (C·d)` hidden projection.
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    /// `V × h` output projection.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl BaseParams {
    /// All-zero parameters. Only tests construct these directly.
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            emb: Matrix::zeros(dims.vocab_size, dims.embed_dim),
            w_h: Matrix::zeros(dims.hidden_dim, dims.input_width()),
            b_h: vec![0.0; dims.hidden_dim],
            w_out: Matrix::zeros(dims.vocab_size, dims.hidden_dim),
            b_out: vec![0.0; dims.vocab_size],
        }
    }

    pub fn weights(&self) -> Weights<'_> {
        Weights {
            dims: &self.dims,
            emb: &self.emb,
            w_h: &self.w_h,
            b_h: &self.b_h,
            w_out: &self.w_out,
            b_out: &self.b_out,
        }
    }

    /// Parameter tensors in a fixed order: emb, w_h, b_h, w_out, b_out.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.emb.as_mut_slice(),
            self.w_h.as_mut_slice(),
            &mut self.b_h,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.emb.as_slice(),
            self.w_h.as_slice(),
            &self.b_h,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draws base parameters i.i.d. uniform in `[-0.05, 0.05]`.
pub fn init_base(dims: ModelDims, seed: u64) -> Result<BaseParams> {
    dims.validate()?;
    let mut params = BaseParams::zeros(dims);
    let mut rng = rng::stream(seed, "base-init", 0);
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = rng.random_range(-0.05..=0.05);
        }
    }
    Ok(params)
}

/// A borrowed view of the weights one forward pass uses. The two projections
/// may be effective (base plus adapter delta) matrices.
#[derive(Clone, Copy)]
pub struct Weights<'a> {
    pub dims: &'a ModelDims,
    pub emb: &'a Matrix,
    pub w_h: &'a Matrix,
    pub b_h: &'a [f64],
    pub w_out: &'a Matrix,
    pub b_out: &'a [f64],
}

impl<'a> Weights<'a> {
    /// Base weights with the two projections replaced.
    pub fn with_projections(base: &'a BaseParams, w_h: &'a Matrix, w_out: &'a Matrix) -> Self {
        Self {
            w_h,
            w_out,
            ..base.weights()
        }
    }
}

/// Gradients of the embedding and bias tensors, only needed for SFT.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrads {
    pub emb: Matrix,
    pub b_h: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// Accumulated gradients with respect to the (effective) dense weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub w_h: Matrix,
    pub w_out: Matrix,
    pub base: Option<BaseGrads>,
}

impl DenseGrads {
    /// Gradients for the two adapter targets only.
    pub fn projections(dims: &ModelDims) -> Self {
        Self {
            w_h: Matrix::zeros(dims.hidden_dim, dims.input_width()),
            w_out: Matrix::zeros(dims.vocab_size, dims.hidden_dim),
            base: None,
        }
    }

    /// Gradients for every base tensor.
    pub fn full(dims: &ModelDims) -> Self {
        Self {
            base: Some(BaseGrads {
                emb: Matrix::zeros(dims.vocab_size, dims.embed_dim),
                b_h: vec![0.0; dims.hidden_dim],
                b_out: vec![0.0; dims.vocab_size],
            }),
            ..Self::projections(dims)
        }
    }

    /// Tensors in [`BaseParams::tensors`] order. Panics without base grads.
    pub fn base_tensors(&self) -> [&[f64]; 5] {
        let b = self.base.as_ref().expect("full gradients required");
        [
            b.emb.as_slice(),
            self.w_h.as_slice(),
            &b.b_h,
            self.w_out.as_slice(),
            &b.b_out,
        ]
    }
}

pub(crate) struct Activations {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Activations {
    pub fn new(dims: &ModelDims) -> Self {
        Self {
            input: vec![0.0; dims.input_width()],
            hidden: vec![0.0; dims.hidden_dim],
            logits: vec![0.0; dims.vocab_size],
        }
    }
}

pub(crate) fn forward_into(w: &Weights<'_>, context: &[u32], act: &mut Activations) {
    let d = w.dims.embed_dim;
    assert_eq!(context.len(), w.dims.context, "context must hold exactly C tokens");
    for (j, &tok) in context.iter().enumerate() {
        act.input[j * d..(j + 1) * d].copy_from_slice(w.emb.row(tok as usize));
    }
    w.w_h.affine_into(&act.input, w.b_h, &mut act.hidden);
    act.hidden.iter_mut().for_each(|v| *v = v.tanh());
    w.w_out.affine_into(&act.hidden, w.b_out, &mut act.logits);
}

/// Next-token logits for a context of exactly `C` tokens (left-padded with BOS).
pub fn forward_logits(w: &Weights<'_>, context: &[u32]) -> Vec<f64> {
    let mut act = Activations::new(w.dims);
    forward_into(w, context, &mut act);
    act.logits
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Accumulates `scale · ∇ log softmax(logits)[target]` into `grads`, given the
/// activations of the forward pass that produced `logits`.
pub(crate) fn backward_token(
    w: &Weights<'_>,
    context: &[u32],
    act: &Activations,
    target: u32,
    scale: f64,
    grads: &mut DenseGrads,
) {
    let lse = log_sum_exp(&act.logits);
    let g_logits: Vec<f64> = act
        .logits
        .iter()
        .enumerate()
        .map(|(v, &z)| {
            let onehot = if v == target as usize { 1.0 } else { 0.0 };
            scale * (onehot - (z - lse).exp())
        })
        .collect();
    grads.w_out.add_outer(&g_logits, &act.hidden);

    let mut g_hidden = vec![0.0; act.hidden.len()];
    w.w_out.add_transpose_product(&g_logits, &mut g_hidden);
    for (g, &hv) in g_hidden.iter_mut().zip(&act.hidden) {
        *g *= 1.0 - hv * hv;
    }
    grads.w_h.add_outer(&g_hidden, &act.input);

    if let Some(base) = grads.base.as_mut() {
        for (b, g) in base.b_out.iter_mut().zip(&g_logits) {
            *b += g;
        }
        for (b, g) in base.b_h.iter_mut().zip(&g_hidden) {
            *b += g;
        }
        let mut g_input = vec![0.0; act.input.len()];
        w.w_h.add_transpose_product(&g_hidden, &mut g_input);
        let d = w.dims.embed_dim;
        for (j, &tok) in context.iter().enumerate() {
            for (e, g) in base
                .emb
                .row_mut(tok as usize)
                .iter_mut()
                .zip(&g_input[j * d..(j + 1) * d])
            {
                *e += g;
            }
        }
    }
}
