use std::sync::Arc;

use rand::Rng;

use super::base::{backward_token, forward_into, log_sum_exp, Activations};
use super::lora::add;
use super::{AdapterSet, BaseParams, DenseGrads, LoraEnsemble, Matrix, MergedDelta, TokenSeq, Weights};
use crate::error::Result;

/// Below this temperature sampling becomes greedy argmax (lowest index wins ties).
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Frozen base plus a trainable adapter ensemble. Exactly one training loop
/// owns and mutates a `Policy`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub base: Arc<BaseParams>,
    pub ensemble: LoraEnsemble,
}

impl Policy {
    pub fn new(base: Arc<BaseParams>, ensemble: LoraEnsemble) -> Result<Self> {
        ensemble.validate(&base.dims)?;
        Ok(Self { base, ensemble })
    }

    /// Effective `(W_h, W_out)` seen by ensemble member `i`.
    pub fn member_projections(&self, i: usize) -> (Matrix, Matrix) {
        self.ensemble.members[i].effective(&self.base)
    }
}

#[derive(Debug)]
struct SnapshotInner {
    base: Arc<BaseParams>,
    delta: Option<MergedDelta>,
    w_h: Matrix,
    w_out: Matrix,
    label: String,
}

/// An immutable policy: the frozen base plus one dense delta per target.
///
/// Cheap to clone and safe to share across threads; nothing can mutate it
/// after construction.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    inner: Arc<SnapshotInner>,
}

impl PolicySnapshot {
    /// The base network with no adapter delta.
    pub fn from_base(base: Arc<BaseParams>, label: impl Into<String>) -> Self {
        let w_h = base.w_h.clone();
        let w_out = base.w_out.clone();
        Self::build(base, None, w_h, w_out, label.into())
    }

    pub fn with_delta(base: Arc<BaseParams>, delta: MergedDelta, label: impl Into<String>) -> Self {
        let w_h = add(&base.w_h, &delta.w_h);
        let w_out = add(&base.w_out, &delta.w_out);
        Self::build(base, Some(delta), w_h, w_out, label.into())
    }

    /// A single adapter set materialized as a read-only policy. The effective
    /// weights are computed exactly as a training member computes its own.
    pub fn from_adapter_set(base: Arc<BaseParams>, set: &AdapterSet, label: impl Into<String>) -> Self {
        let (w_h, w_out) = set.effective(&base);
        let delta = MergedDelta {
            w_h: set.hidden.delta(),
            w_out: set.output.delta(),
        };
        Self::build(base, Some(delta), w_h, w_out, label.into())
    }

    fn build(base: Arc<BaseParams>, delta: Option<MergedDelta>, w_h: Matrix, w_out: Matrix, label: String) -> Self {
        Self {
            inner: Arc::new(SnapshotInner {
                base,
                delta,
                w_h,
                w_out,
                label,
            }),
        }
    }

    pub fn label(&self) -> &str {
        &self.inner.label
    }

    pub fn base(&self) -> &Arc<BaseParams> {
        &self.inner.base
    }

    pub fn merged_delta(&self) -> Option<&MergedDelta> {
        self.inner.delta.as_ref()
    }

    pub fn weights(&self) -> Weights<'_> {
        Weights::with_projections(&self.inner.base, &self.inner.w_h, &self.inner.w_out)
    }

    pub fn logits(&self, context: &[u32]) -> Vec<f64> {
        super::forward_logits(&self.weights(), context)
    }

    pub fn logprob(&self, x: &TokenSeq, y: &TokenSeq) -> f64 {
        seq_logprob(&self.weights(), x, y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &TokenSeq, temperature: f64, rng: &mut R) -> TokenSeq {
        sample_response(&self.weights(), x, temperature, rng)
    }
}

/// Deep copy of the policy's merged ensemble, frozen under `label`.
pub fn snapshot(policy: &Policy, label: impl Into<String>) -> PolicySnapshot {
    PolicySnapshot::with_delta(Arc::clone(&policy.base), super::merge_ensemble(&policy.ensemble), label)
}

/// `[BOS; C] ++ x ++ y`; the context for response position `t` is
/// `history[|x| + t .. |x| + t + C]`.
fn history(w: &Weights<'_>, x: &TokenSeq, y: &[u32]) -> Vec<u32> {
    let c = w.dims.context;
    let mut h = Vec::with_capacity(c + x.len() + y.len());
    h.resize(c, w.dims.bos());
    h.extend_from_slice(x.tokens());
    h.extend_from_slice(y);
    h
}

/// `log π(y | x)`: the sum of per-position log-softmax terms.
pub fn seq_logprob(w: &Weights<'_>, x: &TokenSeq, y: &TokenSeq) -> f64 {
    assert!(y.is_response(w.dims), "response must be EOS-terminated or L_max long");
    let h = history(w, x, y.tokens());
    let c = w.dims.context;
    let mut act = Activations::new(w.dims);
    let mut total = 0.0;
    for (t, &tok) in y.tokens().iter().enumerate() {
        let ctx = &h[x.len() + t..x.len() + t + c];
        forward_into(w, ctx, &mut act);
        total += act.logits[tok as usize] - log_sum_exp(&act.logits);
    }
    total
}

/// Like [`seq_logprob`], and accumulates `scale · ∇ log π(y | x)` into `grads`.
pub fn seq_logprob_grad(w: &Weights<'_>, x: &TokenSeq, y: &TokenSeq, scale: f64, grads: &mut DenseGrads) -> f64 {
    assert!(y.is_response(w.dims), "response must be EOS-terminated or L_max long");
    let h = history(w, x, y.tokens());
    let c = w.dims.context;
    let mut act = Activations::new(w.dims);
    let mut total = 0.0;
    for (t, &tok) in y.tokens().iter().enumerate() {
        let ctx = &h[x.len() + t..x.len() + t + c];
        forward_into(w, ctx, &mut act);
        total += act.logits[tok as usize] - log_sum_exp(&act.logits);
        if scale != 0.0 {
            backward_token(w, ctx, &act, tok, scale, grads);
        }
    }
    total
}

/// Autoregressive sampling from `softmax(logits / temperature)` with BOS
/// masked out. Stops after EOS or `L_max` tokens.
pub fn sample_response<R: Rng + ?Sized>(w: &Weights<'_>, x: &TokenSeq, temperature: f64, rng: &mut R) -> TokenSeq {
    assert!(temperature > 0.0, "temperature must be positive");
    let dims = w.dims;
    let c = dims.context;
    let bos = dims.bos() as usize;
    let eos = dims.eos();
    let mut h = history(w, x, &[]);
    let mut act = Activations::new(dims);
    let mut weights = vec![0.0; dims.vocab_size];
    let mut out = Vec::with_capacity(dims.max_gen_len);
    while out.len() < dims.max_gen_len {
        forward_into(w, &h[h.len() - c..], &mut act);
        let tok = if temperature < GREEDY_TEMPERATURE {
            let mut best = usize::MAX;
            for (v, &z) in act.logits.iter().enumerate() {
                if v != bos && (best == usize::MAX || z > act.logits[best]) {
                    best = v;
                }
            }
            best
        } else {
            let max = act
                .logits
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != bos)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (v, (wt, &z)) in weights.iter_mut().zip(&act.logits).enumerate() {
                *wt = if v == bos { 0.0 } else { ((z - max) / temperature).exp() };
                total += *wt;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = eos as usize;
            for (v, &wt) in weights.iter().enumerate() {
                if wt > 0.0 && u < wt {
                    pick = v;
                    break;
                }
                u -= wt;
            }
            pick
        } as u32;
        out.push(tok);
        h.push(tok);
        if tok == eos {
            break;
        }
    }
    TokenSeq::new(out)
}
