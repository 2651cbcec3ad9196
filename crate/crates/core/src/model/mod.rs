//! The tiny autoregressive policy.
//!
//! A fixed-window feedforward next-token predictor: the last `C` tokens are
//! embedded and concatenated, passed through one `tanh` hidden layer, and
//! projected to vocabulary logits. Low-rank adapters may sit on the hidden and
//! output projections. Everything here is exact `f64` arithmetic with
//! hand-written gradients.

mod base;
mod lora;
mod matrix;
mod policy;

pub use base::{forward_logits, init_base, log_softmax, BaseGrads, BaseParams, DenseGrads, Weights};
pub use lora::{init_ensemble, merge_ensemble, AdapterSet, LoraAdapter, LoraEnsemble, LoraTarget, MergedDelta};
pub use matrix::Matrix;
pub use policy::{
    sample_response, seq_logprob, seq_logprob_grad, snapshot, Policy, PolicySnapshot, GREEDY_TEMPERATURE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the network. Token ids `0..V-2` are content tokens, `V-2` is BOS
/// and `V-1` is EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_gen_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab_size: 18,
            context: 8,
            embed_dim: 16,
            hidden_dim: 32,
            max_gen_len: 24,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config(
                "model.vocab_size",
                "must be at least 3 (one content token plus BOS and EOS)",
            ));
        }
        for (name, v) in [
            ("model.context", self.context),
            ("model.embed_dim", self.embed_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.max_gen_len", self.max_gen_len),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn bos(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    #[inline]
    pub fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    #[inline]
    pub fn content_tokens(&self) -> usize {
        self.vocab_size - 2
    }

    /// Width of the concatenated context embedding, `C·d`.
    #[inline]
    pub fn input_width(&self) -> usize {
        self.context * self.embed_dim
    }
}

/// A prompt or response as vocabulary indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens other than a trailing EOS.
    pub fn content<'a>(&'a self, dims: &ModelDims) -> &'a [u32] {
        match self.0.split_last() {
            Some((&last, rest)) if last == dims.eos() => rest,
            _ => &self.0,
        }
    }

    /// A prompt holds only content tokens.
    pub fn is_prompt(&self, dims: &ModelDims) -> bool {
        self.0.iter().all(|&t| (t as usize) < dims.content_tokens())
    }

    /// A response is non-empty, never contains BOS, has EOS at most once and
    /// only as its last token, and is EOS-terminated unless it hit `L_max`.
    pub fn is_response(&self, dims: &ModelDims) -> bool {
        let n = self.0.len();
        if n == 0 || n > dims.max_gen_len {
            return false;
        }
        let body_ok = self.0[..n - 1].iter().all(|&t| (t as usize) < dims.content_tokens());
        let last = self.0[n - 1];
        body_ok && (last == dims.eos() || (n == dims.max_gen_len && last != dims.bos()))
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}
