use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::error::{Error, Result};
use crate::model::{
    init_base, seq_logprob, seq_logprob_grad, BaseParams, DenseGrads, ModelDims, PolicySnapshot, TokenSeq,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Fraction of the corpus held out for checkpoint selection.
    pub holdout_frac: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 1e-2,
            batch_size: 32,
            holdout_frac: 0.1,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("sft.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sft.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("sft.lr", "must be a positive finite number"));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::config("sft.holdout_frac", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-token cross-entropy over the training portion.
    pub train_loss: f64,
    pub holdout_perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub base: Arc<BaseParams>,
    pub snapshot: PolicySnapshot,
    pub init_perplexity: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// `exp(mean negative log-likelihood per token)`.
pub fn held_out_perplexity(base: &BaseParams, data: &[&(TokenSeq, TokenSeq)]) -> f64 {
    let w = base.weights();
    let (nll, tokens) = data.iter().fold((0.0, 0usize), |(nll, n), (x, y)| {
        (nll - seq_logprob(&w, x, y), n + y.len())
    });
    (nll / tokens.max(1) as f64).exp()
}

/// Fits the base network to the corpus by per-token cross-entropy and
/// returns the epoch checkpoint with the best held-out perplexity.
pub fn run_sft(dims: ModelDims, cfg: &SftConfig, corpus: &[(TokenSeq, TokenSeq)], seed: u64) -> Result<SftOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("sft.per_prompt", "SFT corpus is empty"));
    }
    let mut base = init_base(dims, seed)?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(seed, "sft-split", 0));
    let n_hold = if corpus.len() < 2 {
        0
    } else {
        ((corpus.len() as f64 * cfg.holdout_frac).round() as usize).clamp(1, corpus.len() - 1)
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<&(TokenSeq, TokenSeq)> = if hold_idx.is_empty() {
        corpus.iter().collect()
    } else {
        hold_idx.iter().map(|&i| &corpus[i]).collect()
    };
    let mut train_idx = train_idx.to_vec();

    let init_perplexity = held_out_perplexity(&base, &holdout);
    let mut opt = Adam::new(cfg.lr, base.tensors().map(<[f64]>::len));
    let mut best: Option<(f64, usize, BaseParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng::stream(seed, "sft-epoch", epoch as u64));
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|&i| corpus[i].1.len()).sum();
            let scale = -1.0 / tokens as f64;
            let mut grads = DenseGrads::full(&dims);
            let w = base.weights();
            for &i in batch {
                let (x, y) = &corpus[i];
                loss_sum -= seq_logprob_grad(&w, x, y, scale, &mut grads);
            }
            token_sum += tokens;
            if !loss_sum.is_finite() {
                return Err(Error::Numerical(format!("non-finite SFT loss in epoch {epoch}")));
            }
            opt.step(base.tensors_mut(), grads.base_tensors());
        }
        if !base.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite SFT parameters after epoch {epoch}"
            )));
        }
        let ppl = held_out_perplexity(&base, &holdout);
        if !ppl.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite held-out perplexity in epoch {epoch}"
            )));
        }
        log::debug!(
            "sft epoch {epoch}: train nll {:.4}, held-out ppl {ppl:.4}",
            loss_sum / token_sum as f64
        );
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / token_sum.max(1) as f64,
            holdout_perplexity: ppl,
        });
        if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
            best = Some((ppl, epoch, base.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    let base = Arc::new(params);
    Ok(SftOutcome {
        snapshot: PolicySnapshot::from_base(Arc::clone(&base), "sft"),
        base,
        init_perplexity,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_softmax;
    use crate::oracle::{build_sft_corpus, GoldReward, PromptSet};

    fn small_corpus(seed: u64) -> (ModelDims, Vec<(TokenSeq, TokenSeq)>) {
        let dims = ModelDims::default();
        let gr = GoldReward::random(&dims, seed, 0.5, 12, 0.0).unwrap();
        let prompts = PromptSet::generate(&dims, 4, [60, 0, 0], seed).unwrap();
        (dims, build_sft_corpus(&gr, &dims, &prompts, 5, seed))
    }

    #[test]
    fn sft_beats_random_init_on_held_out_data() {
        for seed in [1, 2, 3] {
            let (dims, corpus) = small_corpus(seed);
            let cfg = SftConfig {
                epochs: 4,
                ..SftConfig::default()
            };
            let out = run_sft(dims, &cfg, &corpus, seed).unwrap();
            let best = out.history[out.best_epoch].holdout_perplexity;
            assert!(
                best < out.init_perplexity,
                "seed {seed}: {best} vs {}",
                out.init_perplexity
            );
        }
    }

    #[test]
    fn degenerate_corpus_is_fit() {
        let dims = ModelDims::default();
        let corpus: Vec<_> = (0..40u32)
            .map(|i| {
                (
                    TokenSeq::new(vec![i % 16, 1, 2, 3]),
                    TokenSeq::new(vec![5; dims.max_gen_len]),
                )
            })
            .collect();
        let cfg = SftConfig {
            epochs: 30,
            ..SftConfig::default()
        };
        let out = run_sft(dims, &cfg, &corpus, 4).unwrap();
        let mut ctx = vec![dims.bos(); 4];
        ctx.extend([9, 1, 2, 3]);
        let p = log_softmax(&out.snapshot.logits(&ctx))[5].exp();
        assert!(p > 0.99, "{p}");
    }

    #[test]
    fn sft_is_deterministic() {
        let (dims, corpus) = small_corpus(5);
        let cfg = SftConfig {
            epochs: 2,
            ..SftConfig::default()
        };
        let a = run_sft(dims, &cfg, &corpus, 9).unwrap();
        let b = run_sft(dims, &cfg, &corpus, 9).unwrap();
        assert_eq!(*a.base, *b.base);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn empty_corpus_and_bad_config_rejected() {
        let dims = ModelDims::default();
        assert!(run_sft(dims, &SftConfig::default(), &[], 1).is_err());
        let bad = SftConfig {
            holdout_frac: 1.0,
            ..SftConfig::default()
        };
        let (_, corpus) = small_corpus(1);
        assert!(run_sft(dims, &bad, &corpus, 1).is_err());
    }
}
