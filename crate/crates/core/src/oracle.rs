//! Synthetic preference oracle: a transparent gold reward standing in for a
//! learned preference simulator, plus the prompt splits, the SFT demonstrator
//! corpus and the frozen reference texts used for evaluation.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDims, PolicySnapshot, TokenSeq};
use crate::rng::{self, Stream};

/// Temperature of the SFT demonstrator's token distribution.
pub const DEMONSTRATOR_TEMPERATURE: f64 = 2.0;

/// Total sampling attempts per prompt before giving up on it.
pub const MAX_PAIR_ATTEMPTS: usize = 4;

/// `r(x, y) = Σ affinity[y_t] − λ·|len(y) − L*| + μ·#{t : y_t ∈ x}` over the
/// content tokens of `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReward {
    /// One entry per vocabulary token; BOS and EOS are fixed at zero.
    pub affinity: Vec<f64>,
    pub length_penalty: f64,
    pub target_len: usize,
    pub prompt_bonus: f64,
}

impl GoldReward {
    /// Content-token affinities drawn uniform in `[-1, 1]`.
    pub fn random(
        dims: &ModelDims,
        seed: u64,
        length_penalty: f64,
        target_len: usize,
        prompt_bonus: f64,
    ) -> Result<Self> {
        if !(length_penalty >= 0.0 && length_penalty.is_finite()) {
            return Err(Error::config(
                "oracle.length_penalty",
                "must be finite and non-negative",
            ));
        }
        if !prompt_bonus.is_finite() {
            return Err(Error::config("oracle.prompt_bonus", "must be finite"));
        }
        let mut r = rng::stream(seed, "affinity", 0);
        let mut affinity: Vec<f64> = (0..dims.content_tokens()).map(|_| r.random_range(-1.0..=1.0)).collect();
        affinity.extend([0.0, 0.0]);
        Ok(Self {
            affinity,
            length_penalty,
            target_len,
            prompt_bonus,
        })
    }

    fn eos(&self) -> u32 {
        (self.affinity.len() - 1) as u32
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.affinity.len() != dims.vocab_size {
            return Err(Error::config(
                "oracle.affinity",
                "length must equal the vocabulary size",
            ));
        }
        if self.affinity.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("oracle.affinity", "entries must be finite"));
        }
        if self.affinity[dims.bos() as usize] != 0.0 || self.affinity[dims.eos() as usize] != 0.0 {
            return Err(Error::config("oracle.affinity", "BOS and EOS affinity must be zero"));
        }
        Ok(())
    }

    pub fn reward(&self, x: &TokenSeq, y: &TokenSeq) -> f64 {
        let content = match y.tokens().split_last() {
            Some((&last, rest)) if last == self.eos() => rest,
            _ => y.tokens(),
        };
        let affinity: f64 = content.iter().map(|&t| self.affinity[t as usize]).sum();
        let len_gap = (content.len() as f64 - self.target_len as f64).abs();
        let overlap = content.iter().filter(|t| x.tokens().contains(t)).count() as f64;
        affinity - self.length_penalty * len_gap + self.prompt_bonus * overlap
    }
}

/// Free-function form of [`GoldReward::reward`].
pub fn gold_reward(gr: &GoldReward, x: &TokenSeq, y: &TokenSeq) -> f64 {
    gr.reward(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// The strictly higher-reward response wins; equal rewards are a tie.
    #[default]
    Deterministic,
    /// The first response wins with probability `σ(r1 − r2)`.
    BradleyTerry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    First,
    Second,
    Indistinguishable,
}

/// `σ(r1 − r2)`.
pub fn preference_probability(r1: f64, r2: f64) -> f64 {
    let d = r1 - r2;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Labels a pair from its two rewards. Only Bradley-Terry mode draws from `rng`.
pub fn annotate_rewards<R: Rng + ?Sized>(r1: f64, r2: f64, mode: AnnotationMode, rng: &mut R) -> Preference {
    match mode {
        AnnotationMode::Deterministic => {
            if r1 > r2 {
                Preference::First
            } else if r2 > r1 {
                Preference::Second
            } else {
                Preference::Indistinguishable
            }
        }
        AnnotationMode::BradleyTerry => {
            if rng.random::<f64>() < preference_probability(r1, r2) {
                Preference::First
            } else {
                Preference::Second
            }
        }
    }
}

pub fn annotate<R: Rng + ?Sized>(
    gr: &GoldReward,
    x: &TokenSeq,
    y1: &TokenSeq,
    y2: &TokenSeq,
    mode: AnnotationMode,
    rng: &mut R,
) -> Preference {
    annotate_rewards(gr.reward(x, y1), gr.reward(x, y2), mode, rng)
}

/// One annotated comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub phase: usize,
    pub x: TokenSeq,
    pub y_w: TokenSeq,
    pub y_l: TokenSeq,
    pub r_w: f64,
    pub r_l: f64,
}

/// Signals that a prompt produced no distinguishable pair and should be replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptExhausted;

/// Samples two responses from the behavior policy and annotates them,
/// retrying up to [`MAX_PAIR_ATTEMPTS`] times on identical or tied samples.
/// Response sampling draws from `rng`; Bradley-Terry labels from `label_rng`.
#[allow(clippy::too_many_arguments)]
pub fn collect_pair(
    behavior: &PolicySnapshot,
    gr: &GoldReward,
    x: &TokenSeq,
    mode: AnnotationMode,
    temperature: f64,
    phase: usize,
    rng: &mut Stream,
    label_rng: &mut Stream,
) -> std::result::Result<PreferencePair, PromptExhausted> {
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let y1 = behavior.sample(x, temperature, rng);
        let y2 = behavior.sample(x, temperature, rng);
        if y1 == y2 {
            continue;
        }
        let (r1, r2) = (gr.reward(x, &y1), gr.reward(x, &y2));
        let (y_w, y_l, r_w, r_l) = match annotate_rewards(r1, r2, mode, label_rng) {
            Preference::First => (y1, y2, r1, r2),
            Preference::Second => (y2, y1, r2, r1),
            Preference::Indistinguishable => continue,
        };
        return Ok(PreferencePair {
            phase,
            x: x.clone(),
            y_w,
            y_l,
            r_w,
            r_l,
        });
    }
    Err(PromptExhausted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Sft,
    Align,
    Eval,
}

/// Distinct fixed-length prompts, partitioned into disjoint splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompt_len: usize,
    pub sft: Vec<TokenSeq>,
    pub align: Vec<TokenSeq>,
    pub eval: Vec<TokenSeq>,
}

impl PromptSet {
    pub fn generate(dims: &ModelDims, prompt_len: usize, sizes: [usize; 3], seed: u64) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::config("prompts.prompt_len", "must be positive"));
        }
        let total: usize = sizes.iter().sum();
        let capacity = (dims.content_tokens() as f64).powi(prompt_len as i32);
        // Rejection sampling stays cheap while at most half the space is used.
        if total as f64 > capacity / 2.0 {
            return Err(Error::config(
                "prompts",
                format!("{total} distinct prompts requested but only {capacity} exist at this length"),
            ));
        }
        let mut r = rng::stream(seed, "prompts", 0);
        let mut seen = HashSet::with_capacity(total);
        let mut all = Vec::with_capacity(total);
        while all.len() < total {
            let p = TokenSeq::new(
                (0..prompt_len)
                    .map(|_| r.random_range(0..dims.content_tokens() as u32))
                    .collect(),
            );
            if seen.insert(p.clone()) {
                all.push(p);
            }
        }
        let eval = all.split_off(sizes[0] + sizes[1]);
        let align = all.split_off(sizes[0]);
        Ok(Self {
            prompt_len,
            sft: all,
            align,
            eval,
        })
    }

    pub fn split(&self, which: Split) -> &[TokenSeq] {
        match which {
            Split::Sft => &self.sft,
            Split::Align => &self.align,
            Split::Eval => &self.eval,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.sft
            .iter()
            .chain(&self.align)
            .chain(&self.eval)
            .all(|p| seen.insert(p))
    }
}

/// Demonstrations for supervised fine-tuning: tokens i.i.d. from
/// `softmax(affinity / 2)` over content tokens, lengths uniform in
/// `[L* − 2, L* + 2]`, EOS-terminated.
pub fn build_sft_corpus(
    gr: &GoldReward,
    dims: &ModelDims,
    prompts: &PromptSet,
    per_prompt: usize,
    seed: u64,
) -> Vec<(TokenSeq, TokenSeq)> {
    let content = dims.content_tokens();
    let logits: Vec<f64> = gr.affinity[..content]
        .iter()
        .map(|a| a / DEMONSTRATOR_TEMPERATURE)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let lo = gr.target_len.saturating_sub(2);
    let hi = (gr.target_len + 2).min(dims.max_gen_len - 1).max(lo);
    let mut corpus = Vec::with_capacity(prompts.sft.len() * per_prompt);
    for (i, x) in prompts.sft.iter().enumerate() {
        let mut r = rng::stream(seed, "sft-corpus", i as u64);
        for _ in 0..per_prompt {
            let len = r.random_range(lo..=hi);
            let mut y: Vec<u32> = (0..len)
                .map(|_| {
                    let mut u = r.random::<f64>() * total;
                    let mut pick = content - 1;
                    for (v, &w) in weights.iter().enumerate() {
                        if u < w {
                            pick = v;
                            break;
                        }
                        u -= w;
                    }
                    pick as u32
                })
                .collect();
            y.push(dims.eos());
            corpus.push((x.clone(), TokenSeq::new(y)));
        }
    }
    corpus
}

/// Frozen reference text for every eval prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    texts: BTreeMap<TokenSeq, TokenSeq>,
}

impl ReferenceSet {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TokenSeq, TokenSeq)>) -> Self {
        Self {
            texts: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, prompt: &TokenSeq) -> Option<&TokenSeq> {
        self.texts.get(prompt)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSeq, &TokenSeq)> {
        self.texts.iter()
    }
}

/// One temperature-1 sample per eval prompt from the SFT snapshot.
pub fn build_reference_texts(sft: &PolicySnapshot, eval_prompts: &[TokenSeq], seed: u64) -> ReferenceSet {
    ReferenceSet::from_pairs(eval_prompts.iter().enumerate().map(|(i, x)| {
        let mut r = rng::stream(seed, "reference", i as u64);
        (x.clone(), sft.sample(x, 1.0, &mut r))
    }))
}
