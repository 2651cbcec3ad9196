//! Evaluation protocol: win rate against frozen reference texts, head-to-head
//! win rate between two policies, and aggregate statistics over runs with
//! stratified percentile-bootstrap confidence intervals.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{PolicySnapshot, TokenSeq};
use crate::oracle::{GoldReward, ReferenceSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

impl Outcome {
    pub fn judge(candidate: f64, opponent: f64) -> Self {
        if candidate > opponent {
            Outcome::Win
        } else if candidate < opponent {
            Outcome::Loss
        } else {
            Outcome::Tie
        }
    }

    /// Ties are credited half a win to each side.
    pub fn credit(self) -> f64 {
        match self {
            Outcome::Win => 1.0,
            Outcome::Loss => 0.0,
            Outcome::Tie => 0.5,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Outcome::Win => Outcome::Loss,
            Outcome::Loss => Outcome::Win,
            Outcome::Tie => Outcome::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt_id: usize,
    pub r_candidate: f64,
    pub r_opponent: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub n_prompts: usize,
    pub wins: f64,
    pub win_rate: f64,
    pub details: Vec<PromptResult>,
}

impl WinRateReport {
    /// Builds a report from `(candidate, opponent)` rewards in prompt order.
    pub fn from_rewards(rewards: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let details: Vec<PromptResult> = rewards
            .into_iter()
            .enumerate()
            .map(|(prompt_id, (rc, ro))| PromptResult {
                prompt_id,
                r_candidate: rc,
                r_opponent: ro,
                outcome: Outcome::judge(rc, ro),
            })
            .collect();
        Self::from_details(details)
    }

    fn from_details(details: Vec<PromptResult>) -> Self {
        let wins: f64 = details.iter().map(|d| d.outcome.credit()).sum();
        let n = details.len();
        Self {
            n_prompts: n,
            wins,
            win_rate: if n == 0 { 0.0 } else { wins / n as f64 },
            details,
        }
    }

    /// The same transcript scored from the opponent's side.
    pub fn swapped(&self) -> Self {
        Self::from_details(
            self.details
                .iter()
                .map(|d| PromptResult {
                    prompt_id: d.prompt_id,
                    r_candidate: d.r_opponent,
                    r_opponent: d.r_candidate,
                    outcome: d.outcome.flipped(),
                })
                .collect(),
        )
    }
}

/// Samples one response per eval prompt and scores it against that prompt's
/// reference text. Prompt `i` draws from its own stream, so results do not
/// depend on evaluation order.
pub fn win_rate_vs_reference(
    policy: &PolicySnapshot,
    prompts: &[TokenSeq],
    references: &ReferenceSet,
    gr: &GoldReward,
    temperature: f64,
    seed: u64,
) -> WinRateReport {
    let rewards: Vec<(f64, f64)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let reference = references
                .get(x)
                .unwrap_or_else(|| panic!("no reference text for eval prompt {i}"));
            let y = policy.sample(x, temperature, &mut rng::stream(seed, "eval", i as u64));
            (gr.reward(x, &y), gr.reward(x, reference))
        })
        .collect();
    WinRateReport::from_rewards(rewards)
}

/// A's win rate against B with independently derived sampling seeds.
pub fn head_to_head(
    a: &PolicySnapshot,
    b: &PolicySnapshot,
    prompts: &[TokenSeq],
    gr: &GoldReward,
    temperature: f64,
    seed: u64,
) -> WinRateReport {
    head_to_head_with_seeds(
        a,
        b,
        prompts,
        gr,
        temperature,
        rng::derive_seed(seed, "h2h-a"),
        rng::derive_seed(seed, "h2h-b"),
    )
}

/// Head-to-head with explicit per-side seeds. Passing the same seed for both
/// sides shares the transcript randomness.
pub fn head_to_head_with_seeds(
    a: &PolicySnapshot,
    b: &PolicySnapshot,
    prompts: &[TokenSeq],
    gr: &GoldReward,
    temperature: f64,
    seed_a: u64,
    seed_b: u64,
) -> WinRateReport {
    let rewards: Vec<(f64, f64)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let ya = a.sample(x, temperature, &mut rng::stream(seed_a, "eval", i as u64));
            let yb = b.sample(x, temperature, &mut rng::stream(seed_b, "eval", i as u64));
            (gr.reward(x, &ya), gr.reward(x, &yb))
        })
        .collect();
    WinRateReport::from_rewards(rewards)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Median,
    Iqm,
    Mean,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Median, Statistic::Iqm, Statistic::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Median => "median",
            Statistic::Iqm => "iqm",
            Statistic::Mean => "mean",
        }
    }

    /// Panics on an empty slice.
    pub fn compute(self, values: &[f64]) -> f64 {
        match self {
            Statistic::Median => median(values),
            Statistic::Iqm => iqm(values),
            Statistic::Mean => mean(values),
        }
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    assert!(!values.is_empty(), "statistic of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Accumulates deviations from the first value, so constant data averages
/// to exactly that value.
pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "statistic of an empty sample");
    let x0 = values[0];
    x0 + values.iter().map(|v| v - x0).sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let v = sorted(values);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Interquartile mean: drop `⌊n/4⌋` observations from each end, average the rest.
pub fn iqm(values: &[f64]) -> f64 {
    let v = sorted(values);
    let k = v.len() / 4;
    mean(&v[k..v.len() - k])
}

/// Percentile of sorted data with linear interpolation between order
/// statistics; `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Observations grouped by stratum label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StratifiedSample {
    strata: BTreeMap<String, Vec<f64>>,
}

impl StratifiedSample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stratum: impl Into<String>, value: f64) {
        self.strata.entry(stratum.into()).or_default().push(value);
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        let mut s = Self::new();
        for (k, v) in pairs {
            s.push(k, v);
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.strata.values().all(Vec::is_empty)
    }

    pub fn strata(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.strata.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn stratum_sizes(&self) -> BTreeMap<String, usize> {
        self.strata.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    /// All observations, strata in label order.
    pub fn pooled(&self) -> Vec<f64> {
        self.strata.values().flatten().copied().collect()
    }

    /// Resamples with replacement independently within each stratum.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let strata = self
            .strata
            .iter()
            .map(|(k, v)| {
                let draw = (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).collect();
                (k.clone(), draw)
            })
            .collect();
        Self { strata }
    }
}

/// Stratified percentile-bootstrap interval for `statistic` at `level`.
pub fn bootstrap_ci(
    sample: &StratifiedSample,
    statistic: Statistic,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    assert!(!sample.is_empty(), "bootstrap of an empty sample");
    assert!(
        sample.strata.values().all(|v| !v.is_empty()),
        "every stratum must be non-empty"
    );
    let mut r = rng::stream(seed, "bootstrap", 0);
    let mut stats: Vec<f64> = (0..n_resamples)
        .map(|_| statistic.compute(&sample.resample(&mut r).pooled()))
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile(&stats, tail), percentile(&stats, 1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub median: Estimate,
    pub iqm: Estimate,
    pub mean: Estimate,
    pub n_runs: BTreeMap<String, usize>,
}

impl AggregateReport {
    pub fn get(&self, s: Statistic) -> &Estimate {
        match s {
            Statistic::Median => &self.median,
            Statistic::Iqm => &self.iqm,
            Statistic::Mean => &self.mean,
        }
    }
}

/// Point estimates of all three statistics over the pooled sample.
pub fn aggregate(sample: &StratifiedSample) -> [f64; 3] {
    let pooled = sample.pooled();
    Statistic::ALL.map(|s| s.compute(&pooled))
}

/// Point estimates plus bootstrap intervals. Intervals are widened to include
/// their point estimate when the percentile interval happens to miss it.
pub fn aggregate_report(sample: &StratifiedSample, n_resamples: usize, level: f64, seed: u64) -> AggregateReport {
    let points = aggregate(sample);
    let est = |i: usize| {
        let s = Statistic::ALL[i];
        let (lo, hi) = bootstrap_ci(sample, s, n_resamples, level, rng::derive_seed(seed, s.name()));
        Estimate {
            estimate: points[i],
            ci_low: lo.min(points[i]),
            ci_high: hi.max(points[i]),
        }
    };
    AggregateReport {
        median: est(0),
        iqm: est(1),
        mean: est(2),
        n_runs: sample.stratum_sizes(),
    }
}
