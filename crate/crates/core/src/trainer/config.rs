use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::oracle::AnnotationMode;

/// Which policy anchors the loss's log-ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// The behavior policy that generated the current phase's data.
    Behavior,
    /// The SFT policy, fixed for the whole run.
    StaticSft,
    /// A loaded checkpoint, fixed for the whole run.
    StaticGolden,
    /// An exponential moving average of the trained adapters.
    Ema,
}

impl RefMode {
    pub fn name(self) -> &'static str {
        match self {
            RefMode::Behavior => "behavior",
            RefMode::StaticSft => "static_sft",
            RefMode::StaticGolden => "static_golden",
            RefMode::Ema => "ema",
        }
    }
}

impl std::fmt::Display for RefMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RefMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "behavior" | "bpo" => Ok(RefMode::Behavior),
            "sft" | "static_sft" => Ok(RefMode::StaticSft),
            "golden" | "static_golden" => Ok(RefMode::StaticGolden),
            "ema" => Ok(RefMode::Ema),
            other => Err(format!(
                "unknown reference mode `{other}` (expected behavior, sft, golden or ema)"
            )),
        }
    }
}

/// Fully resolved alignment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `T`.
    pub steps: usize,
    /// `F`, the number of annotation phases.
    pub freq: usize,
    /// `B`.
    pub batch_size: usize,
    pub n_total: usize,
    /// `M`, pairs annotated per phase.
    pub pairs_per_phase: usize,
    pub lr: f64,
    pub beta: f64,
    pub loss: LossKind,
    pub ensemble: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ref_mode: RefMode,
    pub ema_tau: f64,
    /// Sampling temperature for data collection.
    pub temperature: f64,
    pub clip_norm: f64,
    pub annotation: AnnotationMode,
    pub model_seed: u64,
    pub data_seed: u64,
    pub annotation_seed: u64,
    /// Steps between win-rate evaluations; 0 evaluates only the final policy.
    pub eval_interval: usize,
    pub golden: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for everything except `T`, `F`, `B` and the seeds.
    pub fn new(steps: usize, freq: usize, batch_size: usize) -> Self {
        let n_total = steps * batch_size;
        Self {
            steps,
            freq,
            batch_size,
            n_total,
            pairs_per_phase: n_total.checked_div(freq).unwrap_or(0),
            lr: 1.5e-4,
            beta: 0.1,
            loss: LossKind::Dpo,
            ensemble: 5,
            lora_rank: 4,
            lora_alpha: 8.0,
            ref_mode: RefMode::Behavior,
            ema_tau: 1e-3,
            temperature: 1.0,
            clip_norm: 5.0,
            annotation: AnnotationMode::Deterministic,
            model_seed: 0,
            data_seed: 1,
            annotation_seed: 2,
            eval_interval: 0,
            golden: None,
        }
    }

    /// The same configuration at a different annotation frequency, with `M`
    /// recomputed so the total budget is unchanged.
    pub fn with_freq(&self, freq: usize) -> Self {
        Self {
            freq,
            pairs_per_phase: self.n_total.checked_div(freq).unwrap_or(0),
            ..self.clone()
        }
    }

    /// `K = T / F`.
    pub fn interval(&self) -> usize {
        self.steps / self.freq
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.steps", self.steps),
            ("train.freq", self.freq),
            ("train.batch_size", self.batch_size),
            ("train.ensemble", self.ensemble),
            ("train.lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.freq > self.steps {
            return Err(Error::config(
                "train.freq",
                format!("F = {} exceeds T = {}", self.freq, self.steps),
            ));
        }
        if !self.steps.is_multiple_of(self.freq) {
            return Err(Error::config(
                "train.freq",
                format!(
                    "T = {} is not divisible by F = {}; K = T/F must be integral",
                    self.steps, self.freq
                ),
            ));
        }
        if self.n_total != self.steps * self.batch_size {
            return Err(Error::config(
                "train.n_total",
                format!(
                    "must equal T·B = {} (each pair is consumed exactly once)",
                    self.steps * self.batch_size
                ),
            ));
        }
        if self.pairs_per_phase * self.freq != self.n_total {
            return Err(Error::config(
                "train.pairs_per_phase",
                format!("must equal N_total / F = {}", self.n_total / self.freq),
            ));
        }
        for (name, v) in [
            ("train.lr", self.lr),
            ("train.beta", self.beta),
            ("train.lora_alpha", self.lora_alpha),
            ("train.temperature", self.temperature),
            ("train.clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a positive finite number"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(Error::config("train.ema_tau", "must lie in [0, 1]"));
        }
        if self.ref_mode == RefMode::StaticGolden && self.golden.is_none() {
            return Err(Error::config(
                "train.golden",
                "reference mode static_golden requires a golden checkpoint",
            ));
        }
        Ok(())
    }
}
