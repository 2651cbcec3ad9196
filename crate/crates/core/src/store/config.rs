//! Experiment configuration as a strict TOML document.
//!
//! Every key has a default, so an empty file is a valid configuration. Keys
//! that are derived from others (`train.n_total`, `train.pairs_per_phase`,
//! `prompts.align`, the per-purpose seeds) may be pinned explicitly; left out,
//! they are computed and never written back.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::ModelDims;
use crate::oracle::AnnotationMode;
use crate::rng::derive_seed;
use crate::trainer::{RefMode, SftConfig, TrainConfig, PROMPT_HEADROOM};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "BPO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every per-purpose seed derives from it unless pinned.
    pub seed: u64,
    /// Task label. The gold reward is a function of the task alone, so runs
    /// that share a task share the oracle.
    pub task: String,
    pub model: ModelDims,
    pub oracle: OracleSection,
    pub prompts: PromptSection,
    pub sft: SftConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: "synthetic".into(),
            model: ModelDims::default(),
            oracle: OracleSection::default(),
            prompts: PromptSection::default(),
            sft: SftConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub length_penalty: f64,
    pub target_len: usize,
    pub prompt_bonus: f64,
    pub annotation: AnnotationMode,
    /// Seed for the affinity vector; derived from the task label when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_seed: Option<u64>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            length_penalty: 0.5,
            target_len: 12,
            prompt_bonus: 0.0,
            annotation: AnnotationMode::Deterministic,
            reward_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub prompt_len: usize,
    pub sft: usize,
    /// Defaults to enough prompts for the offline regime, where one phase
    /// annotates the whole budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<usize>,
    pub eval: usize,
    /// Demonstrations per SFT prompt.
    pub sft_responses: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            sft: 200,
            align: None,
            eval: 500,
            sft_responses: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub freq: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_per_phase: Option<usize>,
    pub lr: f64,
    pub beta: f64,
    pub loss: LossKind,
    pub ensemble: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ref_mode: RefMode,
    pub ema_tau: f64,
    pub temperature: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub golden: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(DEFAULT_STEPS, DEFAULT_STEPS, DEFAULT_BATCH);
        Self {
            steps: t.steps,
            freq: t.freq,
            batch_size: t.batch_size,
            n_total: None,
            pairs_per_phase: None,
            lr: t.lr,
            beta: t.beta,
            loss: t.loss,
            ensemble: t.ensemble,
            lora_rank: t.lora_rank,
            lora_alpha: t.lora_alpha,
            ref_mode: t.ref_mode,
            ema_tau: t.ema_tau,
            temperature: t.temperature,
            clip_norm: t.clip_norm,
            eval_interval: t.eval_interval,
            golden: None,
            model_seed: None,
            data_seed: None,
            annotation_seed: None,
        }
    }
}

pub const DEFAULT_STEPS: usize = 600;
pub const DEFAULT_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    pub n_resamples: usize,
    pub level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            n_resamples: 2000,
            level: 0.95,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to `$BPO_OUTPUT_ROOT`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Concrete seeds for every consumer of randomness in one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub reward: u64,
    pub prompts: u64,
    pub corpus: u64,
    pub sft: u64,
    pub references: u64,
    pub model: u64,
    pub data: u64,
    pub annotation: u64,
    pub eval: u64,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Parses, fills defaults and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_toml_string().as_bytes())
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn n_total(&self) -> usize {
        self.train.n_total.unwrap_or(self.train.steps * self.train.batch_size)
    }

    pub fn align_prompt_count(&self) -> usize {
        self.prompts
            .align
            .unwrap_or_else(|| (self.n_total() as f64 * (1.0 + PROMPT_HEADROOM)).ceil() as usize)
    }

    pub fn output_root(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            reward: self
                .oracle
                .reward_seed
                .unwrap_or_else(|| derive_seed(0, &format!("task:{}", self.task))),
            prompts: derive_seed(s, "prompts"),
            corpus: derive_seed(s, "corpus"),
            sft: derive_seed(s, "sft"),
            references: derive_seed(s, "references"),
            model: self.train.model_seed.unwrap_or_else(|| derive_seed(s, "model")),
            data: self.train.data_seed.unwrap_or_else(|| derive_seed(s, "data")),
            annotation: self
                .train
                .annotation_seed
                .unwrap_or_else(|| derive_seed(s, "annotation")),
            eval: self.eval.seed.unwrap_or_else(|| derive_seed(s, "eval")),
        }
    }

    /// The alignment settings with derived values filled in.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let n_total = self.n_total();
        let seeds = self.seeds();
        TrainConfig {
            steps: t.steps,
            freq: t.freq,
            batch_size: t.batch_size,
            n_total,
            pairs_per_phase: t.pairs_per_phase.unwrap_or(n_total.checked_div(t.freq).unwrap_or(0)),
            lr: t.lr,
            beta: t.beta,
            loss: t.loss,
            ensemble: t.ensemble,
            lora_rank: t.lora_rank,
            lora_alpha: t.lora_alpha,
            ref_mode: t.ref_mode,
            ema_tau: t.ema_tau,
            temperature: t.temperature,
            clip_norm: t.clip_norm,
            annotation: self.oracle.annotation,
            model_seed: seeds.model,
            data_seed: seeds.data,
            annotation_seed: seeds.annotation,
            eval_interval: t.eval_interval,
            golden: t.golden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.task.is_empty() {
            return Err(Error::config("task", "must be non-empty"));
        }
        let o = &self.oracle;
        if !(o.length_penalty >= 0.0 && o.length_penalty.is_finite()) {
            return Err(Error::config(
                "oracle.length_penalty",
                "must be finite and non-negative",
            ));
        }
        if !o.prompt_bonus.is_finite() {
            return Err(Error::config("oracle.prompt_bonus", "must be finite"));
        }
        if o.target_len < 2 || o.target_len + 2 >= self.model.max_gen_len {
            return Err(Error::config(
                "oracle.target_len",
                format!(
                    "demonstration lengths L*±2 must fit below L_max = {}",
                    self.model.max_gen_len
                ),
            ));
        }
        let p = &self.prompts;
        for (name, v) in [
            ("prompts.prompt_len", p.prompt_len),
            ("prompts.sft", p.sft),
            ("prompts.eval", p.eval),
            ("prompts.sft_responses", p.sft_responses),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        self.sft.validate()?;
        let tc = self.train_config();
        tc.validate()?;
        let needed = (tc.pairs_per_phase as f64 * (1.0 + PROMPT_HEADROOM)).ceil() as usize;
        if self.align_prompt_count() < needed {
            return Err(Error::config(
                "prompts.align",
                format!(
                    "needs at least {needed} prompts for M = {} pairs per phase",
                    tc.pairs_per_phase
                ),
            ));
        }
        let e = &self.eval;
        if !(e.temperature > 0.0 && e.temperature.is_finite()) {
            return Err(Error::config("eval.temperature", "must be a positive finite number"));
        }
        if e.n_resamples == 0 {
            return Err(Error::config("eval.n_resamples", "must be positive"));
        }
        if !(e.level > 0.0 && e.level < 1.0) {
            return Err(Error::config("eval.level", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

/// Maps a TOML error to a config error naming the offending key where the
/// parser reports one. The message carries the line and column.
fn config_parse_error(e: toml::de::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split_once("unknown field `")
        .and_then(|(_, rest)| rest.split_once('`'))
        .map(|(name, _)| name.to_string())
        .unwrap_or_else(|| "config".to_string());
    Error::config(field, msg.trim().replace('\n', " "))
}
