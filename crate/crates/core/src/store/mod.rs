//! On-disk formats: configuration, checkpoints, JSONL logs, run manifests and
//! CSV reports. Everything is text.

mod checkpoint;
mod config;
mod jsonl;
mod manifest;
mod report;

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    EvalSection, ExperimentConfig, OracleSection, OutputSection, PromptSection, Seeds, TrainSection, DEFAULT_BATCH,
    DEFAULT_STEPS, OUTPUT_ROOT_ENV,
};
pub use jsonl::{read_jsonl, read_metrics, JsonlRead, JsonlWriter};
pub use manifest::{file_digest, FileEntry, RunManifest, MANIFEST_FILE, MANIFEST_VERSION};
pub use report::{
    read_results_csv, write_aggregate_csv, write_eval_csv, write_results_csv, AggregateRow, EvalRow, ResultRow,
    RunResult,
};

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
