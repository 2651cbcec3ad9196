//! Append-only JSON-lines files.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::{MetricRecord, MetricsSink};

/// Writes one record per line. Each record goes to the file in a single write
/// call, so a failure surfaces on the record that caused it.
pub struct JsonlWriter<T> {
    path: PathBuf,
    file: File,
    written: usize,
    _record: PhantomData<fn(&T)>,
}

impl<T: Serialize> JsonlWriter<T> {
    /// Creates or truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(path, file))
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(path, file))
    }

    fn wrap(path: &Path, file: File) -> Self {
        Self {
            path: path.to_path_buf(),
            file,
            written: 0,
            _record: PhantomData,
        }
    }

    pub fn append(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::format(&self.path, e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    /// Flushes file contents to disk.
    pub fn finish(self) -> Result<()> {
        self.file.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

impl MetricsSink for JsonlWriter<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.append(rec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsonlRead<T> {
    pub records: Vec<T>,
    /// The file ended in an unterminated line, which was skipped.
    pub truncated: bool,
}

/// Reads every newline-terminated record. A final line without a newline is
/// the remnant of an interrupted write: it is dropped with a warning. A
/// malformed complete line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlRead<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (complete, tail) = match text.rfind('\n') {
        Some(i) => text.split_at(i + 1),
        None => ("", text.as_str()),
    };
    let mut records = Vec::new();
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    let truncated = !tail.is_empty();
    if truncated {
        warn!(
            "{}: ignoring unterminated final line ({} bytes)",
            path.display(),
            tail.len()
        );
    }
    Ok(JsonlRead { records, truncated })
}

pub fn read_metrics(path: &Path) -> Result<JsonlRead<MetricRecord>> {
    read_jsonl(path)
}
