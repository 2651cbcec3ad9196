//! Run manifests: an inventory of every file a run wrote, with digests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{ExperimentConfig, Seeds, CHECKPOINT_VERSION};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u64,
    pub run_id: String,
    pub config_digest: String,
    pub seeds: Seeds,
    /// Format version of each artifact kind.
    pub formats: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
    pub created_unix: u64,
}

fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hex::encode(hasher.finalize())))
}

/// Digest of a single file, as recorded in manifests.
pub fn file_digest(path: &Path) -> Result<String> {
    sha256_file(path).map(|(_, d)| d)
}

/// Inventories every regular file under `dir` except the manifest itself, in
/// path order. Nested run directories are skipped; they carry their own.
fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    let walker = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !(e.file_type().is_dir() && e.path().join(MANIFEST_FILE).exists()));
    for entry in walker {
        let entry = entry.map_err(|e| Error::format(dir, e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
            continue;
        }
        let (bytes, sha256) = sha256_file(entry.path())?;
        files.push(FileEntry {
            path: rel,
            bytes,
            sha256,
        });
    }
    Ok(files)
}

impl RunManifest {
    /// Builds a manifest for everything currently in `dir`.
    pub fn build(dir: &Path, run_id: impl Into<String>, cfg: &ExperimentConfig) -> Result<Self> {
        let formats = [
            ("checkpoint", CHECKPOINT_VERSION),
            ("config", 1),
            ("metrics", 1),
            ("preferences", 1),
            ("manifest", MANIFEST_VERSION),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Ok(Self {
            format_version: MANIFEST_VERSION,
            run_id: run_id.into(),
            config_digest: cfg.digest(),
            seeds: cfg.seeds(),
            formats,
            files: inventory(dir)?,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        super::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let m: Self = super::read_json(&path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Incompatible {
                path,
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn entry(&self, rel: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == rel)
    }

    /// Re-reads every listed file and checks that no unlisted file appeared.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let now = inventory(dir)?;
        for f in &self.files {
            match now.iter().find(|g| g.path == f.path) {
                None => return Err(Error::format(dir.join(&f.path), "listed in the manifest but missing")),
                Some(g) if g != f => {
                    return Err(Error::format(dir.join(&f.path), "digest does not match the manifest"))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = now.iter().find(|g| self.entry(&g.path).is_none()) {
            return Err(Error::format(dir.join(&extra.path), "not listed in the manifest"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_lists_every_file_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::write(d.join("a.txt"), "alpha").unwrap();
        std::fs::create_dir(d.join("sub")).unwrap();
        std::fs::write(d.join("sub/b.txt"), "beta").unwrap();
        std::fs::create_dir(d.join("nested")).unwrap();
        std::fs::write(d.join("nested").join(MANIFEST_FILE), "{}").unwrap();
        std::fs::write(d.join("nested/c.txt"), "gamma").unwrap();

        let m = RunManifest::build(d, "r", &ExperimentConfig::default()).unwrap();
        m.write(d).unwrap();
        let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["a.txt", "sub/b.txt"]);
        assert_eq!(m.entry("a.txt").unwrap().bytes, 5);
        let back = RunManifest::load(d).unwrap();
        assert_eq!(back, m);
        back.verify(d).unwrap();

        std::fs::write(d.join("a.txt"), "alphA").unwrap();
        assert!(back.verify(d).unwrap_err().to_string().contains("digest"));
        std::fs::write(d.join("a.txt"), "alpha").unwrap();
        std::fs::write(d.join("new.txt"), "").unwrap();
        assert!(back.verify(d).unwrap_err().to_string().contains("not listed"));
    }
}
