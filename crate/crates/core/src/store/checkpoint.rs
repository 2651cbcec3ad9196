//! Versioned JSON checkpoints holding the base network and, optionally, an
//! adapter ensemble. Floats are written in shortest round-trip form and
//! parsed exactly, so a reloaded policy computes bit-identical logits.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{snapshot, AdapterSet, BaseParams, LoraAdapter, LoraEnsemble, LoraTarget, Policy, PolicySnapshot};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub base: Arc<BaseParams>,
    /// `None` for a base-only policy such as the SFT model.
    pub ensemble: Option<LoraEnsemble>,
    /// Free-form origin notes (task, seed, config digest, ...).
    pub provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    member: usize,
    #[serde(flatten)]
    adapter: LoraAdapter,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u64,
    label: String,
    base: BaseParams,
    ensemble: Vec<AdapterRecord>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn base_only(base: Arc<BaseParams>, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            base,
            ensemble: None,
            provenance: BTreeMap::new(),
        }
    }

    pub fn from_policy(policy: &Policy, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            base: policy.base.clone(),
            ensemble: Some(policy.ensemble.clone()),
            provenance: BTreeMap::new(),
        }
    }

    pub fn with_provenance(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.provenance.insert(key.into(), value.to_string());
        self
    }

    /// The inference policy: base plus the merged ensemble delta.
    pub fn snapshot(&self) -> PolicySnapshot {
        match self.policy() {
            Some(p) => snapshot(&p, self.label.clone()),
            None => PolicySnapshot::from_base(self.base.clone(), self.label.clone()),
        }
    }

    pub fn policy(&self) -> Option<Policy> {
        self.ensemble.as_ref().map(|e| Policy {
            base: self.base.clone(),
            ensemble: e.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let ensemble = self
            .ensemble
            .iter()
            .flat_map(|e| e.members.iter().enumerate())
            .flat_map(|(member, set)| {
                [set.hidden.clone(), set.output.clone()]
                    .into_iter()
                    .map(move |adapter| AdapterRecord { member, adapter })
            })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            label: self.label.clone(),
            base: (*self.base).clone(),
            ensemble,
            provenance: self.provenance.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("checkpoint always serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Parses and checks a checkpoint; `path` is only used in error messages.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::format(path, format!("corrupt or truncated checkpoint: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::format(path, "missing format_version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let base = file.base;
        let d = base.dims;
        d.validate().map_err(|e| bad(&e.to_string()))?;
        let shapes_ok = base.emb.shape() == (d.vocab_size, d.embed_dim)
            && base.w_h.shape() == (d.hidden_dim, d.input_width())
            && base.b_h.len() == d.hidden_dim
            && base.w_out.shape() == (d.vocab_size, d.hidden_dim)
            && base.b_out.len() == d.vocab_size;
        if !shapes_ok {
            return Err(bad("base parameter shapes do not match dims"));
        }
        if !base.is_finite() {
            return Err(bad("base parameters contain non-finite values"));
        }

        let ensemble = if file.ensemble.is_empty() {
            None
        } else {
            let mut slots: BTreeMap<usize, (Option<LoraAdapter>, Option<LoraAdapter>)> = BTreeMap::new();
            for rec in file.ensemble {
                let slot = slots.entry(rec.member).or_default();
                let target = match rec.adapter.target {
                    LoraTarget::Hidden => &mut slot.0,
                    LoraTarget::Output => &mut slot.1,
                };
                if target.replace(rec.adapter).is_some() {
                    return Err(bad(&format!("member {} has a duplicate adapter", rec.member)));
                }
            }
            let mut members = Vec::with_capacity(slots.len());
            for (i, (member, (hidden, output))) in slots.into_iter().enumerate() {
                if member != i {
                    return Err(bad("ensemble member indices are not contiguous from 0"));
                }
                match (hidden, output) {
                    (Some(hidden), Some(output)) => members.push(AdapterSet { hidden, output }),
                    _ => return Err(bad(&format!("member {member} is missing an adapter"))),
                }
            }
            let ens = LoraEnsemble { members };
            ens.validate(&d).map_err(|e| bad(&e.to_string()))?;
            if !ens.members.iter().all(AdapterSet::is_finite) {
                return Err(bad("adapter parameters contain non-finite values"));
            }
            Some(ens)
        };
        Ok(Self {
            label: file.label,
            base: Arc::new(base),
            ensemble,
            provenance: file.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_base, init_ensemble, ModelDims};
    use crate::rng;
    use rand::Rng;

    fn trained_like() -> Policy {
        let dims = ModelDims::default();
        let base = Arc::new(init_base(dims, 1).unwrap());
        let mut ens = init_ensemble(&dims, 3, 4, 8.0, 2).unwrap();
        let mut r = rng::stream(9, "fill", 0);
        for m in &mut ens.members {
            for t in m.tensors_mut() {
                t.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
            }
        }
        Policy::new(base, ens).unwrap()
    }

    #[test]
    fn logits_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let policy = trained_like();
        let ck = Checkpoint::from_policy(&policy, "final").with_provenance("seed", 3);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (a, b) = (snapshot(&policy, "x"), back.snapshot());
        let dims = policy.base.dims;
        let mut r = rng::stream(4, "contexts", 0);
        for _ in 0..100 {
            let ctx: Vec<u32> = (0..dims.context)
                .map(|_| r.random_range(0..dims.vocab_size as u32))
                .collect();
            assert_eq!(a.logits(&ctx), b.logits(&ctx));
        }
    }

    #[test]
    fn base_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.ckpt");
        let ck = Checkpoint::base_only(Arc::new(init_base(ModelDims::default(), 5).unwrap()), "sft");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.ensemble.is_none());
        assert_eq!(back.snapshot().logits(&[16; 8]), ck.snapshot().logits(&[16; 8]));
    }

    #[test]
    fn future_version_is_incompatible() {
        let text = Checkpoint::from_policy(&trained_like(), "x").to_json().replacen(
            "\"format_version\":1",
            "\"format_version\":999",
            1,
        );
        match Checkpoint::from_json(&text, Path::new("x.ckpt")).unwrap_err() {
            Error::Incompatible { found, expected, .. } => assert_eq!((found, expected), (999, 1)),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = Checkpoint::from_policy(&trained_like(), "x").to_json();
        for cut in [10, text.len() / 2, text.len() - 3] {
            let e = Checkpoint::from_json(&text[..cut], Path::new("x.ckpt")).unwrap_err();
            assert!(matches!(e, Error::Format { .. }), "{e}");
        }
    }

    #[test]
    fn missing_adapter_is_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&Checkpoint::from_policy(&trained_like(), "x").to_json()).unwrap();
        v["ensemble"].as_array_mut().unwrap().pop();
        let e = Checkpoint::from_json(&v.to_string(), Path::new("x.ckpt")).unwrap_err();
        assert!(e.to_string().contains("missing an adapter"), "{e}");
    }
}
