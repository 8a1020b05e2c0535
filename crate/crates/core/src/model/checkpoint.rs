//! Single-file checkpoints: parameters and optional optimizer state as
//! safetensors, with JSON metadata in the header.
//!
//! Tensor keys are `<group>/<block>.<kind>` (`theta_f/res3.weight`), optimizer
//! moments live under `adam/`. Pretrained backbones load through
//! [`PoseModelBundle::load_mapped`] with a name map per source format.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{PoseModelBundle, Stage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Option<Stage>,
    pub epoch: usize,
    pub config_hash: String,
    pub schema_name: String,
    /// Free-form caller state (cycle counters, loss history, the config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

const META_KEY: &str = "dapose";

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    /// Refuse state written under a different configuration.
    pub fn check_config(&self, requested_hash: &str, requested: &serde_json::Value) -> Result<()> {
        if self.meta.config_hash == requested_hash {
            return Ok(());
        }
        let stored = self.meta.extra.get("config").cloned().unwrap_or(serde_json::Value::Null);
        let mut lines = Vec::new();
        json_diff("", &stored, requested, &mut lines);
        Err(Error::ConfigMismatch {
            stored: self.meta.config_hash.clone(),
            requested: requested_hash.to_string(),
            diff: lines.join("\n"),
        })
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

/// `path: stored -> requested` per differing leaf.
pub fn json_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                json_diff(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("  {}: {} -> {}", if path.is_empty() { "<root>" } else { path }, a, b)),
        _ => {}
    }
}

/// Write bundle parameters plus `extra` tensors atomically.
pub fn save_checkpoint(
    path: &Path,
    bundle: &PoseModelBundle,
    extra: &[(String, Tensor)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors = bundle.state_tensors();
    tensors.extend(extra.iter().cloned());
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.clone(), t)), Some(header))?;
    let tmp = path.with_extension("tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, st_meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let raw = st_meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Data(format!("{} has no checkpoint metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: (16, 16),
            channels: vec![2, 2, 4],
            strides: vec![2, 2, 1],
            block_names: vec!["res1".into(), "res2".into(), "res3".into()],
            deconv_channels: 4,
            domain_hidden: (4, 4),
            num_joints: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_restores_parameters_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let a = PoseModelBundle::new(tiny(), 3).unwrap();
        let meta = CheckpointMeta {
            stage: Some(Stage::Stage2),
            epoch: 4,
            config_hash: "abc".into(),
            schema_name: "coco17".into(),
            extra: serde_json::json!({"config": {"lr": 0.001}}),
        };
        let m = Tensor::ones(3, candle_core::DType::F32, &Device::Cpu).unwrap();
        save_checkpoint(&path, &a, &[("adam/m/x".into(), m)], &meta).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.with_prefix("adam").len(), 1);
        let mut b = PoseModelBundle::new(tiny(), 4).unwrap();
        assert_ne!(a.checksums().unwrap(), b.checksums().unwrap());
        b.load_state(&ck.tensors).unwrap();
        assert_eq!(a.checksums().unwrap(), b.checksums().unwrap());
    }

    #[test]
    fn mismatched_hash_reports_diff() {
        let ck = Checkpoint {
            meta: CheckpointMeta {
                stage: None,
                epoch: 0,
                config_hash: "h1".into(),
                schema_name: "coco17".into(),
                extra: serde_json::json!({"config": {"train": {"lr": 0.001, "seed": 1}}}),
            },
            tensors: HashMap::new(),
        };
        let req = serde_json::json!({"train": {"lr": 0.01, "seed": 1}});
        match ck.check_config("h2", &req) {
            Err(Error::ConfigMismatch { diff, .. }) => {
                assert!(diff.contains("train.lr: 0.001 -> 0.01"), "{diff}");
                assert!(!diff.contains("seed"));
            }
            other => panic!("{other:?}"),
        }
        assert!(ck.check_config("h1", &req).is_ok());
    }
}
