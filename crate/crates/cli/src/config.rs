//! Experiment configuration: one JSON document with a section per module,
//! `--set` overrides and a content hash.

use std::path::{Path, PathBuf};

use dapose::data::{AugmentConfig, SampleConfig};
use dapose::eval::ProbeConfig;
use dapose::model::ModelConfig;
use dapose::synthgen::{FitWeights, GenerateConfig, GmmConfig, OptimizerConfig};
use dapose::train::TrainConfig;
use dapose::Error;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifests used for training.
    pub train: Vec<PathBuf>,
    /// Manifest of the evaluation set.
    pub test: Option<PathBuf>,
    /// Manifests for the classifier warm-up; the training set when empty.
    pub init: Vec<PathBuf>,
    /// Schema JSON; COCO-17 when absent.
    pub schema: Option<PathBuf>,
    /// Checkpoint whose parameters seed the model before training.
    pub init_checkpoint: Option<PathBuf>,
    pub sample: SampleConfig,
    /// `null` disables augmentation.
    pub augment: Option<AugmentConfig>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            test: None,
            init: Vec::new(),
            schema: None,
            init_checkpoint: None,
            sample: SampleConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Model to evaluate; `<out>/checkpoint.safetensors` of a train run.
    pub checkpoint: Option<PathBuf>,
    /// COCO results file scored instead of running a model.
    pub detections: Option<PathBuf>,
    pub batch: usize,
    /// Train a domain probe on pooled features of the test set (plus
    /// `probe_data`).
    pub domain_confusion: bool,
    /// Extra manifest mixed into the probe set, e.g. held-out synthetic data.
    pub probe_data: Option<PathBuf>,
    pub probe: ProbeConfig,
    /// Write pooled features of the probe set to `features.csv`.
    pub export_features: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            detections: None,
            batch: 32,
            domain_confusion: false,
            probe_data: None,
            probe: ProbeConfig::default(),
            export_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub weights: FitWeights,
    pub optimizer: OptimizerConfig,
    pub gmm: GmmConfig,
    /// Focal length (px) of the assumed camera.
    pub focal: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            weights: FitWeights::default(),
            optimizer: OptimizerConfig::default(),
            gmm: GmmConfig::default(),
            focal: 500.0,
        }
    }
}

/// Grid axes of `ablate`. Each point overrides `train.mode`,
/// `train.frozen_blocks` and `train.real_weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub domain_adaptation: Vec<bool>,
    /// Number of trailing encoder blocks left trainable in Stage II.
    pub update_blocks: Vec<usize>,
    /// `null` keeps the synthetic/real ratio.
    pub real_weight: Vec<Option<f64>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            domain_adaptation: vec![false, true],
            update_blocks: vec![1, 2],
            real_weight: vec![None],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synthgen: GenerateConfig,
    pub fit: FitSection,
    pub ablate: AblateSection,
}

/// Sort object keys recursively.
pub fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

impl ExperimentConfig {
    pub fn to_value(&self) -> Value {
        canonicalize(&serde_json::to_value(self).expect("config serializes"))
    }

    /// SHA-256 of the canonical JSON of the fully resolved config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_value()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn from_value(v: Value) -> Result<Self, Error> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("config key '{path}': {}", e.into_inner()))
        })
    }

    /// Read `path` (or start from defaults), then apply `overrides`
    /// (`a.b.c=value`, value parsed as JSON and otherwise taken as a string)
    /// and `seed`.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, Error> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let v: Value =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if let Some(dir) = p.parent() {
                    relative_to(dir, v)
                } else {
                    v
                }
            }
            None => Value::Object(Map::new()),
        };
        if !v.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        if let Some(s) = seed {
            for key in ["train.seed", "synthgen.seed", "eval.probe.seed"] {
                set_path(&mut v, key, Value::from(s))?;
            }
        }
        let cfg = Self::from_value(v)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), Error> {
        self.model.check()?;
        self.train.check()?;
        if self.data.sample.input_size != self.model.input_size {
            return Err(Error::Config(format!(
                "data.sample.input_size {:?} differs from model.input_size {:?}",
                self.data.sample.input_size, self.model.input_size
            )));
        }
        if let Some(a) = &self.data.augment {
            a.check()?;
        }
        if self.eval.batch == 0 {
            return Err(Error::Config("eval.batch must be positive".into()));
        }
        Ok(())
    }
}

/// Path-valued keys in a config file are relative to the file itself.
fn relative_to(dir: &Path, mut v: Value) -> Value {
    let fix = |x: &mut Value| {
        if let Value::String(s) = x {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = dir.join(p).to_string_lossy().into_owned();
            }
        }
    };
    let paths = [
        "data.test",
        "data.schema",
        "data.init_checkpoint",
        "eval.checkpoint",
        "eval.detections",
        "eval.probe_data",
        "synthgen.library",
    ];
    for key in paths {
        if let Some(x) = pointer_mut(&mut v, key) {
            fix(x);
        }
    }
    for key in ["data.train", "data.init"] {
        if let Some(Value::Array(a)) = pointer_mut(&mut v, key) {
            a.iter_mut().for_each(fix);
        }
    }
    v
}

fn pointer_mut<'a>(v: &'a mut Value, dotted: &str) -> Option<&'a mut Value> {
    v.pointer_mut(&format!("/{}", dotted.replace('.', "/")))
}

fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{dotted}'")));
    }
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{dotted}': '{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"train": {"lr": 0.01, "seed": 3}, "model": {"num_joints": 17}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"model": {"num_joints": 17}, "train": {"seed": 3, "lr": 0.01}}"#).unwrap();
        let a = ExperimentConfig::from_value(a).unwrap();
        let b = ExperimentConfig::from_value(b).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig {
            train: TrainConfig { lr: 0.02, ..a.train.clone() },
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let v: Value = serde_json::from_str(r#"{"train": {"learning_rate": 1}}"#).unwrap();
        let msg = ExperimentConfig::from_value(v).unwrap_err().to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("train"), "{msg}");
    }

    #[test]
    fn overrides_and_seed() {
        let cfg = ExperimentConfig::resolve(
            None,
            &["train.lr=0.05".into(), "train.mode=finetune".into(), "synthgen.count=7".into()],
            Some(42),
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.train.mode, dapose::train::TrainMode::Finetune);
        assert_eq!(cfg.synthgen.count, 7);
        assert_eq!((cfg.train.seed, cfg.synthgen.seed, cfg.eval.probe.seed), (42, 42, 42));
        assert!(ExperimentConfig::resolve(None, &["train.nope=1".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["train.lr".into()], None).is_err());
    }

    #[test]
    fn mismatched_input_sizes_rejected() {
        let err = ExperimentConfig::resolve(None, &["model.input_size=[64,64]".into()], None).unwrap_err();
        assert!(err.to_string().contains("input_size"), "{err}");
    }
}
