use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub batch: usize,
    pub epochs: usize,
}

/// How long each stage runs before control passes to the other one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageGranularity {
    PerEpoch,
    PerNBatches(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Classifier warm-up, then alternating Stage I / Stage II through the GRL.
    Fidip,
    /// Stage II batches only, without any domain path.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub init_session: Session,
    pub formal_session: Session,
    pub lambda_grl: f64,
    /// `S(REAL)`; `None` means `n_synthetic / n_real` of the training set.
    pub real_weight: Option<f64>,
    pub frozen_blocks: Vec<String>,
    pub stage_granularity: StageGranularity,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Fidip,
            lr: 0.001,
            init_session: Session { batch: 128, epochs: 1 },
            formal_session: Session { batch: 64, epochs: 100 },
            lambda_grl: 0.0005,
            real_weight: None,
            frozen_blocks: vec!["res1".into(), "res2".into(), "res3".into()],
            stage_granularity: StageGranularity::PerEpoch,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos("lr", self.lr)?;
        for (name, s) in [("init_session", self.init_session), ("formal_session", self.formal_session)] {
            if s.batch == 0 || s.epochs == 0 {
                return Err(Error::Config(format!("{name} batch and epochs must be positive")));
            }
        }
        if !(self.lambda_grl >= 0.0) || !self.lambda_grl.is_finite() {
            return Err(Error::Config(format!("lambda_grl must be >= 0, got {}", self.lambda_grl)));
        }
        if let Some(w) = self.real_weight {
            pos("real_weight", w)?;
        }
        if self.stage_granularity == StageGranularity::PerNBatches(0) {
            return Err(Error::Config("per_n_batches needs n >= 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Explicit `real_weight`, else the synthetic/real ratio (1 if either is absent).
    pub fn resolve_real_weight(&self, real: usize, synthetic: usize) -> f64 {
        self.real_weight.unwrap_or(if real == 0 || synthetic == 0 {
            1.0
        } else {
            synthetic as f64 / real as f64
        })
    }
}
