//! Domain-confusion probe and feature export.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::predict::sequential_batches;
use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::model::{Param, PoseModelBundle};
use crate::schema::DomainLabel;
use crate::seed;
use crate::train::{domain_loss, Adam, AdamConfig};

/// Pooled encoder features, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub domains: Vec<DomainLabel>,
    pub image_ids: Vec<u64>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn concat(mut self, other: FeatureMatrix) -> Self {
        self.rows.extend(other.rows);
        self.domains.extend(other.domains);
        self.image_ids.extend(other.image_ids);
        self
    }

    /// CSV with header `image_id,domain,f0,…`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("image_id,domain");
        for j in 0..self.dim() {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for ((row, d), id) in self.rows.iter().zip(&self.domains).zip(&self.image_ids) {
            s.push_str(&format!("{id},{d}"));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Globally pooled encoder output for every record of `data`.
pub fn extract_features(bundle: &PoseModelBundle, data: &dyn BatchSource, batch: usize) -> Result<FeatureMatrix> {
    let mut m = FeatureMatrix {
        rows: Vec::new(),
        domains: Vec::new(),
        image_ids: Vec::new(),
    };
    for b in sequential_batches(data, batch) {
        let prepared = data.build(&b, 0)?;
        let bt = prepared.to_tensors(
            bundle.config.input_size,
            bundle.config.heatmap_size(),
            bundle.dtype(),
            &bundle.device,
        )?;
        let pooled = PoseModelBundle::pool(&bundle.forward_features(&bt.images)?)?;
        m.rows.extend(pooled.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        m.domains.extend(prepared.domains);
        m.image_ids.extend(prepared.image_ids);
    }
    Ok(m)
}

/// Extract features and write them as CSV.
pub fn export_features(bundle: &PoseModelBundle, data: &dyn BatchSource, path: &Path) -> Result<FeatureMatrix> {
    let m = extract_features(bundle, data, 32)?;
    m.write_csv(path)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: (usize, usize),
    /// Fraction of each domain used for fitting the probe.
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: (256, 64),
            train_fraction: 0.7,
            epochs: 300,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Held-out accuracy of the probe.
    pub accuracy: f64,
    /// Held-out accuracy of always answering the majority training class.
    pub chance: f64,
    pub train: usize,
    pub test: usize,
}

fn fc_params(dims: &[(usize, usize)], seed_v: u64) -> Result<Vec<(Param, Param)>> {
    use rand::Rng;
    let mut rng = seed::rng(&[seed_v, seed::tag("probe")]);
    dims.iter()
        .enumerate()
        .map(|(i, &(fin, fout))| {
            let b = (1.0 / fin as f64).sqrt();
            let w: Vec<f64> = (0..fin * fout).map(|_| rng.random_range(-b..=b)).collect();
            Ok((
                Param {
                    name: format!("fc{i}.weight"),
                    var: Var::from_vec(w, (fout, fin), &Device::Cpu)?,
                },
                Param {
                    name: format!("fc{i}.bias"),
                    var: Var::zeros(fout, DType::F64, &Device::Cpu)?,
                },
            ))
        })
        .collect()
}

fn mlp(x: &Tensor, layers: &[(Param, Param)]) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(&w.var.as_tensor().t()?)?.broadcast_add(b.var.as_tensor())?;
        if i + 1 < layers.len() {
            h = h.relu()?;
        }
    }
    Ok(h.squeeze(1)?)
}

/// Train a fresh three-layer classifier on a stratified split of the
/// features and report its held-out domain accuracy. Features are
/// standardised with training-split statistics.
pub fn domain_confusion_score(features: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let syn: Vec<usize> = (0..features.len()).filter(|&i| features.domains[i] == DomainLabel::Synthetic).collect();
    let real: Vec<usize> = (0..features.len()).filter(|&i| features.domains[i] == DomainLabel::Real).collect();
    if syn.len() < 2 || real.len() < 2 {
        return Err(Error::Input(format!(
            "domain probe needs at least two samples of each domain, got {} real and {} synthetic",
            real.len(),
            syn.len()
        )));
    }
    let mut rng = seed::rng(&[cfg.seed, seed::tag("probe-split")]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in [real, syn] {
        group.shuffle(&mut rng);
        let k = ((group.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, group.len() - 1);
        train.extend_from_slice(&group[..k]);
        test.extend_from_slice(&group[k..]);
    }
    let d = features.dim();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features.rows[i]) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for j in 0..d {
            sd[j] += (features.rows[i][j] - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let to_tensors = |idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let x: Vec<f64> = idx
            .iter()
            .flat_map(|&i| (0..d).map(|j| (features.rows[i][j] - mean[j]) / sd[j]).collect::<Vec<_>>())
            .collect();
        let y: Vec<f64> = idx.iter().map(|&i| features.domains[i].target()).collect();
        Ok((
            Tensor::from_vec(x, (idx.len(), d), &Device::Cpu)?,
            Tensor::from_vec(y, idx.len(), &Device::Cpu)?,
        ))
    };
    let (xtr, ytr) = to_tensors(&train)?;
    let (xte, yte) = to_tensors(&test)?;

    let (h1, h2) = cfg.hidden;
    let layers = fc_params(&[(d, h1), (h1, h2), (h2, 1)], cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, AdamConfig::default());
    for _ in 0..cfg.epochs {
        let loss = domain_loss(&mlp(&xtr, &layers)?, &ytr)?;
        let g = loss.backward()?;
        adam.step(layers.iter().flat_map(|(w, b)| [w, b]), &g)?;
    }
    let pred = mlp(&xte, &layers)?.ge(0.0)?.to_dtype(DType::F64)?;
    let correct = pred.eq(&yte)?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let n_syn_train = train.iter().filter(|&&i| features.domains[i] == DomainLabel::Synthetic).count();
    let majority = if 2 * n_syn_train >= train.len() { 1.0 } else { 0.0 };
    let chance = yte.eq(majority)?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? / test.len() as f64;
    Ok(ProbeResult {
        accuracy: correct / test.len() as f64,
        chance,
        train: train.len(),
        test: test.len(),
    })
}
