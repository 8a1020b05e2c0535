//! Encoder / pose head / domain head with named parameter blocks and a
//! per-block freeze mask.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grl::GradientReversal;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// θ_f
    #[serde(rename = "theta_f")]
    Extractor,
    /// θ_y
    #[serde(rename = "theta_y")]
    PoseHead,
    /// θ_d
    #[serde(rename = "theta_d")]
    DomainHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Extractor, ParamGroup::PoseHead, ParamGroup::DomainHead];

    pub fn key(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "theta_f",
            ParamGroup::PoseHead => "theta_y",
            ParamGroup::DomainHead => "theta_d",
        }
    }

    pub fn from_key(k: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.key() == k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Reference backbone: one 3×3 conv + ReLU per encoder block (replicate
/// padding), stride-2 4×4 deconvolutions back to stride 4, a 1×1 heatmap
/// conv; domain head GAP → GRL → FC → ReLU → FC → ReLU → FC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_joints: usize,
    /// `(width, height)` of network input.
    pub input_size: (usize, usize),
    pub block_names: Vec<String>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub deconv_channels: usize,
    pub domain_hidden: (usize, usize),
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_joints: 17,
            input_size: (192, 256),
            block_names: (1..=5).map(|i| format!("res{i}")).collect(),
            channels: vec![16, 32, 64, 96, 128],
            strides: vec![2, 2, 2, 2, 2],
            deconv_channels: 64,
            domain_hidden: (256, 64),
            precision: Precision::F32,
        }
    }
}

/// Output stride of the pose head.
pub const HEATMAP_STRIDE: usize = 4;

impl ModelConfig {
    pub fn encoder_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn num_deconvs(&self) -> usize {
        (self.encoder_stride() / HEATMAP_STRIDE).trailing_zeros() as usize
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// `(height, width)` of the heatmaps.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.1 / HEATMAP_STRIDE, self.input_size.0 / HEATMAP_STRIDE)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.block_names.len();
        if n == 0 || self.channels.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "encoder needs matching block_names/channels/strides, got {}/{}/{}",
                n,
                self.channels.len(),
                self.strides.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.block_names {
            if !seen.insert(b) {
                return Err(Error::Config(format!("duplicate encoder block name '{b}'")));
            }
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.num_joints == 0 {
            return Err(Error::Config("channels, strides and num_joints must be positive".into()));
        }
        let s = self.encoder_stride();
        if s < HEATMAP_STRIDE || !(s / HEATMAP_STRIDE).is_power_of_two() || s % HEATMAP_STRIDE != 0 {
            return Err(Error::Config(format!(
                "encoder stride {s} must be {HEATMAP_STRIDE} times a power of two"
            )));
        }
        let (w, h) = self.input_size;
        if w % s != 0 || h % s != 0 {
            return Err(Error::Config(format!("input size {w}x{h} is not divisible by encoder stride {s}")));
        }
        if self.domain_hidden.0 == 0 || self.domain_hidden.1 == 0 || self.deconv_channels == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    /// `block.kind`, e.g. `res2.weight`.
    pub name: String,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub group: ParamGroup,
    pub params: Vec<Param>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct PoseModelBundle {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub device: Device,
    pub stage: Option<Stage>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl PoseModelBundle {
    /// Fresh parameters; every tensor draws from its own stream keyed by
    /// `(seed, parameter name)`.
    pub fn new(config: ModelConfig, seed_v: u64) -> Result<Self> {
        config.check()?;
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let mk = |name: &str, shape: &[usize], values: Vec<f64>| -> Result<Param> {
            let t = Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?;
            Ok(Param {
                name: name.to_string(),
                var: Var::from_tensor(&t)?,
            })
        };
        let rng_for = |name: &str| seed::rng(&[seed_v, seed::tag(name)]);
        let mut blocks = Vec::new();

        let mut c_in = 3;
        for (name, &c) in config.block_names.iter().zip(&config.channels) {
            let wname = format!("{name}.weight");
            let shape = [c, c_in, 3, 3];
            let bound = (6.0 / (c_in * 9) as f64).sqrt();
            blocks.push(Block {
                name: name.clone(),
                group: ParamGroup::Extractor,
                params: vec![
                    mk(&wname, &shape, uniform(&shape, bound, &mut rng_for(&wname)))?,
                    mk(&format!("{name}.bias"), &[c], vec![0.0; c])?,
                ],
                trainable: true,
            });
            c_in = c;
        }

        for i in 0..config.num_deconvs() {
            let name = format!("deconv{}", i + 1);
            let wname = format!("{name}.weight");
            let c = config.deconv_channels;
            let shape = [c_in, c, 4, 4];
            let bound = (6.0 / (c_in * 4) as f64).sqrt();
            blocks.push(Block {
                name: name.clone(),
                group: ParamGroup::PoseHead,
                params: vec![
                    mk(&wname, &shape, uniform(&shape, bound, &mut rng_for(&wname)))?,
                    mk(&format!("{name}.bias"), &[c], vec![0.0; c])?,
                ],
                trainable: true,
            });
            c_in = c;
        }
        let k = config.num_joints;
        let shape = [k, c_in, 1, 1];
        blocks.push(Block {
            name: "final".into(),
            group: ParamGroup::PoseHead,
            params: vec![
                mk("final.weight", &shape, normal(&shape, 0.01, &mut rng_for("final.weight")))?,
                mk("final.bias", &[k], vec![0.0; k])?,
            ],
            trainable: true,
        });

        let (h1, h2) = config.domain_hidden;
        let dims = [(config.feature_channels(), h1), (h1, h2), (h2, 1)];
        for (i, &(fin, fout)) in dims.iter().enumerate() {
            let name = format!("domain.fc{}", i + 1);
            let wname = format!("{name}.weight");
            let bound = (1.0 / fin as f64).sqrt();
            blocks.push(Block {
                name: name.clone(),
                group: ParamGroup::DomainHead,
                params: vec![
                    mk(&wname, &[fout, fin], uniform(&[fout, fin], bound, &mut rng_for(&wname)))?,
                    mk(&format!("{name}.bias"), &[fout], vec![0.0; fout])?,
                ],
                trainable: true,
            });
        }

        Ok(Self {
            config,
            blocks,
            device,
            stage: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Ordered encoder block names.
    pub fn block_names(&self) -> &[String] {
        &self.config.block_names
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn weights(&self, name: &str) -> (Tensor, Tensor) {
        let b = self.block(name).expect("block exists");
        let get = |p: &Param| {
            if b.trainable {
                p.var.as_tensor().clone()
            } else {
                p.var.as_detached_tensor()
            }
        };
        (get(&b.params[0]), get(&b.params[1]))
    }

    pub fn num_parameters(&self) -> usize {
        self.params().map(|(_, p)| p.var.elem_count()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&Block, &Param)> {
        self.blocks.iter().flat_map(|b| b.params.iter().map(move |p| (b, p)))
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = &Param> {
        self.blocks.iter().filter(|b| b.trainable).flat_map(|b| b.params.iter())
    }

    /// Images `N×3×H×W` → encoder features `N×C×H/s×W/s`.
    pub fn forward_features(&self, images: &Tensor) -> Result<Tensor> {
        let (w, h) = self.config.input_size;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w {
            return Err(Error::shape("encoder input", format!("N×3×{h}×{w}"), format!("{dims:?}")));
        }
        let mut x = images.to_dtype(self.dtype())?;
        for (name, &stride) in self.config.block_names.iter().zip(&self.config.strides) {
            let (wt, b) = self.weights(name);
            x = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
            x = x.conv2d(&wt, 0, stride, 1, 1)?;
            x = x.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
        }
        Ok(x)
    }

    /// Features → heatmaps `N×K×H/4×W/4`.
    pub fn forward_pose(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = features.clone();
        for i in 0..self.config.num_deconvs() {
            let (wt, b) = self.weights(&format!("deconv{}", i + 1));
            x = x.conv_transpose2d(&wt, 1, 0, 2, 1)?;
            x = x.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
        }
        let (wt, b) = self.weights("final");
        x = x.conv2d(&wt, 0, 1, 1, 1)?;
        Ok(x.broadcast_add(&b.reshape((1, (), 1, 1))?)?)
    }

    /// Global average pooled features `N×C`.
    pub fn pool(features: &Tensor) -> Result<Tensor> {
        Ok(features.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Domain head on pooled features; the GRL sits at its input.
    pub fn domain_logits_from_pooled(&self, pooled: &Tensor, lambda_grl: f64) -> Result<Tensor> {
        let mut x = GradientReversal::new(lambda_grl)?.apply(pooled)?;
        for i in 1..=3 {
            let (wt, b) = self.weights(&format!("domain.fc{i}"));
            x = x.matmul(&wt.t()?)?.broadcast_add(&b)?;
            if i < 3 {
                x = x.relu()?;
            }
        }
        Ok(x.squeeze(1)?)
    }

    /// Features → one logit per sample (synthetic = positive class).
    pub fn forward_domain(&self, features: &Tensor, lambda_grl: f64) -> Result<Tensor> {
        self.domain_logits_from_pooled(&Self::pool(features)?, lambda_grl)
    }

    /// Set which blocks receive updates in `stage`.
    pub fn apply_freeze_mask(&mut self, stage: Stage, frozen_blocks: &[String]) -> Result<()> {
        for f in frozen_blocks {
            if !self.config.block_names.contains(f) {
                return Err(Error::Config(format!(
                    "unknown encoder block '{f}' (known: {})",
                    self.config.block_names.join(", ")
                )));
            }
        }
        for b in &mut self.blocks {
            b.trainable = match (stage, b.group) {
                (Stage::Init | Stage::Stage1, g) => g == ParamGroup::DomainHead,
                (Stage::Stage2, ParamGroup::DomainHead) => false,
                (Stage::Stage2, ParamGroup::PoseHead) => true,
                (Stage::Stage2, ParamGroup::Extractor) => !frozen_blocks.contains(&b.name),
            };
        }
        self.stage = Some(stage);
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for b in &mut self.blocks {
            b.trainable = true;
        }
        self.stage = None;
    }

    /// Names of blocks currently receiving updates.
    pub fn trainable_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.name.as_str()).collect()
    }

    /// SHA-256 over names and raw values of the selected blocks, in order.
    pub fn checksum<'a>(&'a self, select: impl Fn(&'a Block) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for b in self.blocks.iter().filter(|b| select(b)) {
            for p in &b.params {
                h.update(p.name.as_bytes());
                let t = p.var.as_tensor().flatten_all()?;
                match t.dtype() {
                    DType::F64 => t.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
                    _ => t
                        .to_dtype(DType::F32)?
                        .to_vec1::<f32>()?
                        .iter()
                        .for_each(|v| h.update(v.to_le_bytes())),
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn group_checksum(&self, group: ParamGroup) -> Result<String> {
        self.checksum(|b| b.group == group)
    }

    pub fn blocks_checksum(&self, names: &[String]) -> Result<String> {
        self.checksum(|b| names.contains(&b.name))
    }

    /// `theta_f`, `theta_y`, `theta_d` checksums.
    pub fn checksums(&self) -> Result<std::collections::BTreeMap<String, String>> {
        ParamGroup::ALL
            .iter()
            .map(|g| Ok((g.key().to_string(), self.group_checksum(*g)?)))
            .collect()
    }

    /// Parameters keyed `theta_f/res1.weight` etc.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.params()
            .map(|(b, p)| (format!("{}/{}", b.group.key(), p.name), p.var.as_detached_tensor()))
            .collect()
    }

    /// Overwrite parameters from a state map; every parameter must be present
    /// with a matching shape.
    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        let dtype = self.dtype();
        for b in &self.blocks {
            for p in &b.params {
                let key = format!("{}/{}", b.group.key(), p.name);
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint has no tensor '{key}'")))?;
                if t.dims() != p.var.dims() {
                    return Err(Error::shape(key, format!("{:?}", p.var.dims()), format!("{:?}", t.dims())));
                }
                p.var.set(&t.to_dtype(dtype)?)?;
            }
        }
        Ok(())
    }

    /// Load external weights through a name map (`external → internal`
    /// parameter name, e.g. `backbone.layer1.0.conv1.weight → res1.weight`).
    /// Parameters absent from the map keep their current values.
    pub fn load_mapped(&mut self, external: &HashMap<String, Tensor>, key_map: &HashMap<String, String>) -> Result<usize> {
        let mut loaded = 0;
        let dtype = self.dtype();
        for (ext, int) in key_map {
            let t = external
                .get(ext)
                .ok_or_else(|| Error::Data(format!("pretrained file has no tensor '{ext}'")))?;
            let p = self
                .params()
                .map(|(_, p)| p)
                .find(|p| &p.name == int)
                .ok_or_else(|| Error::Config(format!("key map targets unknown parameter '{int}'")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::shape(int.clone(), format!("{:?}", p.var.dims()), format!("{:?}", t.dims())));
            }
            p.var.set(&t.to_dtype(dtype)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Deep copy with independent parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for p in &mut b.params {
                p.var = Var::from_tensor(&p.var.as_tensor().copy()?)?;
            }
        }
        Ok(out)
    }
}
