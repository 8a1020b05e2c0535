//! Classifier warm-up and the alternating two-stage loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{StageGranularity, TrainConfig, TrainMode};
use super::loss::{domain_loss, domain_scales, pose_loss, total_loss, DomainCounts, LossBreakdown};
use crate::data::{Batch, BatchSource, BatchTensors, HybridBatchSampler};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, PoseModelBundle, Stage};
use crate::seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const REPORT_FILE: &str = "report.jsonl";

/// A batch together with the seed of its augmentation stream.
pub type SeededBatch = (u64, Batch);

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn tensors(bundle: &PoseModelBundle, data: &dyn BatchSource, b: &SeededBatch) -> Result<BatchTensors> {
    let prepared = data.build(&b.1, b.0)?;
    prepared.to_tensors(
        bundle.config.input_size,
        bundle.config.heatmap_size(),
        bundle.dtype(),
        &bundle.device,
    )
}

/// `count` consecutive batches of the endless stream starting at global
/// batch `start`.
pub fn stream_batches(sampler: &HybridBatchSampler, stream_seed: u64, start: usize, count: usize) -> Vec<SeededBatch> {
    let bpe = sampler.batches_per_epoch();
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(usize, Vec<Batch>)> = None;
    for g in start..start + count {
        let (e, j) = (g / bpe, g % bpe);
        if cached.as_ref().map(|c| c.0) != Some(e) {
            cached = Some((e, sampler.epoch(e as u64)));
        }
        let batch = cached.as_ref().expect("epoch cached").1[j].clone();
        out.push((seed::mix(&[stream_seed, g as u64]), batch));
    }
    out
}

#[derive(Default)]
struct Accum {
    l_p: f64,
    l_d: f64,
    l_total: f64,
    n: usize,
    counts: DomainCounts,
}

impl Accum {
    fn finish(self, with_p: bool, with_d: bool) -> LossBreakdown {
        let m = |v: f64| if self.n == 0 { 0.0 } else { v / self.n as f64 };
        LossBreakdown {
            l_p: with_p.then(|| m(self.l_p)),
            l_d: with_d.then(|| m(self.l_d)),
            l_total: with_p.then(|| m(self.l_total)),
            per_domain_counts: self.counts,
        }
    }
}

/// Optimizer steps on `L_D` over the given batches; the mask must already
/// leave only θ_d trainable.
fn domain_steps(
    bundle: &PoseModelBundle,
    data: &dyn BatchSource,
    batches: &[SeededBatch],
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<LossBreakdown> {
    let mut acc = Accum::default();
    for b in batches {
        let bt = tensors(bundle, data, b)?;
        let feats = bundle.forward_features(&bt.images)?;
        let logits = bundle.forward_domain(&feats, cfg.lambda_grl)?;
        let l_d = domain_loss(&logits, &bt.domain_targets)?;
        let grads = l_d.backward()?;
        adam.step(bundle.trainable_params(), &grads)?;
        acc.l_d += scalar(&l_d)?;
        acc.n += 1;
        acc.counts.add(DomainCounts::of(&b.1.domains));
    }
    Ok(acc.finish(false, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub steps: usize,
    #[serde(rename = "L_D")]
    pub l_d: f64,
}

/// Train θ_d alone for `cfg.init_session` on `data`.
pub fn init_domain_classifier(
    bundle: &mut PoseModelBundle,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<InitSummary> {
    cfg.check()?;
    if data.is_empty() {
        return Err(Error::Config("initialization session needs a non-empty dataset".into()));
    }
    bundle.apply_freeze_mask(Stage::Init, &cfg.frozen_blocks)?;
    let s = cfg.init_session;
    let init_seed = seed::mix(&[cfg.seed, seed::tag("init")]);
    let sampler = HybridBatchSampler::new(data.domains(), s.batch, init_seed)?;
    let batches = stream_batches(&sampler, init_seed, 0, s.epochs * sampler.batches_per_epoch());
    let mut adam = Adam::new(cfg.lr, cfg.adam);
    let loss = domain_steps(bundle, data, &batches, cfg, &mut adam)?;
    Ok(InitSummary {
        steps: batches.len(),
        l_d: loss.l_d.unwrap_or(0.0),
    })
}

/// Stage I: θ_f and θ_y locked, θ_d minimises `L_D`.
pub fn train_stage1(
    bundle: &mut PoseModelBundle,
    data: &dyn BatchSource,
    batches: &[SeededBatch],
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<LossBreakdown> {
    bundle.apply_freeze_mask(Stage::Stage1, &cfg.frozen_blocks)?;
    domain_steps(bundle, data, batches, cfg, adam)
}

/// Stage II: θ_d locked; θ_y and unfrozen θ_f blocks minimise
/// `L_P − λ L_D`, the domain term reaching θ_f through the GRL. In finetune
/// mode the domain path is not evaluated at all.
pub fn train_stage2(
    bundle: &mut PoseModelBundle,
    data: &dyn BatchSource,
    batches: &[SeededBatch],
    cfg: &TrainConfig,
    adam: &mut Adam,
    real_weight: f64,
) -> Result<LossBreakdown> {
    bundle.apply_freeze_mask(Stage::Stage2, &cfg.frozen_blocks)?;
    let adversarial = cfg.mode == TrainMode::Fidip;
    let mut acc = Accum::default();
    for b in batches {
        let bt = tensors(bundle, data, b)?;
        let scales = Tensor::new(domain_scales(&b.1.domains, real_weight), &bundle.device)?;
        let feats = bundle.forward_features(&bt.images)?;
        let heat = bundle.forward_pose(&feats)?;
        let l_p = pose_loss(&heat, &bt.heatmaps, &bt.weights, &scales)?;
        let lp = scalar(&l_p)?;
        let grads = if adversarial {
            let logits = bundle.forward_domain(&feats, cfg.lambda_grl)?;
            let l_d = domain_loss(&logits, &bt.domain_targets)?;
            let ld = scalar(&l_d)?;
            acc.l_d += ld;
            acc.l_total += total_loss(lp, ld, cfg.lambda_grl);
            // θ_d is locked, so the only effect of L_D is the reversed,
            // λ-scaled gradient the GRL hands to θ_f.
            (&l_p + &l_d)?.backward()?
        } else {
            acc.l_total += lp;
            l_p.backward()?
        };
        adam.step(bundle.trainable_params(), &grads)?;
        acc.l_p += lp;
        acc.n += 1;
        acc.counts.add(DomainCounts::of(&b.1.domains));
    }
    Ok(acc.finish(true, adversarial))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub cycle: usize,
    pub stage: Stage,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
    pub steps: usize,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub init: Option<InitSummary>,
    pub records: Vec<StageRecord>,
    pub cycles_completed: usize,
    pub total_cycles: usize,
    pub real_weight: f64,
}

impl TrainReport {
    pub fn completed(&self) -> bool {
        self.cycles_completed == self.total_cycles
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Default)]
pub struct RunOptions<'a> {
    /// Checkpoint and report directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir`'s checkpoint when present.
    pub resume: bool,
    /// Stop once this many cycles are complete (simulated interruption).
    pub max_cycles: Option<usize>,
    pub config_hash: String,
    pub config_json: serde_json::Value,
    pub schema_name: String,
    /// Data for the classifier warm-up; the training set when `None`.
    pub init_data: Option<&'a dyn BatchSource>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    config: serde_json::Value,
    cycles_completed: usize,
    init: Option<InitSummary>,
    adam_steps: BTreeMap<String, u64>,
    records: Vec<StageRecord>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cycle layout: `(batches per cycle, number of cycles, batches in total)`.
pub fn schedule(cfg: &TrainConfig, dataset_len: usize) -> (usize, usize, usize) {
    let bpe = dataset_len.div_ceil(cfg.formal_session.batch).max(1);
    let total = cfg.formal_session.epochs * bpe;
    let chunk = match cfg.stage_granularity {
        StageGranularity::PerEpoch => bpe,
        StageGranularity::PerNBatches(n) => n,
    };
    (chunk, total.div_ceil(chunk), total)
}

/// Warm up θ_d once, then alternate Stage I and Stage II. In finetune mode
/// only the Stage II updates (without domain path) run, over the identical
/// batch stream.
pub fn run_fidip(
    bundle: &mut PoseModelBundle,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainReport> {
    cfg.check()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let domains = data.domains();
    let counts = DomainCounts::of(&domains);
    let real_weight = cfg.resolve_real_weight(counts.real, counts.synthetic);
    let fidip = cfg.mode == TrainMode::Fidip;
    let (chunk, total_cycles, total_batches) = schedule(cfg, domains.len());
    let s1_seed = seed::mix(&[cfg.seed, seed::tag("stage1")]);
    let s2_seed = seed::mix(&[cfg.seed, seed::tag("stage2")]);
    let s1 = HybridBatchSampler::new(domains.clone(), cfg.formal_session.batch, s1_seed)?;
    let s2 = HybridBatchSampler::new(domains, cfg.formal_session.batch, s2_seed)?;

    let mut adam = Adam::new(cfg.lr, cfg.adam);
    let mut report = TrainReport {
        init: None,
        records: Vec::new(),
        cycles_completed: 0,
        total_cycles,
        real_weight,
    };
    let mut init_done = !fidip;

    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    if let (true, Some(p)) = (opts.resume, &ckpt_path) {
        if p.exists() {
            let ck = load_checkpoint(p)?;
            ck.check_config(&opts.config_hash, &opts.config_json)?;
            let st: SavedState = serde_json::from_value(ck.meta.extra.clone())?;
            bundle.load_state(&ck.tensors)?;
            adam.load_state(&ck.with_prefix("adam"), &st.adam_steps)?;
            report.init = st.init;
            report.records = st.records;
            report.cycles_completed = st.cycles_completed;
            init_done = true;
            log::info!("resumed from {} at cycle {}", p.display(), st.cycles_completed);
        }
    }

    let save = |bundle: &PoseModelBundle, adam: &Adam, report: &TrainReport, stage: Option<Stage>| -> Result<()> {
        let Some(dir) = &opts.out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state = SavedState {
            config: opts.config_json.clone(),
            cycles_completed: report.cycles_completed,
            init: report.init.clone(),
            adam_steps: adam.steps(),
            records: report.records.clone(),
        };
        let meta = CheckpointMeta {
            stage,
            epoch: (report.cycles_completed * chunk).min(total_batches) * cfg.formal_session.epochs / total_batches.max(1),
            config_hash: opts.config_hash.clone(),
            schema_name: opts.schema_name.clone(),
            extra: serde_json::to_value(&state)?,
        };
        save_checkpoint(&dir.join(CHECKPOINT_FILE), bundle, &adam.state_tensors(), &meta)?;
        write_atomic(&dir.join(REPORT_FILE), report.to_jsonl()?.as_bytes())
    };

    if !init_done {
        let init = init_domain_classifier(bundle, opts.init_data.unwrap_or(data), cfg)?;
        log::info!("classifier warm-up: {} steps, L_D {:.5}", init.steps, init.l_d);
        report.init = Some(init);
        save(bundle, &adam, &report, Some(Stage::Init))?;
    }

    let stop = opts.max_cycles.unwrap_or(usize::MAX).min(total_cycles);
    while report.cycles_completed < stop {
        let c = report.cycles_completed;
        let start = c * chunk;
        let count = chunk.min(total_batches - start);
        if fidip {
            let batches = stream_batches(&s1, s1_seed, start, count);
            let losses = train_stage1(bundle, data, &batches, cfg, &mut adam)?;
            report.records.push(StageRecord {
                cycle: c,
                stage: Stage::Stage1,
                losses,
                lr: cfg.lr,
                steps: count,
                checksums: bundle.checksums()?,
            });
        }
        let batches = stream_batches(&s2, s2_seed, start, count);
        let losses = train_stage2(bundle, data, &batches, cfg, &mut adam, real_weight)?;
        log::info!(
            "cycle {}/{}: L_P {:.6} L_D {}",
            c + 1,
            total_cycles,
            losses.l_p.unwrap_or(f64::NAN),
            losses.l_d.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        report.records.push(StageRecord {
            cycle: c,
            stage: Stage::Stage2,
            losses,
            lr: cfg.lr,
            steps: count,
            checksums: bundle.checksums()?,
        });
        report.cycles_completed += 1;
        save(bundle, &adam, &report, Some(Stage::Stage2))?;
    }
    Ok(report)
}
