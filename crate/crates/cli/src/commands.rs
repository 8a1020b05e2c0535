//! The six subcommands. Each takes a resolved config and an output
//! directory, writes its results there and returns them.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dapose::data::{BatchBuilder, BatchSource, DatasetIndex, DatasetManifest, ImageStore};
use dapose::eval::{
    detections_from_json, detections_to_json, domain_confusion_score, extract_features, map_over_thresholds,
    predict_detections, EvalReport, ProbeResult,
};
use dapose::model::{load_checkpoint, PoseModelBundle};
use dapose::schema::{map_joints, JointMap, KeypointAnnotation, KeypointSchema};
use dapose::synthgen::fit::{reprojection_error, MIN_LABELED_JOINTS};
use dapose::synthgen::{
    builtin_library, fit_pose_to_2d, generate_dataset, pose_distribution_stats, BodyModel, BodyPoseParams, CameraParams,
    GenerateReport, PoseDistributionStats, PosePrior,
};
use dapose::train::{run_fidip, RunOptions, TrainMode, TrainReport, CHECKPOINT_FILE};
use dapose::Error;
use nalgebra::Vector3;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const RUN_MANIFEST: &str = "run.json";
pub const RESOLVED_CONFIG: &str = "config.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const DOMAIN_CONFUSION: &str = "domain_confusion.json";
pub const ABLATION_TABLE: &str = "ablation.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    dapose::train::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// `config.json` holds the resolved config; rerunning the command with
/// `--config <out>/config.json` reproduces the run.
pub fn write_run_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg.to_value())?;
    let manifest = serde_json::json!({
        "command": command,
        "tool": concat!("dapose ", env!("CARGO_PKG_VERSION")),
        "config_hash": cfg.hash(),
        "config": RESOLVED_CONFIG,
    });
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

fn load_schema(cfg: &ExperimentConfig) -> Result<KeypointSchema> {
    Ok(match &cfg.data.schema {
        Some(p) => KeypointSchema::load(p)?,
        None => KeypointSchema::coco17(),
    })
}

fn load_index(manifests: &[PathBuf]) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    for m in manifests {
        let (i, report) = DatasetManifest::load(m)?.load_all()?;
        if !report.missing_images.is_empty() || report.skipped_records > 0 {
            log::warn!(
                "{}: {} missing images, {} skipped records",
                m.display(),
                report.missing_images.len(),
                report.skipped_records
            );
        }
        index.extend(i);
    }
    Ok(index)
}

/// A loaded dataset with its decoded images.
struct Loaded {
    index: DatasetIndex,
    store: ImageStore,
}

impl Loaded {
    fn new(manifests: &[PathBuf]) -> Result<Self> {
        let index = load_index(manifests)?;
        if index.is_empty() {
            return Err(Error::Data(format!("no records in {manifests:?}")).into());
        }
        let store = ImageStore::load(&index)?;
        Ok(Self { index, store })
    }

    fn builder<'a>(&'a self, cfg: &ExperimentConfig, schema: &'a KeypointSchema, augment: bool) -> BatchBuilder<'a> {
        BatchBuilder {
            index: &self.index,
            store: &self.store,
            schema,
            sample: cfg.data.sample.clone(),
            augment: if augment { cfg.data.augment.clone() } else { None },
        }
    }
}

fn check_joints(cfg: &ExperimentConfig, schema: &KeypointSchema) -> Result<()> {
    if cfg.model.num_joints != schema.num_joints() {
        return Err(Error::Config(format!(
            "model.num_joints {} differs from schema '{}' with {} joints",
            cfg.model.num_joints,
            schema.name,
            schema.num_joints()
        ))
        .into());
    }
    Ok(())
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateReport> {
    write_run_manifest(out, "generate", cfg)?;
    let report = generate_dataset(&cfg.synthgen, out)?;
    write_json(&out.join("stats.json"), &report.stats)?;
    log::info!("wrote {} samples to {}", report.count, out.display());
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    /// Continue from `<out>/checkpoint.safetensors` when present.
    pub resume: bool,
    /// Stop after this many completed cycles.
    pub max_cycles: Option<usize>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, flags: &TrainFlags) -> Result<TrainReport> {
    if cfg.data.train.is_empty() {
        return Err(Error::Config("data.train lists no dataset manifests".into()).into());
    }
    let schema = load_schema(cfg)?;
    check_joints(cfg, &schema)?;
    write_run_manifest(out, "train", cfg)?;
    let train = Loaded::new(&cfg.data.train)?;
    let builder = train.builder(cfg, &schema, true);
    let init = if cfg.data.init.is_empty() { None } else { Some(Loaded::new(&cfg.data.init)?) };
    let init_builder = init.as_ref().map(|l| l.builder(cfg, &schema, true));

    let mut bundle = PoseModelBundle::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(p) = &cfg.data.init_checkpoint {
        let ck = load_checkpoint(p)?;
        bundle.load_state(&ck.tensors).with_context(|| format!("loading {}", p.display()))?;
        log::info!("initialised parameters from {}", p.display());
    }
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume: flags.resume,
        max_cycles: flags.max_cycles,
        config_hash: cfg.hash(),
        config_json: cfg.to_value(),
        schema_name: schema.name.clone(),
        init_data: init_builder.as_ref().map(|b| b as &dyn BatchSource),
    };
    let report = run_fidip(&mut bundle, &builder, &cfg.train, &opts)?;
    let last = report.records.last().map(|r| &r.losses);
    write_json(
        &out.join("train_summary.json"),
        &serde_json::json!({
            "config_hash": opts.config_hash,
            "mode": cfg.train.mode,
            "init": report.init,
            "cycles_completed": report.cycles_completed,
            "total_cycles": report.total_cycles,
            "completed": report.completed(),
            "real_weight": report.real_weight,
            "final": last,
            "checksums": bundle.checksums()?,
        }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub domain_confusion: Option<ProbeResult>,
}

fn load_bundle(cfg: &ExperimentConfig, path: &Path) -> Result<PoseModelBundle> {
    let ck = load_checkpoint(path)?;
    let mut bundle = PoseModelBundle::new(cfg.model.clone(), 0)?;
    bundle.load_state(&ck.tensors).with_context(|| format!("loading {}", path.display()))?;
    Ok(bundle)
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalOutput> {
    let test_manifest = cfg
        .data
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("data.test names no evaluation manifest".into()))?;
    let schema = load_schema(cfg)?;
    check_joints(cfg, &schema)?;
    write_run_manifest(out, "eval", cfg)?;
    let needs_model = cfg.eval.detections.is_none() || cfg.eval.domain_confusion || cfg.eval.export_features;
    let bundle = match (&cfg.eval.checkpoint, needs_model) {
        (Some(p), true) => Some(load_bundle(cfg, p)?),
        (None, true) => return Err(Error::Config("eval.checkpoint is required to run the model".into()).into()),
        (_, false) => None,
    };

    let (test, gts): (Option<Loaded>, Vec<KeypointAnnotation>) = if bundle.is_some() {
        let l = Loaded::new(std::slice::from_ref(test_manifest))?;
        let gts = l.index.annotations();
        (Some(l), gts)
    } else {
        (None, load_index(std::slice::from_ref(test_manifest))?.annotations())
    };

    let dets = match (&cfg.eval.detections, &bundle, &test) {
        (Some(p), _, _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            detections_from_json(&text)?
        }
        (None, Some(b), Some(t)) => predict_detections(b, &t.builder(cfg, &schema, false), cfg.eval.batch)?,
        _ => unreachable!("model loaded whenever no detections file is given"),
    };
    dapose::train::write_atomic(&out.join("detections.json"), detections_to_json(&dets)?.as_bytes())?;
    let report = map_over_thresholds(&dets, &gts, &schema.oks_sigmas)?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    log::info!("mAP {:.4} over {} ground truths", report.map, report.counts.ground_truths);

    let mut domain_confusion = None;
    if let (Some(b), Some(t)) = (&bundle, &test) {
        if cfg.eval.domain_confusion || cfg.eval.export_features {
            let mut features = extract_features(b, &t.builder(cfg, &schema, false), cfg.eval.batch)?;
            if let Some(extra) = &cfg.eval.probe_data {
                let l = Loaded::new(std::slice::from_ref(extra))?;
                features = features.concat(extract_features(b, &l.builder(cfg, &schema, false), cfg.eval.batch)?);
            }
            if cfg.eval.export_features {
                features.write_csv(&out.join("features.csv"))?;
            }
            if cfg.eval.domain_confusion {
                let r = domain_confusion_score(&features, &cfg.eval.probe)?;
                log::info!("domain probe accuracy {:.4} (chance {:.4})", r.accuracy, r.chance);
                write_json(&out.join(DOMAIN_CONFUSION), &r)?;
                domain_confusion = Some(r);
            }
        }
    }
    Ok(EvalOutput {
        report,
        domain_confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub domain_adaptation: bool,
    pub update_blocks: usize,
    pub real_weight: Option<f64>,
    pub config_hash: String,
    pub run_dir: PathBuf,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub domain_confusion: Option<f64>,
    #[serde(rename = "final_L_P")]
    pub final_l_p: Option<f64>,
}

/// Config of one grid point; it trains into and evaluates from `run_dir`.
pub fn ablation_point(
    cfg: &ExperimentConfig,
    domain_adaptation: bool,
    update_blocks: usize,
    real_weight: Option<f64>,
    run_dir: &Path,
) -> Result<ExperimentConfig> {
    let names = &cfg.model.block_names;
    if update_blocks == 0 || update_blocks > names.len() {
        return Err(Error::Config(format!(
            "ablate.update_blocks {update_blocks} must be between 1 and {}",
            names.len()
        ))
        .into());
    }
    let mut c = cfg.clone();
    c.train.mode = if domain_adaptation { TrainMode::Fidip } else { TrainMode::Finetune };
    c.train.frozen_blocks = names[..names.len() - update_blocks].to_vec();
    c.train.real_weight = real_weight;
    c.eval.checkpoint = Some(run_dir.join(CHECKPOINT_FILE));
    c.eval.detections = None;
    c.check()?;
    Ok(c)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    write_run_manifest(out, "ablate", cfg)?;
    let a = &cfg.ablate;
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for &da in &a.domain_adaptation {
        for &ub in &a.update_blocks {
            for &wr in &a.real_weight {
                // the directory is keyed by the point itself so that the
                // hash (which includes it) stays well defined
                let key = format!("da{}_ub{ub}_wr{}", da as u8, wr.map_or("auto".into(), |w| w.to_string()));
                let dir = out.join("runs").join(&key);
                let c = ablation_point(cfg, da, ub, wr, &dir)?;
                if !seen.insert(key.clone()) {
                    log::warn!("duplicate grid point {key} skipped");
                    continue;
                }
                points.push((da, ub, wr, dir, c));
            }
        }
    }
    let mut rows = Vec::with_capacity(points.len());
    for (da, ub, wr, dir, c) in points {
        log::info!("ablation point: domain_adaptation={da} update_blocks={ub} real_weight={wr:?}");
        let report = cmd_train(&c, &dir, &TrainFlags::default())?;
        let ev = cmd_eval(&c, &dir.join("eval"))?;
        rows.push(AblationRow {
            domain_adaptation: da,
            update_blocks: ub,
            real_weight: wr,
            config_hash: c.hash(),
            run_dir: dir,
            map: ev.report.map,
            domain_confusion: ev.domain_confusion.map(|p| p.accuracy),
            final_l_p: report.records.last().and_then(|r| r.losses.l_p),
        });
    }
    write_json(&out.join(ABLATION_TABLE), &rows)?;
    let mut csv = String::from("domain_adaptation,update_blocks,real_weight,config_hash,mAP,domain_confusion,final_L_P\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.domain_adaptation,
            r.update_blocks,
            opt(r.real_weight),
            r.config_hash,
            r.map,
            opt(r.domain_confusion),
            opt(r.final_l_p)
        ));
    }
    dapose::train::write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitRecord {
    pub image_id: u64,
    pub loss: f64,
    pub reprojection_px: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub fitted: Vec<FitRecord>,
    /// Annotations with fewer labeled joints than fitting needs.
    pub skipped: usize,
    pub library: PathBuf,
}

/// Fit body pose and shape to every annotation of `data.train`, writing the
/// results as a pose library usable by `generate` (`synthgen.library`).
pub fn cmd_fit(cfg: &ExperimentConfig, out: &Path) -> Result<FitSummary> {
    if cfg.data.train.is_empty() {
        return Err(Error::Config("data.train lists no annotation manifests to fit".into()).into());
    }
    write_run_manifest(out, "fit", cfg)?;
    let anns = load_index(&cfg.data.train)?.annotations();
    let model = BodyModel::body24();
    let to_body = JointMap::body24_to_coco17().inverse();
    let prior = PosePrior::from_library(&builtin_library(), model.bend_components.clone(), &cfg.fit.gmm)?.prepare()?;
    let rest = model.forward_kinematics(&BodyPoseParams::zeros())?;
    let centre = rest.iter().sum::<Vector3<f64>>() / rest.len() as f64;
    let height = rest.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) - rest.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);

    let mut fitted = Vec::new();
    let mut library = Vec::new();
    let mut skipped = 0;
    for ann in &anns {
        if ann.num_labeled() < MIN_LABELED_JOINTS {
            skipped += 1;
            continue;
        }
        let body = map_joints(&ann.keypoints, &to_body)?;
        let target: Vec<Option<[f64; 2]>> = body.iter().map(|k| k.labeled().then_some([k.x, k.y])).collect();
        let [bx, by, bw, bh] = ann.bbox;
        let principal = [bx + bw / 2.0, by + bh / 2.0];
        let distance = cfg.fit.focal * height / bh.max(1.0);
        let cam = CameraParams::look_at(
            centre + Vector3::new(0.0, 0.0, distance),
            centre,
            Vector3::y(),
            cfg.fit.focal,
            principal,
        );
        // facing the camera or facing away
        let mut best: Option<dapose::synthgen::FitResult> = None;
        for yaw in [0.0, std::f64::consts::PI] {
            let mut init = BodyPoseParams::zeros();
            init.theta[1] = yaw;
            match fit_pose_to_2d(&model, &target, (&init, &cam), &cfg.fit.weights, &prior, &cfg.fit.optimizer) {
                Ok(r) if best.as_ref().is_none_or(|b| r.loss < b.loss) => best = Some(r),
                Ok(_) => {}
                Err(Error::Diverged { .. } | Error::Projection { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let Some(r) = best else {
            log::warn!("image {}: fitting failed from every initialisation", ann.image_id);
            skipped += 1;
            continue;
        };
        fitted.push(FitRecord {
            image_id: ann.image_id,
            loss: r.loss,
            reprojection_px: reprojection_error(&model, &r.params, &r.camera, &target)?,
            iterations: r.iterations,
            converged: r.converged,
        });
        library.push(r.params);
    }
    let lib_path = out.join("pose_library.json");
    write_json(&lib_path, &library)?;
    let summary = FitSummary {
        fitted,
        skipped,
        library: lib_path,
    };
    write_json(&out.join("fit_report.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_stats(cfg: &ExperimentConfig, out: &Path) -> Result<PoseDistributionStats> {
    let manifests: Vec<PathBuf> = cfg.data.train.iter().chain(cfg.data.test.iter()).cloned().collect();
    if manifests.is_empty() {
        return Err(Error::Config("data.train and data.test name no manifests".into()).into());
    }
    write_run_manifest(out, "stats", cfg)?;
    let schema = load_schema(cfg)?;
    let mut per_domain: HashMap<String, Vec<KeypointAnnotation>> = HashMap::new();
    let anns = load_index(&manifests)?.annotations();
    for a in &anns {
        per_domain.entry(format!("{:?}", a.domain).to_lowercase()).or_default().push(a.clone());
    }
    let all = pose_distribution_stats(&anns, &schema)?;
    let mut by_domain = serde_json::Map::new();
    let mut keys: Vec<_> = per_domain.keys().cloned().collect();
    keys.sort();
    for k in keys {
        by_domain.insert(k.clone(), serde_json::to_value(pose_distribution_stats(&per_domain[&k], &schema)?)?);
    }
    write_json(&out.join("stats.json"), &serde_json::json!({ "all": all, "by_domain": by_domain }))?;
    Ok(all)
}
