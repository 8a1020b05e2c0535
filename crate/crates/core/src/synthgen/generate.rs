//! End-to-end synthetic dataset generation: sample poses and views, render,
//! and write a COCO file plus a dataset manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::body::{BodyModel, BodyPoseParams};
use super::camera::{CameraParams, ViewSampler};
use super::prior::{GmmConfig, PosePrior};
use super::render::{render_stick_figure, Scene, SceneConfig};
use super::sample::{builtin_library, load_library, sample_pose, FilterConfig, PoseFilter};
use super::stats::{pose_distribution_stats, PoseDistributionStats};
use crate::data::coco::{CocoAnnotation, CocoFile, CocoImage, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schema::{validate_annotation, DomainLabel, JointMap, KeypointAnnotation, KeypointSchema};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    /// `(width, height)`
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Std (radians) of the jitter added to library poses.
    pub noise_std: f64,
    /// Pose library JSON; the bundled library when absent.
    pub library: Option<PathBuf>,
    pub views: ViewSampler,
    pub filter: FilterConfig,
    /// Prior fit used by `filter.prior_cutoff`.
    pub gmm: GmmConfig,
    pub scene: SceneConfig,
    /// Uniform per-image offset applied to the flat background colour.
    pub background_jitter: f32,
    /// Fewest target keypoints that must land inside the frame.
    pub min_visible: usize,
    pub max_view_attempts: usize,
    /// Domain written into the manifest.
    pub domain: DomainLabel,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 100,
            image_size: (128, 128),
            seed: 0,
            noise_std: 0.15,
            library: None,
            views: ViewSampler {
                focal: 150.0,
                ..ViewSampler::default()
            },
            filter: FilterConfig::default(),
            gmm: GmmConfig::default(),
            scene: SceneConfig::default(),
            background_jitter: 0.0,
            min_visible: 8,
            max_view_attempts: 50,
            domain: DomainLabel::Synthetic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub image: Image,
    pub annotation: KeypointAnnotation,
    pub pose: BodyPoseParams,
    pub camera: CameraParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateReport {
    pub count: usize,
    pub annotation_file: PathBuf,
    pub manifest: PathBuf,
    pub stats: PoseDistributionStats,
}

impl GenerateConfig {
    pub fn check(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::Config(format!("image size {:?} is too small", self.image_size)));
        }
        if self.max_view_attempts == 0 {
            return Err(Error::Config("max_view_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Render `cfg.count` samples in memory. Sample `i` depends only on
/// `(cfg.seed, i)`.
pub fn generate_samples(cfg: &GenerateConfig) -> Result<Vec<GeneratedSample>> {
    cfg.check()?;
    let model = BodyModel::body24();
    let map = JointMap::body24_to_coco17();
    let library = match &cfg.library {
        Some(p) => load_library(p)?,
        None => builtin_library(),
    };
    let prior = match cfg.filter.prior_cutoff {
        Some(_) => Some(PosePrior::from_library(&library, model.bend_components.clone(), &cfg.gmm)?.prepare()?),
        None => None,
    };
    let filter = PoseFilter {
        model: &model,
        prior: prior.as_ref(),
        cfg: cfg.filter.clone(),
    };
    let base_scene = Scene::new(&cfg.scene, cfg.image_size)?;
    let (w, h) = cfg.image_size;
    let principal = [w as f64 / 2.0, h as f64 / 2.0];

    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(&[cfg.seed, seed::tag("synth-sample"), i as u64]);
            let pose = sample_pose(&library, cfg.noise_std, &filter, &mut rng)?;
            let joints = model.forward_kinematics(&pose)?;
            let centre = joints.iter().sum::<nalgebra::Vector3<f64>>() / joints.len() as f64;
            let mut scene = base_scene.clone();
            scene.noise_seed = seed::mix(&[cfg.seed, i as u64]);
            if cfg.background_jitter > 0.0 && cfg.scene.background.is_none() {
                let j = cfg.background_jitter;
                let off = rng.random_range(-j..=j);
                let c = cfg.scene.background_color.map(|v| (v + off).clamp(0.0, 1.0));
                scene.background = Image::filled(w, h, c);
            }
            for _ in 0..cfg.max_view_attempts {
                let cam = cfg.views.sample(centre, principal, &mut rng);
                match render_stick_figure(&model, &map, &pose, &cam, &scene) {
                    Ok((image, mut annotation)) if annotation.num_labeled() >= cfg.min_visible => {
                        annotation.image_id = i as u64 + 1;
                        annotation.domain = cfg.domain;
                        return Ok(GeneratedSample {
                            image,
                            annotation,
                            pose,
                            camera: cam,
                        });
                    }
                    Ok(_) | Err(Error::Projection { .. }) | Err(Error::Sampling(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Sampling(format!(
                "sample {i}: no camera out of {} showed at least {} keypoints",
                cfg.max_view_attempts, cfg.min_visible
            )))
        })
        .collect()
}

/// Writes `images/NNNNNN.png`, `annotations.json`, `poses.json` and
/// `manifest.json` under `out_dir`.
pub fn write_dataset(out_dir: &Path, samples: &[GeneratedSample], domain: DomainLabel) -> Result<GenerateReport> {
    let schema = KeypointSchema::coco17();
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut coco = CocoFile {
        categories: vec![CocoFile::person_category(&schema.joint_names)],
        ..CocoFile::default()
    };
    for (i, s) in samples.iter().enumerate() {
        let violations = validate_annotation(&s.annotation, &schema, (s.image.width as u32, s.image.height as u32));
        if let Some(v) = violations.first() {
            return Err(Error::Data(format!("generated annotation {i} is invalid: {v}")));
        }
        let name = format!("{:06}.png", s.annotation.image_id);
        coco.images.push(CocoImage {
            id: s.annotation.image_id,
            file_name: name.clone(),
            width: s.image.width as u32,
            height: s.image.height as u32,
        });
        coco.annotations.push(CocoAnnotation::from_annotation(i as u64 + 1, &s.annotation));
    }
    samples
        .par_iter()
        .try_for_each(|s| s.image.save_png(&image_dir.join(format!("{:06}.png", s.annotation.image_id))))?;

    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let annotation_file = write("annotations.json", serde_json::to_string(&coco)?)?;
    let poses: Vec<&BodyPoseParams> = samples.iter().map(|s| &s.pose).collect();
    write("poses.json", serde_json::to_string(&poses)?)?;
    let manifest = DatasetManifest {
        entries: vec![ManifestEntry {
            annotation_file: "annotations.json".into(),
            image_root: "images".into(),
            domain,
        }],
    };
    let manifest = write("manifest.json", serde_json::to_string_pretty(&manifest)?)?;
    let anns: Vec<KeypointAnnotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    Ok(GenerateReport {
        count: samples.len(),
        annotation_file,
        manifest,
        stats: pose_distribution_stats(&anns, &schema)?,
    })
}

pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<GenerateReport> {
    let samples = generate_samples(cfg)?;
    write_dataset(out_dir, &samples, cfg.domain)
}
