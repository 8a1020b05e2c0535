//! Top-down sample preparation: person crop, geometric augmentation and
//! heatmap targets.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coco::DatasetIndex;
use super::heatmap::{make_heatmap_targets, HeatmapTensor};
use super::sampler::Batch;
use crate::error::{Error, Result};
use crate::imaging::{Affine, Image};
use crate::schema::{DomainLabel, Keypoint, KeypointAnnotation, KeypointSchema};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Network input `(width, height)`.
    pub input_size: (usize, usize),
    pub output_stride: usize,
    pub sigma_px: f64,
    /// Crop box enlargement around the annotated box.
    pub box_padding: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            input_size: (192, 256),
            output_stride: 4,
            sigma_px: 2.0,
            box_padding: 1.25,
        }
    }
}

impl SampleConfig {
    /// Heatmap `(height, width)`.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.1 / self.output_stride, self.input_size.0 / self.output_stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Inclusive range of zoom factors.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            scale_range: (0.75, 1.25),
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_rotation_deg >= 0.0 && lo > 0.0 && lo <= hi && (0.0..=1.0).contains(&self.flip_prob)) {
            return Err(Error::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip: false,
    };

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let rotation_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        Self {
            rotation_deg,
            scale,
            flip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub image_id: u64,
    pub center: (f64, f64),
    /// Crop box `(w, h)` in source pixels.
    pub scale: (f64, f64),
    pub rotation_deg: f64,
    pub flipped: bool,
    /// Source image pixels to input pixels.
    pub transform: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Image,
    /// Keypoints in input pixels.
    pub keypoints: Vec<Keypoint>,
    pub target_heatmaps: HeatmapTensor,
    pub target_weights: Vec<f32>,
    pub domain: DomainLabel,
    pub meta: SampleMeta,
    pub output_stride: usize,
}

impl TrainingSample {
    fn rebuild_targets(&mut self) -> Result<()> {
        let (h, w) = (self.image.height / self.output_stride, self.image.width / self.output_stride);
        let s = self.output_stride as f64;
        let scaled: Vec<Keypoint> = self
            .keypoints
            .iter()
            .map(|k| Keypoint::new(k.x / s, k.y / s, k.v))
            .collect();
        let (hm, weights) = make_heatmap_targets(&scaled, (h, w), self.target_heatmaps.sigma_px)?;
        self.target_heatmaps = hm;
        self.target_weights = weights;
        Ok(())
    }

    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }
}

/// Source-to-input transform for the padded, aspect-corrected person box.
pub fn crop_transform(bbox: [f64; 4], cfg: &SampleConfig) -> (Affine, (f64, f64), (f64, f64)) {
    let (iw, ih) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
    let aspect = iw / ih;
    let center = (bbox[0] + bbox[2] * 0.5, bbox[1] + bbox[3] * 0.5);
    let (mut w, mut h) = (bbox[2].max(1.0), bbox[3].max(1.0));
    if w > aspect * h {
        h = w / aspect;
    } else {
        w = h * aspect;
    }
    w *= cfg.box_padding;
    h *= cfg.box_padding;
    let s = iw / w;
    let t = Affine::translation((iw - 1.0) * 0.5, (ih - 1.0) * 0.5)
        .then_after(&Affine::scaling(s, s))
        .then_after(&Affine::translation(-center.0, -center.1));
    (t, center, (w, h))
}

fn transform_keypoints(kps: &[Keypoint], t: &Affine, size: (usize, usize)) -> Vec<Keypoint> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    kps.iter()
        .map(|k| {
            if !k.labeled() {
                return Keypoint::ABSENT;
            }
            let (x, y) = t.apply(k.x, k.y);
            if x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0 {
                Keypoint::new(x, y, k.v)
            } else {
                Keypoint::ABSENT
            }
        })
        .collect()
}

/// Crop one annotated person into a sample at input resolution.
pub fn prepare_sample(image: &Image, ann: &KeypointAnnotation, cfg: &SampleConfig) -> Result<TrainingSample> {
    let (t, center, scale) = crop_transform(ann.bbox, cfg);
    let crop = image.warp(&t, cfg.input_size.0, cfg.input_size.1);
    let (hh, hw) = cfg.heatmap_size();
    let mut s = TrainingSample {
        image: crop,
        keypoints: transform_keypoints(&ann.keypoints, &t, cfg.input_size),
        target_heatmaps: HeatmapTensor::zeros(ann.keypoints.len(), hh, hw, cfg.sigma_px),
        target_weights: vec![0.0; ann.keypoints.len()],
        domain: ann.domain,
        meta: SampleMeta {
            image_id: ann.image_id,
            center,
            scale,
            rotation_deg: 0.0,
            flipped: false,
            transform: t,
        },
        output_stride: cfg.output_stride,
    };
    s.rebuild_targets()?;
    Ok(s)
}

/// Apply explicit augmentation parameters. Rotation and zoom act about the
/// input centre; a flip maps `x ↦ w − 1 − x` and swaps left/right joints.
pub fn apply_augmentation(
    sample: &TrainingSample,
    params: AugmentParams,
    schema: &KeypointSchema,
) -> Result<TrainingSample> {
    if params == AugmentParams::IDENTITY {
        return Ok(sample.clone());
    }
    let (w, h) = (sample.image.width, sample.image.height);
    let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
    let mut map = Affine::translation(cx, cy)
        .then_after(&Affine::rotation_deg(params.rotation_deg))
        .then_after(&Affine::scaling(params.scale, params.scale))
        .then_after(&Affine::translation(-cx, -cy));
    if params.flip {
        let flip = Affine {
            m: [[-1.0, 0.0, w as f64 - 1.0], [0.0, 1.0, 0.0]],
        };
        map = flip.then_after(&map);
    }
    let mut keypoints = transform_keypoints(&sample.keypoints, &map, (w, h));
    if params.flip {
        let perm = schema.flip_permutation();
        keypoints = perm.iter().map(|&j| keypoints[j]).collect();
    }
    let mut out = TrainingSample {
        image: sample.image.warp(&map, w, h),
        keypoints,
        target_heatmaps: sample.target_heatmaps.clone(),
        target_weights: sample.target_weights.clone(),
        domain: sample.domain,
        meta: SampleMeta {
            rotation_deg: sample.meta.rotation_deg + params.rotation_deg,
            flipped: sample.meta.flipped ^ params.flip,
            transform: map.then_after(&sample.meta.transform),
            ..sample.meta.clone()
        },
        output_stride: sample.output_stride,
    };
    out.rebuild_targets()?;
    Ok(out)
}

/// Draw augmentation parameters from `config` and apply them.
pub fn augment_affine_flip(
    sample: &TrainingSample,
    config: &AugmentConfig,
    schema: &KeypointSchema,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    config.check()?;
    apply_augmentation(sample, AugmentParams::draw(config, rng), schema)
}

/// Decoded images shared across batches.
#[derive(Debug, Default, Clone)]
pub struct ImageStore {
    images: HashMap<PathBuf, Arc<Image>>,
}

impl ImageStore {
    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let mut paths: Vec<&PathBuf> = index.records.iter().map(|r| &r.image_path).collect();
        paths.sort();
        paths.dedup();
        let loaded = paths
            .par_iter()
            .map(|p| Image::load(p).map(|img| ((*p).clone(), Arc::new(img))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images: loaded.into_iter().collect(),
        })
    }

    pub fn insert(&mut self, path: PathBuf, image: Image) {
        self.images.insert(path, Arc::new(image));
    }

    pub fn get(&self, path: &PathBuf) -> Result<&Image> {
        self.images
            .get(path)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::Data(format!("image {} not loaded", path.display())))
    }
}

/// Dense batch ready for tensor conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub size: usize,
    /// `N × 3 × H × W`.
    pub images: Vec<f32>,
    /// `N × K × h × w`.
    pub heatmaps: Vec<f32>,
    /// `N × K`.
    pub weights: Vec<f32>,
    pub domains: Vec<DomainLabel>,
    pub image_ids: Vec<u64>,
    pub metas: Vec<SampleMeta>,
}

/// Everything needed to turn sampler batches into dense arrays.
#[derive(Debug, Clone)]
pub struct BatchBuilder<'a> {
    pub index: &'a DatasetIndex,
    pub store: &'a ImageStore,
    pub schema: &'a KeypointSchema,
    pub sample: SampleConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
}

impl BatchBuilder<'_> {
    /// Samples are prepared in parallel; each record's randomness comes from
    /// `(stream_seed, record index)` so the result does not depend on the
    /// worker count.
    pub fn build(&self, batch: &Batch, stream_seed: u64) -> Result<PreparedBatch> {
        let samples = batch
            .indices
            .par_iter()
            .map(|&i| {
                let rec = &self.index.records[i];
                let img = self.store.get(&rec.image_path)?;
                let s = prepare_sample(img, &rec.annotation, &self.sample)?;
                match &self.augment {
                    Some(cfg) => {
                        let mut rng = seed::rng(&[stream_seed, i as u64]);
                        augment_affine_flip(&s, cfg, self.schema, &mut rng)
                    }
                    None => Ok(s),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedBatch::from_samples(&samples))
    }
}

impl PreparedBatch {
    pub fn from_samples(samples: &[TrainingSample]) -> Self {
        let mut b = PreparedBatch {
            size: samples.len(),
            images: Vec::new(),
            heatmaps: Vec::new(),
            weights: Vec::new(),
            domains: Vec::new(),
            image_ids: Vec::new(),
            metas: Vec::new(),
        };
        for s in samples {
            b.images.extend(s.image.to_chw());
            b.heatmaps.extend_from_slice(&s.target_heatmaps.values);
            b.weights.extend_from_slice(&s.target_weights);
            b.domains.push(s.domain);
            b.image_ids.push(s.meta.image_id);
            b.metas.push(s.meta.clone());
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn schema() -> KeypointSchema {
        KeypointSchema::coco17()
    }

    fn sample_at(points: &[(f64, f64)]) -> TrainingSample {
        let mut kps = vec![Keypoint::ABSENT; 17];
        for (j, &(x, y)) in points.iter().enumerate() {
            kps[j] = Keypoint::new(x, y, 2);
        }
        let ann = KeypointAnnotation {
            image_id: 3,
            keypoints: kps,
            bbox: [0.0, 0.0, 32.0, 32.0],
            area: 1024.0,
            domain: DomainLabel::Real,
        };
        let mut img = Image::filled(32, 32, [0.1, 0.2, 0.3]);
        img.set_pixel(4, 9, [1.0, 1.0, 1.0]);
        let cfg = SampleConfig {
            input_size: (32, 32),
            output_stride: 4,
            sigma_px: 1.0,
            box_padding: 1.0,
        };
        prepare_sample(&img, &ann, &cfg).unwrap()
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let s = sample_at(&[(10.0, 12.0), (20.0, 5.0)]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let out = augment_affine_flip(&s, &AugmentConfig::identity(), &schema(), &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn forced_flip_mirrors_and_swaps() {
        let s = sample_at(&[(3.0, 4.0), (10.0, 12.0), (20.0, 5.0)]);
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let out = apply_augmentation(&s, p, &schema()).unwrap();
        let w = s.image.width as f64;
        // nose stays, left_eye (1) and right_eye (2) exchange
        assert!((out.keypoints[0].x - (w - 1.0 - s.keypoints[0].x)).abs() < 1e-9);
        assert!((out.keypoints[2].x - (w - 1.0 - s.keypoints[1].x)).abs() < 1e-9);
        assert!((out.keypoints[1].x - (w - 1.0 - s.keypoints[2].x)).abs() < 1e-9);
        assert_eq!(out.keypoints[2].y, s.keypoints[1].y);
        assert_eq!(out.target_weights[1], s.target_weights[2]);
        assert!(out.meta.flipped);
    }

    #[test]
    fn two_quarter_turns_equal_half_turn() {
        let s = sample_at(&[(9.0, 13.0), (20.0, 7.5), (16.0, 16.0)]);
        let quarter = AugmentParams {
            rotation_deg: 90.0,
            ..AugmentParams::IDENTITY
        };
        let half = AugmentParams {
            rotation_deg: 180.0,
            ..AugmentParams::IDENTITY
        };
        let twice = apply_augmentation(&apply_augmentation(&s, quarter, &schema()).unwrap(), quarter, &schema()).unwrap();
        let once = apply_augmentation(&s, half, &schema()).unwrap();
        for (a, b) in twice.keypoints.iter().zip(&once.keypoints) {
            assert_eq!(a.v, b.v);
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6, "{a:?} {b:?}");
        }
    }

    #[test]
    fn keypoints_leaving_crop_lose_weight() {
        let s = sample_at(&[(1.0, 16.0), (16.0, 16.0)]);
        let zoom = AugmentParams {
            scale: 2.0,
            ..AugmentParams::IDENTITY
        };
        let out = apply_augmentation(&s, zoom, &schema()).unwrap();
        assert_eq!(out.keypoints[0].v, 0);
        assert_eq!(out.target_weights[0], 0.0);
        assert_eq!(out.target_weights[1], 1.0);
        assert_eq!(out.visible_count(), s.visible_count() - 1);
    }

    #[test]
    fn targets_peak_at_quantized_keypoints() {
        let s = sample_at(&[(9.0, 13.0), (21.0, 6.0)]);
        for (j, kp) in s.keypoints.iter().enumerate().take(2) {
            let (x, y, v) = s.target_heatmaps.argmax(j);
            assert_eq!(v, 1.0);
            assert_eq!(x as i64, super::super::heatmap::quantize(kp.x / 4.0));
            assert_eq!(y as i64, super::super::heatmap::quantize(kp.y / 4.0));
        }
    }

    #[test]
    fn crop_maps_box_centre_to_input_centre() {
        let cfg = SampleConfig::default();
        let (t, c, _) = crop_transform([10.0, 20.0, 30.0, 80.0], &cfg);
        let (x, y) = t.apply(c.0, c.1);
        assert!((x - 95.5).abs() < 1e-9 && (y - 127.5).abs() < 1e-9);
    }
}
