//! Schematic imaging: the projected skeleton drawn as capsules over a
//! background, annotated in the target keypoint layout.

use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::body::{BodyModel, BodyPoseParams};
use super::camera::{project_pinhole, CameraParams};
use crate::error::{Error, Result};
use crate::imaging::{Affine, Image};
use crate::schema::{map_joints, DomainLabel, JointMap, Keypoint, KeypointAnnotation};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StickStyle {
    pub bone_radius_px: f64,
    pub head_radius_px: f64,
    pub left_color: [f32; 3],
    pub right_color: [f32; 3],
    pub center_color: [f32; 3],
    /// Add limb colour onto the background instead of painting over it.
    /// Overlapping limbs take the per-pixel maximum, so the image is the
    /// background plus one bounded overlay.
    pub additive: bool,
    /// Amplitude of uniform per-pixel noise added after drawing.
    pub pixel_noise: f32,
}

impl Default for StickStyle {
    fn default() -> Self {
        Self {
            bone_radius_px: 2.0,
            head_radius_px: 4.0,
            left_color: [0.9, 0.3, 0.2],
            right_color: [0.2, 0.4, 0.9],
            center_color: [0.3, 0.85, 0.3],
            additive: false,
            pixel_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Image stretched to fill the frame; a flat colour otherwise.
    pub background: Option<PathBuf>,
    pub background_color: [f32; 3],
    pub style: StickStyle,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            background: None,
            background_color: [0.1, 0.1, 0.1],
            style: StickStyle::default(),
        }
    }
}

/// A scene with its background resolved to pixels.
#[derive(Debug, Clone)]
pub struct Scene {
    pub background: Image,
    pub style: StickStyle,
    pub noise_seed: u64,
}

impl Scene {
    pub fn new(cfg: &SceneConfig, size: (usize, usize)) -> Result<Self> {
        let (w, h) = size;
        let background = match &cfg.background {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::Config(format!("background image {} does not exist", path.display())));
                }
                let img = Image::load(path)?;
                let s = Affine::scaling(w as f64 / img.width as f64, h as f64 / img.height as f64);
                img.warp(&s, w, h)
            }
            None => Image::filled(w, h, cfg.background_color),
        };
        Ok(Self {
            background,
            style: cfg.style.clone(),
            noise_seed: 0,
        })
    }

    pub fn flat(size: (usize, usize), color: [f32; 3], style: StickStyle) -> Self {
        Self {
            background: Image::filled(size.0, size.1, color),
            style,
            noise_seed: 0,
        }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Capsule of radius `r` with a one-pixel linear coverage ramp, either
/// painted over `img` or max-composited into it (`overlay`).
fn draw_capsule(img: &mut Image, a: [f64; 2], b: [f64; 2], r: f64, color: [f32; 3], overlay: bool) {
    let pad = r + 1.0;
    let x0 = (a[0].min(b[0]) - pad).floor().max(0.0) as usize;
    let y0 = (a[1].min(b[1]) - pad).floor().max(0.0) as usize;
    let x1 = ((a[0].max(b[0]) + pad).ceil().max(0.0) as usize).min(img.width);
    let y1 = ((a[1].max(b[1]) + pad).ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = point_segment_distance([x as f64, y as f64], a, b);
            let cover = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cover == 0.0 {
                continue;
            }
            let mut px = img.pixel(x, y);
            for c in 0..3 {
                px[c] = if overlay {
                    px[c].max(cover * color[c])
                } else {
                    px[c] * (1.0 - cover) + color[c] * cover
                };
            }
            img.set_pixel(x, y, px);
        }
    }
}

fn limb_color(style: &StickStyle, name: &str) -> [f32; 3] {
    if name.starts_with("left") {
        style.left_color
    } else if name.starts_with("right") {
        style.right_color
    } else {
        style.center_color
    }
}

/// Render `pose` seen through `cam`. The returned annotation is in the
/// target layout of `map`, with `image_id = 0`.
pub fn render_stick_figure(
    model: &BodyModel,
    map: &JointMap,
    pose: &BodyPoseParams,
    cam: &CameraParams,
    scene: &Scene,
) -> Result<(Image, KeypointAnnotation)> {
    let joints: Vec<Vector3<f64>> = model.forward_kinematics(pose)?;
    let uv = project_pinhole(&joints, cam).map_err(|e| match e {
        Error::Projection { joint, z, .. } => Error::Projection {
            joint,
            name: model.skeleton.joint_names[joint].clone(),
            z,
        },
        other => other,
    })?;
    let (w, h) = (scene.background.width, scene.background.height);
    let style = &scene.style;

    let mut img = if style.additive {
        Image::filled(w, h, [0.0; 3])
    } else {
        scene.background.clone()
    };
    for (child, parent) in model.skeleton.bones() {
        let color = limb_color(style, &model.skeleton.joint_names[child]);
        draw_capsule(&mut img, uv[parent], uv[child], style.bone_radius_px, color, style.additive);
    }
    if let Some(head) = model.skeleton.joint_index("head") {
        draw_capsule(&mut img, uv[head], uv[head], style.head_radius_px, style.center_color, style.additive);
    }
    if style.additive {
        for (v, b) in img.data.iter_mut().zip(&scene.background.data) {
            *v += b;
        }
    }
    if style.pixel_noise > 0.0 {
        use rand::Rng;
        let mut rng = seed::rng(&[scene.noise_seed, seed::tag("pixel-noise")]);
        let a = style.pixel_noise;
        for v in img.data.iter_mut() {
            *v += rng.random_range(-a..=a);
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let inside = |p: &[f64; 2]| p[0] >= 0.0 && p[0] < w as f64 && p[1] >= 0.0 && p[1] < h as f64;
    let body_kps: Vec<Keypoint> = uv
        .iter()
        .map(|p| if inside(p) { Keypoint::new(p[0], p[1], 2) } else { Keypoint::ABSENT })
        .collect();
    let keypoints = map_joints(&body_kps, map)?;
    if !keypoints.iter().any(Keypoint::labeled) {
        return Err(Error::Sampling("no keypoint projects inside the image".into()));
    }

    let pad = style.bone_radius_px.max(style.head_radius_px);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &uv {
        x0 = x0.min(p[0] - pad);
        y0 = y0.min(p[1] - pad);
        x1 = x1.max(p[0] + pad);
        y1 = y1.max(p[1] + pad);
    }
    let (x0, y0) = (x0.max(0.0), y0.max(0.0));
    let (x1, y1) = (x1.min(w as f64), y1.min(h as f64));
    let bbox = [x0, y0, (x1 - x0).max(1.0), (y1 - y0).max(1.0)];
    let ann = KeypointAnnotation {
        image_id: 0,
        keypoints,
        bbox,
        area: bbox[2] * bbox[3],
        domain: DomainLabel::Synthetic,
    };
    Ok((img, ann))
}
