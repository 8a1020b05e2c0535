//! Drawing new poses from a library: jitter, canonicalize, reject implausible
//! bodies.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::body::{BodyModel, BodyPoseParams};
use super::prior::PreparedPrior;
use crate::error::{Error, Result};

const BUILTIN_LIBRARY_JSON: &str = include_str!("../../data/pose_library.json");

/// Consecutive rejections tolerated before sampling gives up.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;

pub fn builtin_library() -> Vec<BodyPoseParams> {
    serde_json::from_str(BUILTIN_LIBRARY_JSON).expect("bundled pose library")
}

pub fn load_library(path: &Path) -> Result<Vec<BodyPoseParams>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lib: Vec<BodyPoseParams> = serde_json::from_str(&text)?;
    for (i, p) in lib.iter().enumerate() {
        p.check().map_err(|e| Error::Data(format!("{}: library pose {i}: {e}", path.display())))?;
    }
    Ok(lib)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Reject when `-log p(body pose)` exceeds this; `None` disables the test.
    pub prior_cutoff: Option<f64>,
    /// Smallest allowed distance (metres) between two bones that share no
    /// joint; `0` disables the test.
    pub min_bone_distance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            prior_cutoff: None,
            min_bone_distance: 0.012,
        }
    }
}

/// Plausibility test applied to every drawn pose.
pub struct PoseFilter<'a> {
    pub model: &'a BodyModel,
    pub prior: Option<&'a PreparedPrior>,
    pub cfg: FilterConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Prior,
    SelfIntersection,
}

impl PoseFilter<'_> {
    pub fn accept_all(model: &BodyModel) -> PoseFilter<'_> {
        PoseFilter {
            model,
            prior: None,
            cfg: FilterConfig {
                prior_cutoff: None,
                min_bone_distance: 0.0,
            },
        }
    }

    pub fn check(&self, pose: &BodyPoseParams) -> Result<Option<Rejection>> {
        if let (Some(prior), Some(cut)) = (self.prior, self.cfg.prior_cutoff) {
            let (nll, _) = prior.pose_neg_log_density(pose.body_pose());
            if !(nll <= cut) {
                return Ok(Some(Rejection::Prior));
            }
        }
        if self.cfg.min_bone_distance > 0.0 {
            let joints = self.model.forward_kinematics(pose)?;
            if min_bone_distance(self.model, &joints) < self.cfg.min_bone_distance {
                return Ok(Some(Rejection::SelfIntersection));
            }
        }
        Ok(None)
    }
}

/// Closest distance between two segments.
pub fn segment_distance(p0: Vector3<f64>, p1: Vector3<f64>, q0: Vector3<f64>, q1: Vector3<f64>) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-15;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

/// Smallest distance between any two bones that do not share a joint.
pub fn min_bone_distance(model: &BodyModel, joints: &[Vector3<f64>]) -> f64 {
    let bones = model.skeleton.bones();
    let mut best = f64::INFINITY;
    for (i, &(a0, a1)) in bones.iter().enumerate() {
        for &(b0, b1) in &bones[i + 1..] {
            if a0 == b0 || a0 == b1 || a1 == b0 || a1 == b1 {
                continue;
            }
            best = best.min(segment_distance(joints[a0], joints[a1], joints[b0], joints[b1]));
        }
    }
    best
}

/// Uniform library pick plus per-component Gaussian noise on theta, then
/// canonicalization and the rejection filter.
pub fn sample_pose(
    library: &[BodyPoseParams],
    noise_std: f64,
    filter: &PoseFilter,
    rng: &mut impl Rng,
) -> Result<BodyPoseParams> {
    if library.is_empty() {
        return Err(Error::Input("pose library is empty".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be finite and non-negative, got {noise_std}")));
    }
    let normal = Normal::new(0.0, noise_std).expect("valid std");
    let mut rejected = (0usize, 0usize);
    for _ in 0..=MAX_CONSECUTIVE_REJECTIONS {
        let base = &library[rng.random_range(0..library.len())];
        if noise_std == 0.0 {
            return Ok(base.clone());
        }
        let mut pose = base.clone();
        for v in pose.theta.iter_mut() {
            *v += normal.sample(rng);
        }
        pose.canonicalize();
        match filter.check(&pose)? {
            None => return Ok(pose),
            Some(Rejection::Prior) => rejected.0 += 1,
            Some(Rejection::SelfIntersection) => rejected.1 += 1,
        }
    }
    Err(Error::Sampling(format!(
        "{} consecutive poses rejected ({} by the prior cutoff, {} by self-intersection); lower noise_std",
        MAX_CONSECUTIVE_REJECTIONS + 1,
        rejected.0,
        rejected.1
    )))
}
