//! Bone-orientation histograms as a measure of pose variety.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schema::{KeypointAnnotation, KeypointSchema};

pub const ANGLE_BINS: usize = 36;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoneHistogram {
    pub parent: String,
    pub child: String,
    pub counts: Vec<u64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseDistributionStats {
    pub annotations: usize,
    pub bones: Vec<BoneHistogram>,
    /// Mean of the per-bone entropies (nats) over bones with any samples.
    pub diversity_index: f64,
}

/// Bin of an angle in `[-π, π]`, measured from the image x axis.
pub fn angle_bin(angle: f64) -> usize {
    let t = (angle + PI) / (2.0 * PI);
    ((t * ANGLE_BINS as f64).floor() as usize).min(ANGLE_BINS - 1)
}

pub fn entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn pose_distribution_stats(annotations: &[KeypointAnnotation], schema: &KeypointSchema) -> Result<PoseDistributionStats> {
    if annotations.is_empty() {
        return Err(Error::Input("pose statistics need at least one annotation".into()));
    }
    let bones = schema.bones();
    let mut hist = vec![vec![0u64; ANGLE_BINS]; bones.len()];
    for a in annotations {
        if a.keypoints.len() != schema.num_joints() {
            return Err(Error::shape("annotation keypoints", schema.num_joints(), a.keypoints.len()));
        }
        for (h, &(child, parent)) in hist.iter_mut().zip(&bones) {
            let (c, p) = (&a.keypoints[child], &a.keypoints[parent]);
            if c.labeled() && p.labeled() && (c.x != p.x || c.y != p.y) {
                h[angle_bin((c.y - p.y).atan2(c.x - p.x))] += 1;
            }
        }
    }
    let bones: Vec<BoneHistogram> = bones
        .iter()
        .zip(hist)
        .map(|(&(child, parent), counts)| BoneHistogram {
            parent: schema.joint_names[parent].clone(),
            child: schema.joint_names[child].clone(),
            entropy: entropy(&counts),
            counts,
        })
        .collect();
    let used: Vec<f64> = bones
        .iter()
        .filter(|b| b.counts.iter().any(|&c| c > 0))
        .map(|b| b.entropy)
        .collect();
    let diversity_index = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok(PoseDistributionStats {
        annotations: annotations.len(),
        bones,
        diversity_index,
    })
}
