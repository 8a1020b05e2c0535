//! Object keypoint similarity and COCO-style average precision.
//!
//! Conventions follow the public COCO keypoint evaluation: the per-joint
//! falloff is `k = 2σ`, the scale is `s² = area`, detections are matched
//! greedily in descending score order and AP is the mean of interpolated
//! precision sampled at 101 recall levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::KeypointAnnotation;

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const RECALL_LEVELS: usize = 101;
pub const MAX_DETS_PER_IMAGE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    /// `(x, y, confidence)` per joint, in image pixels.
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    #[serde(default = "one")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

fn one() -> u64 {
    1
}

impl From<&Detection> for CocoResult {
    fn from(d: &Detection) -> Self {
        CocoResult {
            image_id: d.image_id,
            category_id: 1,
            keypoints: d.keypoints.iter().flatten().copied().collect(),
            score: d.score,
        }
    }
}

impl TryFrom<CocoResult> for Detection {
    type Error = Error;

    fn try_from(r: CocoResult) -> Result<Self> {
        if r.keypoints.len() % 3 != 0 {
            return Err(Error::Data(format!(
                "detection for image {}: keypoint array length {} is not a multiple of 3",
                r.image_id,
                r.keypoints.len()
            )));
        }
        if !r.score.is_finite() {
            return Err(Error::Data(format!("detection for image {}: non-finite score", r.image_id)));
        }
        Ok(Detection {
            image_id: r.image_id,
            keypoints: r.keypoints.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            score: r.score,
        })
    }
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>> {
    let raw: Vec<CocoResult> = serde_json::from_str(text)?;
    raw.into_iter().map(Detection::try_from).collect()
}

pub fn detections_to_json(dets: &[Detection]) -> Result<String> {
    let raw: Vec<CocoResult> = dets.iter().map(CocoResult::from).collect();
    Ok(serde_json::to_string(&raw)?)
}

fn joint_term(dx: f64, dy: f64, area: f64, sigma: f64) -> f64 {
    let k = 2.0 * sigma;
    let e = (dx * dx + dy * dy) / (k * k) / (area + f64::EPSILON) / 2.0;
    (-e).exp()
}

/// OKS between one detection and one ground-truth instance. Joints with
/// `v = 0` in the ground truth are excluded; if none remain the similarity
/// is undefined and an error is returned.
pub fn oks(det: &Detection, gt: &KeypointAnnotation, sigmas: &[f64]) -> Result<f64> {
    if det.keypoints.len() != gt.keypoints.len() || sigmas.len() != gt.keypoints.len() {
        return Err(Error::shape(
            "oks",
            format!("{} joints", gt.keypoints.len()),
            format!("{} detected, {} sigmas", det.keypoints.len(), sigmas.len()),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((d, g), s) in det.keypoints.iter().zip(&gt.keypoints).zip(sigmas) {
        if g.v == 0 {
            continue;
        }
        sum += joint_term(d[0] - g.x, d[1] - g.y, gt.area, *s);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined(format!(
            "ground truth in image {} has no labeled joints",
            gt.image_id
        )));
    }
    Ok(sum / n as f64)
}

/// Outcome of matching one image's detections at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    /// Detection scores, sorted descending.
    pub scores: Vec<f64>,
    /// Original detection index for each sorted entry.
    pub det_order: Vec<usize>,
    /// Matched ground-truth index (into the labeled gts) per sorted detection.
    pub det_to_gt: Vec<Option<usize>>,
    pub num_gt: usize,
}

impl ImageMatches {
    pub fn true_positives(&self) -> usize {
        self.det_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.det_to_gt.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.num_gt - self.true_positives()
    }
}

/// Detection indices sorted by descending score (stable), truncated to
/// [`MAX_DETS_PER_IMAGE`].
fn score_order(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(MAX_DETS_PER_IMAGE);
    order
}

/// OKS matrix `[sorted det][gt]` for gts that have at least one labeled joint.
fn oks_matrix(dets: &[&Detection], order: &[usize], gts: &[&KeypointAnnotation], sigmas: &[f64]) -> Result<Vec<Vec<f64>>> {
    order
        .iter()
        .map(|&d| gts.iter().map(|g| oks(dets[d], g, sigmas)).collect())
        .collect()
}

fn greedy_match(ious: &[Vec<f64>], num_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut gt_taken = vec![false; num_gt];
    ious.iter()
        .map(|row| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut m = None;
            for (g, &o) in row.iter().enumerate() {
                if gt_taken[g] || o < best {
                    continue;
                }
                best = o;
                m = Some(g);
            }
            if let Some(g) = m {
                gt_taken[g] = true;
            }
            m
        })
        .collect()
}

/// Match one image's detections to its ground truth at OKS threshold `t`.
/// Ground-truth instances without labeled joints cannot be matched and are
/// not counted.
pub fn match_detections(
    dets: &[&Detection],
    gts: &[&KeypointAnnotation],
    threshold: f64,
    sigmas: &[f64],
) -> Result<ImageMatches> {
    let labeled: Vec<&KeypointAnnotation> = gts.iter().copied().filter(|g| g.num_labeled() > 0).collect();
    let order = score_order(dets);
    let ious = oks_matrix(dets, &order, &labeled, sigmas)?;
    Ok(ImageMatches {
        scores: order.iter().map(|&d| dets[d].score).collect(),
        det_to_gt: greedy_match(&ious, labeled.len(), threshold),
        det_order: order,
        num_gt: labeled.len(),
    })
}

/// AP from score-ranked TP/FP flags. `entries` must already be sorted by
/// descending score.
pub fn average_precision_from_ranked(is_tp: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Undefined("average precision with zero ground-truth instances".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for &hit in is_tp {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / num_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..RECALL_LEVELS {
        let level = r as f64 / (RECALL_LEVELS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Ok(total / RECALL_LEVELS as f64)
}

/// Accumulate per-image matches across a dataset into a single AP.
pub fn average_precision(matches: &[ImageMatches]) -> Result<f64> {
    let num_gt: usize = matches.iter().map(|m| m.num_gt).sum();
    let mut ranked: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.scores.iter().zip(&m.det_to_gt).map(|(s, g)| (*s, g.is_some())))
        .collect();
    // stable, so ties keep image order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    average_precision_from_ranked(&flags, num_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Mean of `exp(-d²/(2s²k²))` per joint between each ground truth and its
    /// best-OKS detection; `None` where no pair exists.
    pub per_keypoint_mean_oks_term: Vec<Option<f64>>,
    pub counts: EvalCounts,
}

fn group<'a, T>(items: &'a [T], key: impl Fn(&T) -> u64) -> BTreeMap<u64, Vec<&'a T>> {
    let mut map: BTreeMap<u64, Vec<&T>> = BTreeMap::new();
    for it in items {
        map.entry(key(it)).or_default().push(it);
    }
    map
}

/// AP at each of the ten OKS thresholds and their mean.
pub fn map_over_thresholds(dets: &[Detection], gts: &[KeypointAnnotation], sigmas: &[f64]) -> Result<EvalReport> {
    let det_by_img = group(dets, |d| d.image_id);
    let gt_by_img = group(gts, |g| g.image_id);
    let mut image_ids: Vec<u64> = det_by_img.keys().chain(gt_by_img.keys()).copied().collect();
    image_ids.sort_unstable();
    image_ids.dedup();

    let thresholds = oks_thresholds();
    let empty_d: Vec<&Detection> = Vec::new();
    let empty_g: Vec<&KeypointAnnotation> = Vec::new();
    let mut ap = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let per_image = image_ids
            .iter()
            .map(|id| {
                let d = det_by_img.get(id).unwrap_or(&empty_d);
                let g = gt_by_img.get(id).unwrap_or(&empty_g);
                match_detections(d, g, t, sigmas)
            })
            .collect::<Result<Vec<_>>>()?;
        ap.push(average_precision(&per_image)?);
    }
    let map = ap.iter().sum::<f64>() / ap.len() as f64;

    let k = sigmas.len();
    let mut term_sum = vec![0.0; k];
    let mut term_n = vec![0usize; k];
    for g in gts.iter().filter(|g| g.num_labeled() > 0) {
        let Some(cands) = det_by_img.get(&g.image_id) else { continue };
        let mut best: Option<(&Detection, f64)> = None;
        for d in cands {
            let o = oks(d, g, sigmas)?;
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((d, o));
            }
        }
        if let Some((d, _)) = best {
            for j in 0..k {
                if g.keypoints[j].v > 0 {
                    term_sum[j] += joint_term(
                        d.keypoints[j][0] - g.keypoints[j].x,
                        d.keypoints[j][1] - g.keypoints[j].y,
                        g.area,
                        sigmas[j],
                    );
                    term_n[j] += 1;
                }
            }
        }
    }
    let per_keypoint = term_sum
        .iter()
        .zip(&term_n)
        .map(|(s, n)| (*n > 0).then(|| s / *n as f64))
        .collect();

    Ok(EvalReport {
        thresholds,
        ap_per_threshold: ap,
        map,
        per_keypoint_mean_oks_term: per_keypoint,
        counts: EvalCounts {
            images: image_ids.len(),
            ground_truths: gts.iter().filter(|g| g.num_labeled() > 0).count(),
            detections: dets.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{DomainLabel, Keypoint};

    fn gt(image_id: u64, pts: &[(f64, f64)], area: f64) -> KeypointAnnotation {
        KeypointAnnotation {
            image_id,
            keypoints: pts.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect(),
            bbox: [0.0, 0.0, 10.0, 10.0],
            area,
            domain: DomainLabel::Real,
        }
    }

    fn det(image_id: u64, pts: &[(f64, f64)], score: f64) -> Detection {
        Detection {
            image_id,
            keypoints: pts.iter().map(|&(x, y)| [x, y, 1.0]).collect(),
            score,
        }
    }

    #[test]
    fn exact_detection_has_unit_oks() {
        let g = gt(1, &[(3.0, 4.0), (10.0, 2.0)], 100.0);
        let d = det(1, &[(3.0, 4.0), (10.0, 2.0)], 1.0);
        assert_eq!(oks(&d, &g, &[0.05, 0.07]).unwrap(), 1.0);
    }

    #[test]
    fn single_joint_at_unit_exponent() {
        // d² = 2 s² k² with k = 2σ
        let (area, sigma) = (400.0f64, 0.05f64);
        let k = 2.0 * sigma;
        let d = (2.0 * area * k * k).sqrt();
        let g = gt(1, &[(0.0, 0.0)], area);
        let o = oks(&det(1, &[(d, 0.0)], 1.0), &g, &[sigma]).unwrap();
        assert!((o - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn two_joint_average() {
        let (area, sigma) = (400.0f64, 0.05f64);
        let d = (2.0 * area * (2.0 * sigma).powi(2)).sqrt();
        let g = gt(1, &[(0.0, 0.0), (5.0, 5.0)], area);
        let o =oks(&det(1, &[(0.0, 0.0), (5.0 + d, 5.0)], 1.0), &g, &[sigma, sigma]).unwrap();
        assert!((o - 0.683_939_720_585_721_2).abs() < 1e-9);
    }

    #[test]
    fn unlabeled_joints_are_ignored_and_all_unlabeled_is_undefined() {
        let mut g = gt(1, &[(0.0, 0.0), (5.0, 5.0)], 100.0);
        g.keypoints[1].v = 0;
        let o = oks(&det(1, &[(0.0, 0.0), (500.0, 500.0)], 1.0), &g, &[0.05, 0.05]).unwrap();
        assert_eq!(o, 1.0);
        g.keypoints[0].v = 0;
        assert!(matches!(oks(&det(1, &[(0.0, 0.0); 2], 1.0), &g, &[0.05, 0.05]), Err(Error::Undefined(_))));
    }

    #[test]
    fn single_match_is_tp() {
        let g = gt(1, &[(0.0, 0.0)], 100.0);
        let d = det(1, &[(0.5, 0.0)], 0.9);
        let m = match_detections(&[&d], &[&g], 0.5, &[0.1]).unwrap();
        assert_eq!(m.det_to_gt, vec![Some(0)]);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives()), (1, 0, 0));
    }

    #[test]
    fn higher_score_wins_contested_gt() {
        let g = gt(1, &[(0.0, 0.0)], 100.0);
        let low = det(1, &[(0.0, 0.0)], 0.3);
        let high = det(1, &[(0.2, 0.0)], 0.8);
        let m = match_detections(&[&low, &high], &[&g], 0.5, &[0.1]).unwrap();
        assert_eq!(m.det_order, vec![1, 0]);
        assert_eq!(m.det_to_gt, vec![Some(0), None]);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision_from_ranked(&[true, false], 1).unwrap(), 1.0);
        let reversed = average_precision_from_ranked(&[false, true], 1).unwrap();
        assert!((reversed - 0.5).abs() < 1e-9, "{reversed}");
        assert_eq!(average_precision_from_ranked(&[], 3).unwrap(), 0.0);
        assert!(average_precision_from_ranked(&[true], 0).is_err());
    }

    #[test]
    fn perfect_detections_give_unit_map() {
        let gts: Vec<_> = (0..5).map(|i| gt(i, &[(i as f64, 2.0), (4.0, 4.0)], 50.0)).collect();
        let dets: Vec<_> = gts
            .iter()
            .map(|g| det(g.image_id, &[(g.keypoints[0].x, 2.0), (4.0, 4.0)], 0.5))
            .collect();
        let r = map_over_thresholds(&dets, &gts, &[0.05, 0.05]).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_keypoint_mean_oks_term, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn empty_detections_give_zero_map() {
        let gts = vec![gt(0, &[(1.0, 1.0)], 50.0)];
        let r = map_over_thresholds(&[], &gts, &[0.05]).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.per_keypoint_mean_oks_term, vec![None]);
    }

    #[test]
    fn results_json_round_trip() {
        let d = vec![det(4, &[(1.0, 2.0), (3.0, 4.0)], 0.25)];
        let text = detections_to_json(&d).unwrap();
        assert!(text.contains("\"category_id\":1"));
        assert_eq!(detections_from_json(&text).unwrap(), d);
        assert!(detections_from_json(r#"[{"image_id":1,"keypoints":[1,2],"score":1}]"#).is_err());
    }
}
