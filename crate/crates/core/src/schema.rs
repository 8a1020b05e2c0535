//! Keypoint schemas, per-instance annotations and joint remapping.
//!
//! Two skeletons ship with the crate: the 17-joint COCO layout used for
//! annotations and evaluation, and a 24-joint articulated body layout (23
//! joints plus the pelvis root) used by the synthetic generator.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const COCO17_JSON: &str = include_str!("../data/coco17.json");
const BODY24_JSON: &str = include_str!("../data/body24.json");
const BODY24_TO_COCO17_JSON: &str = include_str!("../data/body24_to_coco17.json");

fn de_parents<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Option<usize>>, D::Error> {
    let raw: Vec<Option<i64>> = Vec::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|p| match p {
            Some(i) if i >= 0 => Some(i as usize),
            _ => None,
        })
        .collect())
}

fn ser_parents<S: Serializer>(p: &[Option<usize>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let raw: Vec<i64> = p.iter().map(|p| p.map_or(-1, |i| i as i64)).collect();
    raw.serialize(s)
}

/// An ordered joint set with left/right pairs, OKS falloff constants and a
/// kinematic tree. Root joints are encoded as `-1` (or `null`) in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSchema {
    #[serde(default)]
    pub name: String,
    pub joint_names: Vec<String>,
    pub flip_pairs: Vec<(usize, usize)>,
    pub oks_sigmas: Vec<f64>,
    #[serde(deserialize_with = "de_parents", serialize_with = "ser_parents")]
    pub parent: Vec<Option<usize>>,
}

impl KeypointSchema {
    pub fn coco17() -> Self {
        serde_json::from_str(COCO17_JSON).expect("bundled coco17 schema")
    }

    pub fn body24() -> Self {
        serde_json::from_str(BODY24_JSON).expect("bundled body24 schema")
    }

    pub fn from_json_str(name_hint: &str, s: &str) -> Result<Self> {
        let mut schema: Self = serde_json::from_str(s)?;
        if schema.name.is_empty() {
            schema.name = name_hint.to_string();
        }
        schema.check()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("schema");
        Self::from_json_str(stem, &text)
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(Option::is_none).unwrap_or(0)
    }

    /// Joint indices ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let k = self.num_joints();
        let mut order = Vec::with_capacity(k);
        let mut placed = vec![false; k];
        while order.len() < k {
            let before = order.len();
            for j in 0..k {
                if placed[j] {
                    continue;
                }
                if self.parent[j].map_or(true, |p| placed[p]) {
                    placed[j] = true;
                    order.push(j);
                }
            }
            if order.len() == before {
                break;
            }
        }
        order
    }

    /// Bones as (child, parent) pairs.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (j, p)))
            .collect()
    }

    /// Index permutation that swaps every flip pair.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    pub fn check(&self) -> Result<()> {
        let k = self.num_joints();
        let bad = |msg: String| Err(Error::Config(format!("schema '{}': {msg}", self.name)));
        if k == 0 {
            return bad("joint count must be at least 1".into());
        }
        if self.oks_sigmas.len() != k {
            return bad(format!("{} oks_sigmas for {k} joints", self.oks_sigmas.len()));
        }
        if let Some(s) = self.oks_sigmas.iter().find(|s| !(**s > 0.0)) {
            return bad(format!("oks sigma {s} is not positive"));
        }
        if self.parent.len() != k {
            return bad(format!("{} parents for {k} joints", self.parent.len()));
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return bad(format!("expected exactly one root, found {roots}"));
        }
        if let Some(p) = self.parent.iter().flatten().find(|p| **p >= k) {
            return bad(format!("parent index {p} out of range"));
        }
        if self.topological_order().len() != k {
            return bad("parent table contains a cycle".into());
        }
        let mut seen = vec![false; k];
        for &(l, r) in &self.flip_pairs {
            if l >= k || r >= k {
                return bad(format!("flip pair ({l},{r}) out of range"));
            }
            if l == r || seen[l] || seen[r] {
                return bad(format!("flip pair ({l},{r}) repeats a joint"));
            }
            seen[l] = true;
            seen[r] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Real,
    Synthetic,
}

impl DomainLabel {
    /// Binary classification target; synthetic is the positive class.
    pub fn target(self) -> f64 {
        match self {
            DomainLabel::Real => 0.0,
            DomainLabel::Synthetic => 1.0,
        }
    }

    pub fn as_index(self) -> u8 {
        self.target() as u8
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainLabel::Real => f.write_str("real"),
            DomainLabel::Synthetic => f.write_str("synthetic"),
        }
    }
}

/// One keypoint in COCO convention: `v` is 0 (unlabeled), 1 (labeled,
/// occluded) or 2 (labeled, visible).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub const ABSENT: Keypoint = Keypoint { x: 0.0, y: 0.0, v: 0 };

    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    /// (x, y, w, h) in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub domain: DomainLabel,
}

impl KeypointAnnotation {
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }

    /// COCO flat layout `[x0, y0, v0, x1, ...]`.
    pub fn flat_keypoints(&self) -> Vec<f64> {
        self.keypoints.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    CountMismatch,
    OutOfBounds,
    InvalidVisibility,
    NonFinite,
    NonPositiveArea,
    NonPositiveBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?} ({})", self.field, self.rule, self.detail)
    }
}

/// Check an annotation against a schema and an image size. Violations are
/// returned as data; an empty list means the annotation is valid.
pub fn validate_annotation(
    a: &KeypointAnnotation,
    schema: &KeypointSchema,
    img_size: (u32, u32),
) -> Vec<Violation> {
    let mut out = Vec::new();
    let (w, h) = (img_size.0 as f64, img_size.1 as f64);
    if a.keypoints.len() != schema.num_joints() {
        out.push(Violation {
            field: "keypoints".into(),
            rule: Rule::CountMismatch,
            detail: format!(
                "{} keypoints, schema '{}' has {}",
                a.keypoints.len(),
                schema.name,
                schema.num_joints()
            ),
        });
    }
    for (i, kp) in a.keypoints.iter().enumerate() {
        let field = format!("keypoints[{i}]");
        if kp.v > 2 {
            out.push(Violation {
                field: field.clone(),
                rule: Rule::InvalidVisibility,
                detail: format!("v = {}", kp.v),
            });
        }
        if !kp.x.is_finite() || !kp.y.is_finite() {
            out.push(Violation {
                field,
                rule: Rule::NonFinite,
                detail: format!("({}, {})", kp.x, kp.y),
            });
            continue;
        }
        if kp.labeled() && !(kp.x >= 0.0 && kp.x < w && kp.y >= 0.0 && kp.y < h) {
            out.push(Violation {
                field,
                rule: Rule::OutOfBounds,
                detail: format!("({}, {}) outside {}x{}", kp.x, kp.y, w, h),
            });
        }
    }
    if !(a.area > 0.0) {
        out.push(Violation {
            field: "area".into(),
            rule: Rule::NonPositiveArea,
            detail: format!("area = {}", a.area),
        });
    }
    if !(a.bbox[2] > 0.0 && a.bbox[3] > 0.0) {
        out.push(Violation {
            field: "bbox".into(),
            rule: Rule::NonPositiveBox,
            detail: format!("w = {}, h = {}", a.bbox[2], a.bbox[3]),
        });
    }
    out
}

/// Maps each target joint to at most one source joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMap {
    pub source: String,
    pub target: String,
    pub source_joints: usize,
    /// `sources[i]` is the source joint feeding target joint `i`.
    pub sources: Vec<Option<usize>>,
}

impl JointMap {
    pub fn body24_to_coco17() -> Self {
        serde_json::from_str(BODY24_TO_COCO17_JSON).expect("bundled joint map")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: Self = serde_json::from_str(&text)?;
        map.check()?;
        Ok(map)
    }

    pub fn target_joints(&self) -> usize {
        self.sources.len()
    }

    pub fn check(&self) -> Result<()> {
        for (i, s) in self.sources.iter().enumerate() {
            if let Some(s) = s {
                if *s >= self.source_joints {
                    return Err(Error::Config(format!(
                        "joint map {}->{}: target {i} references source {s}, only {} source joints",
                        self.source, self.target, self.source_joints
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map for the opposite direction. Source joints not referenced by any
    /// target become absent; a source used twice maps back to its first user.
    pub fn inverse(&self) -> JointMap {
        let mut sources = vec![None; self.source_joints];
        for (t, s) in self.sources.iter().enumerate() {
            if let Some(s) = s {
                if sources[*s].is_none() {
                    sources[*s] = Some(t);
                }
            }
        }
        JointMap {
            source: self.target.clone(),
            target: self.source.clone(),
            source_joints: self.sources.len(),
            sources,
        }
    }
}

/// Reorder keypoints from the source skeleton into the target skeleton.
/// Coordinates of mapped joints are copied verbatim; absent joints become
/// `(0, 0, 0)`.
pub fn map_joints(src: &[Keypoint], map: &JointMap) -> Result<Vec<Keypoint>> {
    map.check()?;
    if src.len() != map.source_joints {
        return Err(Error::Config(format!(
            "joint map expects {} source joints, got {}",
            map.source_joints,
            src.len()
        )));
    }
    Ok(map
        .sources
        .iter()
        .map(|s| s.map_or(Keypoint::ABSENT, |i| src[i]))
        .collect())
}
