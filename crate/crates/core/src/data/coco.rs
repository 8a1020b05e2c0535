//! COCO keypoint annotation files and multi-source dataset manifests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{DomainLabel, Keypoint, KeypointAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "person")]
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
    #[serde(default)]
    pub num_keypoints: usize,
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

fn person() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let (line, column) = (e.line(), e.column());
            Error::Parse {
                path: path.to_path_buf(),
                offset: byte_offset(text, line, column),
                line,
                column,
                msg: e.to_string(),
            }
        })
    }

    pub fn person_category(joint_names: &[String]) -> CocoCategory {
        CocoCategory {
            id: 1,
            name: "person".into(),
            keypoints: joint_names.to_vec(),
            skeleton: Vec::new(),
        }
    }
}

/// serde_json reports 1-based line and column; turn that into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

impl CocoAnnotation {
    pub fn from_annotation(id: u64, a: &KeypointAnnotation) -> Self {
        CocoAnnotation {
            id,
            image_id: a.image_id,
            category_id: 1,
            keypoints: Some(a.flat_keypoints()),
            num_keypoints: a.num_labeled(),
            bbox: a.bbox,
            area: a.area,
            iscrowd: 0,
        }
    }

    fn to_annotation(&self, domain: DomainLabel) -> Result<KeypointAnnotation> {
        let flat = self
            .keypoints
            .as_ref()
            .ok_or_else(|| Error::Data(format!("annotation {} has no \"keypoints\" field", self.id)))?;
        if flat.len() % 3 != 0 {
            return Err(Error::Data(format!(
                "annotation {}: keypoints length {} is not a multiple of 3",
                self.id,
                flat.len()
            )));
        }
        let keypoints = flat
            .chunks_exact(3)
            .map(|c| {
                let v = c[2];
                if !(v == 0.0 || v == 1.0 || v == 2.0) {
                    return Err(Error::Data(format!("annotation {}: visibility {v} not in {{0,1,2}}", self.id)));
                }
                Ok(Keypoint::new(c[0], c[1], v as u8))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KeypointAnnotation {
            image_id: self.image_id,
            keypoints,
            bbox: self.bbox,
            area: self.area,
            domain,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image_path: PathBuf,
    pub image_size: (u32, u32),
    pub annotation: KeypointAnnotation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(n_real, n_synthetic)`.
    pub fn domain_counts(&self) -> (usize, usize) {
        let syn = self
            .records
            .iter()
            .filter(|r| r.annotation.domain == DomainLabel::Synthetic)
            .count();
        (self.records.len() - syn, syn)
    }

    pub fn extend(&mut self, other: DatasetIndex) {
        self.records.extend(other.records);
    }

    pub fn annotations(&self) -> Vec<KeypointAnnotation> {
        self.records.iter().map(|r| r.annotation.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetIndex {
        DatasetIndex {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub missing_images: Vec<PathBuf>,
    pub skipped_records: usize,
    pub skipped_crowd: usize,
}

impl LoadReport {
    pub fn merge(&mut self, other: LoadReport) {
        self.missing_images.extend(other.missing_images);
        self.skipped_records += other.skipped_records;
        self.skipped_crowd += other.skipped_crowd;
    }
}

/// Load a COCO keypoint file. One record per non-crowd person instance;
/// instances whose image file is missing are skipped and listed in the
/// report.
pub fn load_coco_json(path: &Path, image_root: &Path, domain: DomainLabel) -> Result<(DatasetIndex, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = CocoFile::parse(path, &text)?;
    let images: HashMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let mut index = DatasetIndex::default();
    let mut report = LoadReport::default();
    let mut exists: HashMap<u64, bool> = HashMap::new();
    for ann in &file.annotations {
        let annotation = ann.to_annotation(domain)?;
        if ann.iscrowd != 0 {
            report.skipped_crowd += 1;
            continue;
        }
        let img = images
            .get(&ann.image_id)
            .ok_or_else(|| Error::Data(format!("annotation {} references unknown image {}", ann.id, ann.image_id)))?;
        let image_path = image_root.join(&img.file_name);
        let present = *exists.entry(img.id).or_insert_with(|| {
            let ok = image_path.is_file();
            if !ok {
                report.missing_images.push(image_path.clone());
            }
            ok
        });
        if !present {
            report.skipped_records += 1;
            continue;
        }
        index.records.push(Record {
            image_path,
            image_size: (img.width, img.height),
            annotation,
        });
    }
    for p in &report.missing_images {
        log::warn!("missing image {}", p.display());
    }
    Ok((index, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub annotation_file: PathBuf,
    pub image_root: PathBuf,
    pub domain: DomainLabel,
}

/// A JSON list of `{annotation_file, image_root, domain}`. Relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.annotation_file.is_relative() {
                e.annotation_file = base.join(&e.annotation_file);
            }
            if e.image_root.is_relative() {
                e.image_root = base.join(&e.image_root);
            }
        }
        Ok(m)
    }

    pub fn load_all(&self) -> Result<(DatasetIndex, LoadReport)> {
        let mut index = DatasetIndex::default();
        let mut report = LoadReport::default();
        for e in &self.entries {
            let (i, r) = load_coco_json(&e.annotation_file, &e.image_root, e.domain)?;
            index.extend(i);
            report.merge(r);
        }
        Ok((index, report))
    }
}
