//! Dataset ingestion, batch sampling, augmentation and heatmap targets.

pub mod coco;
pub mod heatmap;
pub mod sample;
pub mod sampler;
pub mod source;

pub use coco::{load_coco_json, CocoFile, DatasetIndex, DatasetManifest, LoadReport, ManifestEntry, Record};
pub use heatmap::{decode_channel, make_heatmap_targets, HeatmapTensor};
pub use sample::{
    apply_augmentation, augment_affine_flip, prepare_sample, AugmentConfig, AugmentParams, BatchBuilder,
    ImageStore, PreparedBatch, SampleConfig, SampleMeta, TrainingSample,
};
pub use sampler::{Batch, HybridBatchSampler};
pub use source::{BatchSource, BatchTensors, SampleSet};
