//! Keypoint evaluation and domain-alignment diagnostics.

pub mod metrics;
pub mod predict;
pub mod probe;

pub use metrics::{
    average_precision, average_precision_from_ranked, detections_from_json, detections_to_json,
    map_over_thresholds, match_detections, oks, oks_thresholds, Detection, EvalReport, ImageMatches,
};
pub use predict::{predict_detections, sequential_batches};
pub use probe::{domain_confusion_score, export_features, extract_features, FeatureMatrix, ProbeConfig, ProbeResult};
