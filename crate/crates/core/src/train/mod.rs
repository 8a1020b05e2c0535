//! Losses, the classifier warm-up and the alternating two-stage loop.

pub mod adam;
pub mod config;
pub mod fidip;
pub mod loss;

pub use adam::{Adam, AdamConfig};
pub use config::{Session, StageGranularity, TrainConfig, TrainMode};
pub use fidip::{
    init_domain_classifier, run_fidip, schedule, stream_batches, train_stage1, train_stage2, InitSummary,
    write_atomic, RunOptions, SeededBatch, StageRecord, TrainReport, CHECKPOINT_FILE, REPORT_FILE,
};
pub use loss::{domain_loss, domain_scales, pose_loss, total_loss, DomainCounts, LossBreakdown};
