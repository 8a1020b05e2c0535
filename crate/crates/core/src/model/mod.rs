//! The pose network: encoder (θ_f), heatmap head (θ_y), domain classifier
//! (θ_d), gradient reversal and freeze masks.

mod bundle;
pub mod checkpoint;
pub mod grl;

pub use bundle::{
    Block, ModelConfig, Param, ParamGroup, PoseModelBundle, Precision, Stage, HEATMAP_STRIDE,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use grl::GradientReversal;
