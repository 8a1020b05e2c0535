//! Synthetic keypoint data from an articulated skeleton: kinematics,
//! projection, 2D-to-3D fitting, pose sampling, rendering and statistics.

pub mod body;
pub mod camera;
pub mod fit;
pub mod generate;
pub mod prior;
pub mod render;
pub mod sample;
pub mod stats;

pub use body::{forward_kinematics, BodyModel, BodyPoseParams};
pub use camera::{project_pinhole, CameraParams, ViewSampler};
pub use fit::{fit_pose_to_2d, fitting_loss, FitLoss, FitResult, FitWeights, OptimizerConfig};
pub use generate::{generate_dataset, generate_samples, write_dataset, GenerateConfig, GenerateReport};
pub use prior::{GmmConfig, PosePrior, PreparedPrior};
pub use render::{render_stick_figure, Scene, SceneConfig, StickStyle};
pub use sample::{builtin_library, sample_pose, FilterConfig, PoseFilter};
pub use stats::{pose_distribution_stats, PoseDistributionStats};
