//! Efficient guided attention for multi-camera feature fusion.
//!
//! Each camera view attends only to its neighboring views (and optionally its
//! own previous frames), with an optional learned projection that fixes the
//! key/value length. Alongside the attention kernels the crate carries a
//! small reverse-mode tape for gradient checks, the self-supervised depth
//! losses, the standard depth metrics and an analytic cost model.

pub mod attention;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod rig;
pub mod tensor;

pub use attention::{
    ega_block, forward_rig, forward_view, guided_attention, project_qkv, reduce_kv, AttentionOptions,
    AttentionOutput, EgaParams, NormMode, NormParams, ParamStore, ScoreScale,
};
pub use costmodel::{cost_ega, cost_joint_selfattn, scaling_curve, CostMetric, CostReport, Stage, StageFlops, SweepAxis};
pub use error::{EgaError, Result};
pub use losses::{photometric_loss, smoothness_loss, ssim, total_loss, DepthMap, ImagePlane, Raster};
pub use metrics::{evaluate, median_scale, EvalReport};
pub use rig::{neighbor_stack, temporal_stack, FeatureBank, FeatureMap, Preset, RigConfig, ScaleConfig};
pub use tensor::Matrix;
