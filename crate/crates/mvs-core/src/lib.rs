//! Multi-view stereo depth estimation engine.
//!
//! The pipeline warps per-view feature pyramids onto plane-sweep depth
//! hypotheses in a reference view, fuses the warped features across views
//! with cross-attention along epipolar lines (or a variance baseline),
//! regularizes the resulting cost volume, and reads out depth plus
//! confidence. Four cascade stages refine the estimate coarse to fine with
//! inverse-depth sampling. Depth distributions can be compared with an
//! entropy-regularized optimal-transport distance that has a closed-form
//! 1-D Wasserstein oracle. A synthetic ray-cast scene generator with
//! analytic ground truth backs the test and evaluation tooling.
//!
//! With the default `parallel` feature, per-pixel work is distributed with
//! rayon; results are bit-identical for any worker count. Building with
//! `--no-default-features` swaps in a sequential fallback with the same
//! public API.

pub mod camera;
pub mod error;
pub mod features;
pub mod fpn;
pub mod fusion;
pub mod hypothesis;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod ot;
pub(crate) mod par;
pub mod pipeline;
pub mod regularizer;
pub mod synth;
pub mod transformer;

pub use camera::CameraModel;
pub use error::{Error, Result};
pub use hypothesis::DepthHypothesisSet;
pub use pipeline::{DepthMap, PipelineConfig, PipelineOutput};
