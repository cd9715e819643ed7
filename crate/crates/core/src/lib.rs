//! Self-supervised monocular depth from rectified stereo pairs.
//!
//! A student network predicts left-frame disparity from the right view and
//! is trained by warping the right view into the left. A backward network
//! closes the cycle, the cycle residual feeds a refinement network, and the
//! refined disparity is distilled back into the student.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine
//! ([`autodiff`]) over dense `N×C×H×W` tensors.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod tensor;
pub mod warp;

pub use autodiff::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::{compute_metrics, EvalReport};
pub use networks::{NetworkBundle, NetworkConfig, ParamGroup};
pub use tensor::{Real, Shape, Tensor};
