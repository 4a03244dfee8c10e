//! Deterministic CPU engine for dynamic Gaussian-splatting maps built from
//! posed RGB-D sequences.

pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frame;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod io;
pub mod kdtree;
pub mod manage;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod protocol;
pub mod render;
pub mod sh;
pub mod sim;

pub use config::{FlowMode, LearningRates, ManageConfig, OptimizerKind};
pub use error::{Error, Result};
pub use gaussian::{build_covariance, Gaussian, GaussianKind, GaussianMap, FLATTEN_EPS};
pub use geometry::{CameraModel, Pose};
pub use image::{DepthImage, FlowImage, Image, MaskImage, RgbImage};
pub use motion::{query_mean, update_spline, MotionSpline};
pub use sh::eval_sh;
pub use render::{render, render_backward, render_splats, RenderOutput, RenderSettings, SplatGrad};
pub use flow::{lift_gs_flow, segment_motion, DepthSampler, GsFlowField};
pub use frame::FrameBundle;
