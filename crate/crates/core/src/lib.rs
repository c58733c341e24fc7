//! Blind quality enhancement of compressed dynamic point-cloud attributes.
//!
//! The pipeline aligns neighbouring frames onto the target geometry by
//! recolouring, fuses them with cross attention, extracts features with
//! densely connected neighbourhood-attention stages and blends shallow,
//! medium and deep features by an estimated distortion level.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod neighborhood;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod ply;
pub mod rmc;
pub mod tensor;
pub mod toy;
pub mod training;

pub use data::{make_window, Component, PointCloudFrame, TemporalWindow, Voxel};
pub use error::{Error, Result};
pub use model::{bqe_forward, qe_forward, BqeParams, ModelConfig, QeParams, QualityVector};
pub use tensor::Matrix;
