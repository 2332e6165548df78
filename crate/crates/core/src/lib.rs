//! Two-stream guided-transformer video classifier for distorted fisheye
//! clips, plus the synthetic paired-clip benchmark it is exercised on.
//!
//! The crate is organized around six parts:
//! - [`tensor`], [`ops`], [`params`]: a minimal differentiable-operations
//!   kernel (dense 4D tensors, analytic backward passes, SGD).
//! - [`fisheye`]: equidistant fisheye camera model and frame warping.
//! - [`gt`]: the guided transformer module — localization network, grid
//!   generator, and differentiable bilinear sampler.
//! - [`model`]: the miniature two-stream 3D conv network, its losses, and
//!   training/inference procedures.
//! - [`data`]: procedural generator and loader for paired flat/fisheye
//!   labeled clips with cross-subject splits.
//! - [`cli`]: the experiment harness (data generation, training, evaluation,
//!   ablation suite, gradient checks, warp demo).

pub mod blob;
pub mod bmp;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fisheye;
pub mod gradcheck;
pub mod metrics;
pub mod gt;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims4, GradPair, Scalar, Tensor4};
