//! Stereo disparity estimation with iterative residual refinement, on the CPU.
//!
//! The crate bundles everything needed to train and evaluate the network at
//! desk scale: a minimal reverse-mode autodiff engine over dense NCHW
//! tensors, the stereo-specific correlation and warping operators, the
//! three-part network (shared feature stem, initial disparity estimation,
//! feature-constancy refinement), the training loop, dataset I/O (PFM,
//! 16-bit PNG disparity, a synthetic pair generator) and evaluation metrics.
//!
//! Core math is generic over the scalar type: `f32` for training, `f64` for
//! finite-difference gradient verification. Concrete aliases are exported at
//! the crate root.

pub mod checkpoint;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use ops::ConvSpec;
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
