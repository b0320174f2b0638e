//! Voxel-centric image-to-brain-response encoder.
//!
//! Every brain voxel is a learned embedding vector. A cross-attention block
//! uses that vector to pool multi-level image features over space, passes
//! the pooled features through per-level MLPs, and reads out one scalar per
//! (image, voxel) pair. Because the only per-voxel parameter is the
//! embedding, subjects with any number of voxels train together.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the 64-bit instantiation used for training.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod format;
pub mod model;
pub mod preprocess;
pub mod registry;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type FeatureTensor64 = backbone::FeatureTensor<f64>;
pub type Registry64 = registry::Registry<f64>;
pub type ModelState64 = train::engine::ModelState<f64>;
