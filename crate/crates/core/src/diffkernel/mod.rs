//! Minimal reverse-mode kernel: dense affine maps, layer normalization, rectifier,
//! dropout, MSE, Adam, finite-difference gradient checking and checkpoints.
//!
//! There is no tape. Each layer's forward returns what its backward needs and the
//! models chain the backward calls by hand.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, Param, ParameterSet};
pub use tensor::Tensor2D;
