//! Battery life prediction: data model, preprocessing, a small differentiation
//! kernel, cycle-token networks, evaluation protocols and a synthetic fleet generator.

pub mod battery;
pub mod diffkernel;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod models;
pub mod preprocess;
pub mod scalar;
pub mod seed;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Double-precision tensor used for training and checkpoints.
pub type Tensor = diffkernel::Tensor2D<f64>;
pub type Tensor32 = diffkernel::Tensor2D<f32>;
pub type Params = diffkernel::ParameterSet<f64>;
pub type Params32 = diffkernel::ParameterSet<f32>;
pub type Output = models::ModelOutput<f64>;
