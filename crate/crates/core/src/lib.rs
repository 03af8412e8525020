//! Mean-field variational neural networks sampled with flipout: training by
//! the reparameterised ELBO, Monte-Carlo predictive inference, pruning by
//! signal-to-noise ratio, and model/data I/O.
//!
//! Everything is generic over [`Scalar`] (`f32` for normal runs, `f64` for
//! verification); the aliases below name the common instantiations.

pub mod diagnostics;
pub mod error;
pub mod infer;
pub mod io;
pub mod layers;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{BnnError, Result};
pub use layers::{InitConfig, LayerSpec, ModelGraph, Noise, Sampling, VariationalParam};
pub use rng::{SeededRng, NoiseStream};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = ModelGraph<f32>;
pub type Graph64 = ModelGraph<f64>;
