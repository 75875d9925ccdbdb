//! Bilinear-projection neural networks.
//!
//! A bilinear projection replaces a dense `D x K` weight matrix with two
//! small factors acting on a matrix-shaped input, `h = phi(w1 x w2 + b)`.
//! This crate implements the projection, the layers built from it (dense,
//! convolution, embedding, LSTM), training, cost analysis, numerical
//! oracles and dataset plumbing. The core is generic over [`Scalar`]
//! (`f64` or `f32`).

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod network;
pub mod optim;
pub mod param;
pub mod projections;
pub mod scalar;
pub mod tensor;

pub use config::ArchitectureConfig;
pub use error::{Error, Result};
pub use network::Model;
pub use param::{Param, ParamKind};
pub use scalar::Scalar;
pub use tensor::{Rng, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;

pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
