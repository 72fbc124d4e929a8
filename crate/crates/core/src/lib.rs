//! Desk-scale super-resolution stack: a dual-branch network pairing linear
//! RWKV attention with a convolutional detail path, fused per group, trained
//! with an L1 + stationary-wavelet objective on synthetic imagery, and
//! verified by gradient checks and analytic oracles.

pub mod config;
pub mod degrade;
pub mod detail;
pub mod error;
pub mod fusion;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod nn;
pub mod rwkv;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
