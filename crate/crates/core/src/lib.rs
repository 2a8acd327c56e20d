//! Federated multi-modal beam selection at desk scale.
//!
//! The crate simulates a base station serving vehicles that learn a shared
//! beam-selection model from GPS / RGB / LiDAR observations under label and
//! modality imbalance. It provides:
//!
//! - a minimal reverse-mode differentiable core for dense + batch-norm
//!   networks ([`net`], [`loss`], [`adam`]);
//! - the multi-branch beam model with zero-fill feature fusion ([`model`]);
//! - a zero-shot data generator that inverts batch-norm statistics of the
//!   global model to synthesize labeled samples or missing-modality features
//!   ([`generator`]);
//! - imbalance metrics and skewed partition builders ([`imbalance`]);
//! - synthetic V2X scenarios with geometric mmWave channels, DFT codebooks
//!   and sum-rate evaluation ([`scenario`]);
//! - federation protocols (branch-wise, FedAvg, FLASH, centralized) with
//!   communication accounting ([`federation`]).
//!
//! All numerics are generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the aliases below fix the common choice.

pub mod adam;
pub mod config;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod generator;
pub mod harness;
pub mod imbalance;
pub mod loss;
pub mod model;
pub mod net;
pub mod scalar;
pub mod scenario;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default-precision aliases used by the CLI and experiment harness.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type DenseNet64 = net::DenseNet<f64>;
pub type MultiModalNet64 = model::MultiModalNet<f64>;
