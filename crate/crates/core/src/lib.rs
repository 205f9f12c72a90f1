//! Semantic layout to depth map generation with a windowed-attention GAN.
//!
//! Everything runs on a small `f64` tensor engine with reverse-mode
//! differentiation ([`autograd`]), so every layer can be checked against
//! finite differences.

pub mod adversarial;
pub mod attention;
pub mod autograd;
pub mod caf;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod normalization;
pub mod param;
pub mod rng;
pub mod suite;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use param::{Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{InitSpec, Tensor};
