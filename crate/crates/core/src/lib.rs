//! Numeric substrate and test-time adaptation engine.
//!
//! The crate is organized in three tiers:
//!
//! - a minimal neural-network core (dense/relu/normalization layers, forward
//!   with cached activations, exact analytic backward, a finite-difference
//!   gradient oracle, SGD with momentum), generic over the scalar type;
//! - the adaptation engine: model splitting into shallow layers plus a frozen
//!   source branch and a trainable adapt branch, entropy-thresholded sample
//!   selection, the iterative re-selection loop with dual objectives, branch
//!   fusion, and entropy-minimization baselines;
//! - synthetic benchmark generation: separable Gaussian source tasks, source
//!   model training, covariate shifts with severity levels, and the stream
//!   regimes used for evaluation.
//!
//! All engine and benchmark code runs on the `f64` aliases below.

pub mod backward;
mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod scalar;

pub mod data;
pub mod tta;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Default-precision aliases. All adaptation and benchmark code uses these;
/// the generic types remain available for `f32` callers.
pub type Mat = matrix::Matrix<f64>;
pub type Mat32 = matrix::Matrix<f32>;
pub type Net = net::Network<f64>;
pub type Net32 = net::Network<f32>;
pub type LayerF = layer::Layer<f64>;
pub type TraceF = net::ForwardTrace<f64>;
