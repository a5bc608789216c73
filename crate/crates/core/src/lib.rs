//! Fracture-aware upscaling of hydraulic conductivity.
//!
//! The crate generates discrete fracture networks and correlated tensor
//! fields, solves coupled matrix/fracture Darcy flow, homogenizes blocks to
//! equivalent tensors and trains a convolutional surrogate that replaces the
//! block solves.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod dfm_solver;
pub mod error;
pub mod frac_geom;
pub mod geometry;
pub mod homogenizer;
pub mod linalg;
pub mod metrics;
pub mod random_field;
pub mod rasterizer;
pub mod rng;
pub mod scalar;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Conductivity tensor in m/s.
pub type Tensor = SymTensor2<f64>;
pub use tensor::SymTensor2;

/// Surrogate with 32-bit parameters as stored in checkpoints.
pub type SurrogateModel = surrogate::Surrogate<f32>;

/// Discretization label recorded in every generated artifact.
pub const SCHEME: &str = "conforming P1 matrix triangles with embedded P1 fracture elements";
