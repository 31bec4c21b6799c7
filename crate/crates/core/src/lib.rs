//! Physics-guided learning of gridded spatiotemporal fields.
//!
//! A coordinate network `f(x, y, t)` is fitted to gridded data together with
//! a linear PDE over a library of derivative terms plus a learned forcing
//! network. The fitted surrogate can be sampled at any resolution, and the
//! learned equation can be used as an auxiliary loss for a forecaster.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases at the crate root fix `f64`.

pub mod autodiff;
mod binio;
pub mod data_io;
pub mod error;
pub mod field_model;
pub mod finite_difference;
pub mod forecasting;
pub mod metrics;
pub mod pde_library;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type GridField = data_io::GridField<f64>;
pub type FieldNet = field_model::FieldNet<f64>;
pub type DerivativeBundle = field_model::DerivativeBundle<f64>;
pub type EquationSystem = pde_library::EquationSystem;
