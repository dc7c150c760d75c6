//! Adaptive reduced-order models for parametrized nonlinear PDEs.

pub mod basis;
pub mod cavity;
pub mod deim;
pub mod elliptic;
pub mod error;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod sampling;

pub use error::{Error, Result};
