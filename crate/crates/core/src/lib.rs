//! Walsh spider diffusions on a star graph whose spinning measure depends on
//! time and on the local time at the junction.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

pub mod coefficients;
pub mod error;
pub mod io;
pub mod junction;
pub mod kernels;
pub mod pde;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod skew;
pub mod skorokhod;
pub mod stats;
pub mod verify;

pub use error::{Result, SpiderError};
pub use scalar::Scalar;

pub type JunctionPoint = junction::JunctionPoint<f64>;
pub type SpiderState = junction::SpiderState<f64>;
pub type SpiderPath = junction::SpiderPath<f64>;
pub type CoefficientSet = coefficients::CoefficientSet<f64>;
pub type PathEnsemble = simulator::PathEnsemble<f64>;
