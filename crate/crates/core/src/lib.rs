//! Bayesian transition model for multi-population indicator series with
//! regularized-horseshoe shock terms.

pub mod error;
pub mod fit;
pub mod horseshoe;
pub mod model;
pub mod numeric;
pub mod panel;
pub mod projection;
pub mod sampler;
pub mod spline;
pub mod validation;

pub use error::{Error, Result};
