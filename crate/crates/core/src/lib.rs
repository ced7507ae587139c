//! Conformal prediction sets from an ensemble of base predictors, built by
//! turning each model's nonconformity scores into e-values and merging them
//! with a symmetric aggregating function.

pub mod aggregate;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod error;
pub mod models;
pub mod primitives;
pub mod sacp;
pub mod scores;
pub mod validate;

pub use error::{Error, Result};
