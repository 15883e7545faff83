// negated comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod aggregation;
pub mod clustering;
pub mod cost;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod param;
pub mod personalization;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used by the harness.
pub type ParamVector = param::ParamVec<f64>;
pub type Update = param::ClientUpdate<f64>;
pub type Updates = param::UpdateSet<f64>;
