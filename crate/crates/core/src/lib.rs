// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod density;
pub mod dirichlet;
pub mod error;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod rng;
pub mod run;
pub mod trainer;

pub use error::{GemError, Result};
