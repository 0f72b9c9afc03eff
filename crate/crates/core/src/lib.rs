// `!(x > 0.0)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod lipschitz;
pub mod model;
pub mod patching;
pub mod reservoir;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
