// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod registry;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
