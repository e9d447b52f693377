// `!(x > 0.0)` is used on purpose so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod hidden;
pub mod hmm;
pub mod io;
pub mod maxent;
pub mod reduction;
pub mod seq;
pub mod transforms;

pub use error::{Error, Result};
pub mod synth;
