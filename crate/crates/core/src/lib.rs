// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod identify;
pub mod local;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{PirError, Result};
