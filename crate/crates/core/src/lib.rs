// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
