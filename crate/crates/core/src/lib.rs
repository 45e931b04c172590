// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod copulas;
pub mod diagnostics;
pub mod error;
pub mod event_data;
pub mod frailty_posterior;
pub mod marginals;
pub mod mcem;
pub mod parallel;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
