#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod conserve;
pub mod error;
pub mod experiments;
pub mod problems;
pub mod stepper;
pub mod tableau;

pub use error::{Error, Result};
