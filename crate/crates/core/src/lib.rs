#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objective;
pub mod theory;
pub mod variance;

pub use error::{LabError, Result};
