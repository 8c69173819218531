// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod volume_io;

pub use error::{Error, FormatError, Result};
