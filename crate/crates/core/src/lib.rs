// Index loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod accounting;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod model_io;
pub mod nn;
pub mod projection;
pub mod trainer;

pub use error::{Error, Result};
