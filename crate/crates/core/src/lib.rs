pub mod audio;
pub mod bench;
pub mod bitwise;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod expert;
pub mod io_util;
pub mod moe;
pub mod nn;
pub mod quant;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
