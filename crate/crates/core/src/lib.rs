pub mod augment;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
