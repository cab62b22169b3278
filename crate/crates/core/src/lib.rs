pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod seeds;
pub mod selftest;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
