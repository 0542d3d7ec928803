pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod occgrid;
pub mod tokenizer;
pub mod worldmodel;

pub use error::{Error, Result};
