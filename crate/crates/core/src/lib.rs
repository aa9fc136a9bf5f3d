pub mod attention;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod tokenizer;

pub use error::{Error, Result};
