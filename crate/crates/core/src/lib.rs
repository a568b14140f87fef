pub mod bench;
pub mod cg;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernel;
pub mod mcs;
pub mod mlp;
pub mod moe;

pub use error::{Error, Result};
