pub mod collection;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod evalkit;
pub mod expertgen;
pub mod nn;
pub mod rfsgpn;
pub mod trainer;
pub mod tspn;

pub use error::{Error, Result};
