pub mod ablation;
pub mod cli;
pub mod config;
pub mod dandelion;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
