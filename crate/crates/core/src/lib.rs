pub mod ablation;
pub mod captioner;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod supervision;
pub mod temporal_map;
pub mod tensor;

pub use error::{Error, Result};
