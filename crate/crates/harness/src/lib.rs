//! Training, evaluation and the experiment grids built on `maco-core`.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod train;
pub mod viz;

pub use config::TrainConfig;
pub use error::{HarnessError, Result};
