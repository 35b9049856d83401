//! File formats, checkpoints and the command-line driver around `drgan-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod grid;
pub mod train_log;

pub use error::{Error, Result};
