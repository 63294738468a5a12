//! File formats, commands and threaded execution around `pflsim-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod executor;
pub mod formats;
pub mod history;

pub use error::{Error, Result};
