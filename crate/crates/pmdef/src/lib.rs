//! File formats, experiment configuration and the command-line pipeline
//! around `pmdef-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod idx;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
