//! Command-line pipeline around `umi-core`: a seeded run configuration, a
//! hashed on-disk container and one subcommand per processing stage.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod export;

pub use config::RunConfig;
pub use container::Container;
pub use error::{CliError, Result};

#[doc = include_str!("../../../book/src/container.md")]
mod chapter_container {}
