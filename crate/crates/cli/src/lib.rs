//! The `fmini` command line. Every command writes a [`manifest::RunManifest`]
//! into its output directory.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;

pub use cli::Cli;
pub use commands::dispatch;
