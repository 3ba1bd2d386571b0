//! Configuration, subcommands and HTTP service behind the `rac` binary.

pub mod commands;
pub mod config;
pub mod service;

pub use config::AppConfig;
