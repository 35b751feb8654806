//! Command-line and HTTP operational surface for the himes middleware.

pub mod cli;
pub mod config;
pub mod service;

pub use cli::run;
