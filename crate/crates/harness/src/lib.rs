//! Experiment runner, verification suites and plotting for `popest`.
//!
//! The `popest` binary is a thin clap front end over these modules.

pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod suites;

pub use config::Config;
pub use error::{HarnessError, Result};
