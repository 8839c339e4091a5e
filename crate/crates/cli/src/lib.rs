//! Command implementations behind the `nerf-poison` binary.
//!
//! Each command validates its whole configuration before touching the
//! filesystem, writes into a staging location next to `--out`, and only
//! moves the result into place once everything succeeded.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
mod staging;

pub use error::{CliError, ErrorKind};
