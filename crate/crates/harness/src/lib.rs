//! Command-line tools, file formats and the Monte Carlo replication engine
//! around `ddc-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod mc;
pub mod table;
pub mod verify;

pub use error::{HarnessError, Result};
