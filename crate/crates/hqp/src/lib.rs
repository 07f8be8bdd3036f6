//! Files, runs and the command line around `hqp-core`.
//!
//! Datasets are JSON-lines files, proposal fixtures are CSV, checkpoints are
//! a checksummed binary format and run configurations are TOML. The `run`
//! module trains and evaluates from a [`config::RunConfig`]; `ablate`
//! repeats runs over noise levels, seeds and component switches.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod run;
pub mod table;

pub use error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
