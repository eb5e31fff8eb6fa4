//! Library surface of the `geoplace` command-line tool, exposed so the
//! integration suite can drive the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;
