//! Command-line trainer, file formats and verification suites for
//! `splatrl-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod runlog;
pub mod verify;
