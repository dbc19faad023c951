//! File formats, dataset IO and the command line driver around
//! [`ifaseg_core`].
//!
//! * [`config`]: flat TOML run configuration and synthetic domain specs.
//! * [`checkpoint`]: safetensors archive of encoder parameters plus a
//!   metadata record.
//! * [`dataset`]: directory-backed datasets and the matching writer.
//! * [`report`]: evaluation and Gestalt reports, JSON and plain tables.
//! * [`steplog`]: per-step JSON lines log of adaptor traces.
//! * [`commands`]: the subcommands behind the `ifaseg` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod steplog;

pub use error::{Error, Result};
