//! File formats, metrics, benchmarking, and command implementations for
//! the `lorakit` binary.
//!
//! The numeric substance lives in `lorakit-core`; this crate owns
//! everything that touches a clock or the filesystem: the single-file
//! checkpoint format, flat `key = value` run configs, CSV/PGM emitters,
//! the inference-latency benchmark, and the subcommand glue.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod metrics;
pub mod presets;
pub mod runconfig;

pub use error::{CliError, Result};
