//! Host-side companion to `kws-core`: WAV and anchor files, checkpoints,
//! Speech Commands ingestion, the MFCC cache, TOML experiment configs and
//! the `kws` command-line tool.

pub mod anchor_file;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod gscd;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod wav;

pub use error::{Error, Result};
