//! Files, timing and the command line around `usptrack-core`.
//!
//! On-disk conventions: frame sequences in `frame_%05d.png` directories,
//! `USPTRAJ` trajectory files, `USPPTS` point files, `USPCKPT` checkpoints
//! and a TOML run configuration.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod plot;
pub mod report;
pub mod sequence;

pub use usptrack_core as core;

use std::path::Path;

use usptrack_core::Error;

/// Map an I/O failure on `path` to the crate error type.
pub(crate) fn io_error(path: &Path, e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(format!("{}: {e}", path.display())),
    }
}
