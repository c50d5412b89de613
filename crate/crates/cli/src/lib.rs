//! Operator commands over a flat run configuration: train, evaluate, explain
//! and robustness. Each command is a library function so it can be driven from
//! tests; `main.rs` only parses arguments and maps errors to exit codes.

use std::path::Path;

use distraction_core::{Error, Result};

pub mod config;
pub mod inspect;
pub mod train;

pub use config::{DatasetSource, Mode, RunConfig};
pub use inspect::{cmd_compare, cmd_evaluate, cmd_explain, cmd_robustness, explain, heat_areas, DataSelection, Part};
pub use train::{cmd_train, train, TrainSummary};

/// Train/validation/test fractions used by every run and reproduced by `--split`.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

pub(crate) const EVAL_BATCH: usize = 64;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// 2 for configuration problems, 3 for unreadable or inconsistent data,
/// 4 for non-finite values during training, 1 for anything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::DegenerateSample(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => EXIT_NUMERIC,
        _ => 1,
    }
}

pub(crate) fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
