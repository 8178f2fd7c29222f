//! File formats, experiment runner and report writers around
//! [`memreuse_core`]. The `memreuse` binary is a thin layer over this crate.

pub mod bench;
pub mod config;
pub mod formats;
pub mod report;
pub mod runner;

use std::io::Write;
use std::path::{Path, PathBuf};

use memreuse_core::packing::OracleError;
use memreuse_core::sim::ConfigError;
use memreuse_core::workload::TraceError;

pub use config::ExperimentConfig;
pub use formats::FORMAT_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        source: formats::FormatError,
    },
    #[error("{}: {source}", path.display())]
    Config {
        path: PathBuf,
        source: config::ConfigFileError,
    },
    #[error("invalid simulation config: {0}")]
    Sim(#[from] ConfigError),
    #[error("trace generation: {0}")]
    Trace(#[from] TraceError),
    #[error("packing benchmark: {0}")]
    Oracle(#[from] OracleError),
    #[error("{0}")]
    Usage(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 when the inputs were valid but cannot be satisfied, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Infeasible(_)
            | Error::Trace(TraceError::LocalityInfeasible { .. })
            | Error::Oracle(OracleError::Infeasible) => 2,
            _ => 1,
        }
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::io(dir))?;
    tmp.write_all(bytes).map_err(Error::io(path))?;
    tmp.as_file().sync_all().map_err(Error::io(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}
