//! Persistence: checkpoints, run configuration and CSV tables.

mod checkpoint;
mod config;
mod table;

pub use checkpoint::{load_scorenet, scorenet_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{RunConfig, KEYS};
pub use table::{fmt_real, read_matrix_csv, CsvTable};

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
