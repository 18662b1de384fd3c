//! On-disk formats: the GVF raw video container, flat key=value run
//! configuration, and versioned binary model checkpoints. All writes go
//! through a temp file in the target directory followed by a rename, so a
//! crash never leaves a half-written artifact at the destination path.

pub mod checkpoint;
pub mod config;
pub mod gvf;

use std::io::Write as _;
use std::path::Path;

/// Writes `bytes` to `path` atomically (temp file + rename).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
