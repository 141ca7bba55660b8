//! Artifact I/O and measurement: checkpoint serialization, single-image
//! inference, the batch-1 latency benchmark and P6 pixmap rendering.

pub mod bench;
pub mod checkpoint;
pub mod infer;
pub mod ppm;

pub use bench::{benchmark, BenchReport, BenchRow};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use infer::{infer, InferOutput};
pub use ppm::{read_ppm, render_overlay, write_ppm};

use std::path::Path;

use crate::error::Result;

/// Writes a file atomically: temp file in the same directory, then rename.
/// Interrupted runs never leave a partially written artifact behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp{}",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
