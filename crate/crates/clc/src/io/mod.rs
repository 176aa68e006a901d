//! File formats: CLCE binary embeddings, JSONL turn manifests, and head
//! parameter checkpoints.

pub mod checkpoint;
pub mod clce;
pub mod jsonl;

pub use checkpoint::{load_head, save_head};
pub use clce::{read_matrix, read_vector, write_matrix, write_vector};
pub use jsonl::{read_turns, validate_manifest, write_turns, Diagnostic, Severity, TurnRecord};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a CLCE file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported CLCE version {version}")]
    UnsupportedVersion { path: String, version: u32 },
    #[error("{path}: header promises {expected} values but the payload holds {got}")]
    PayloadMismatch {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: expected a single-row vector, found {rows}x{cols}")]
    NotAVector { path: String, rows: u32, cols: u32 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn file_error(path: &std::path::Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Resolves a manifest-relative reference against the manifest's
/// directory; absolute references pass through.
pub fn resolve_ref(manifest_path: &std::path::Path, reference: &str) -> std::path::PathBuf {
    let candidate = std::path::Path::new(reference);
    if candidate.is_absolute() {
        return candidate.to_path_buf();
    }
    manifest_path
        .parent()
        .unwrap_or_else(|| std::path::Path::new("."))
        .join(candidate)
}
