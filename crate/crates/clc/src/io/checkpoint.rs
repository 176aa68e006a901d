//! Head parameter checkpoints: one CLCE file per tensor plus a JSON
//! manifest naming them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::heads::HeadParams;
use crate::tensor::{Matrix, Vector};

use super::{clce, file_error, resolve_ref, IoError};

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    k: usize,
    h: usize,
    d: usize,
    dropout_rate: f64,
    rng_seed: u64,
    /// Tensor name to file path, relative to this manifest.
    tensors: BTreeMap<String, String>,
}

/// Writes `<name>.json` plus one `<name>.<tensor>.clce` per parameter
/// tensor into `dir`, returning the manifest path. Vectors are stored
/// as single-row matrices.
pub fn save_head(dir: &Path, name: &str, params: &HeadParams) -> Result<PathBuf, IoError> {
    let as_row = |v: &Vector| {
        Matrix::new(1, v.dim(), v.as_slice().to_vec()).expect("vector reshapes to one row")
    };
    let tensors: [(&str, Matrix); 6] = [
        ("w1", params.w1.clone()),
        ("b1", as_row(&params.b1)),
        ("ln_gamma", as_row(&params.ln_gamma)),
        ("ln_beta", as_row(&params.ln_beta)),
        ("w2", params.w2.clone()),
        ("b2", as_row(&params.b2)),
    ];
    let mut manifest = CheckpointManifest {
        k: params.input_dim(),
        h: params.hidden_dim(),
        d: params.output_dim(),
        dropout_rate: params.dropout_rate,
        rng_seed: params.rng_seed,
        tensors: BTreeMap::new(),
    };
    for (tensor_name, matrix) in &tensors {
        let file_name = format!("{name}.{tensor_name}.clce");
        clce::write_matrix(&dir.join(&file_name), matrix)?;
        manifest.tensors.insert(tensor_name.to_string(), file_name);
    }
    let manifest_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| file_error(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Loads a checkpoint written by [`save_head`].
pub fn load_head(manifest_path: &Path) -> Result<HeadParams, IoError> {
    let display = manifest_path.display().to_string();
    let text = fs::read_to_string(manifest_path).map_err(|e| file_error(manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| IoError::Manifest {
            path: display.clone(),
            message: e.to_string(),
        })?;

    let tensor = |name: &str| -> Result<Matrix, IoError> {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| IoError::Manifest {
                path: display.clone(),
                message: format!("missing tensor {name:?}"),
            })?;
        clce::read_matrix(&resolve_ref(manifest_path, file))
    };
    let row_vector = |name: &str| -> Result<Vector, IoError> {
        let m = tensor(name)?;
        if m.rows() != 1 {
            return Err(IoError::Manifest {
                path: display.clone(),
                message: format!(
                    "tensor {name:?} should be a single row, got {}x{}",
                    m.rows(),
                    m.cols()
                ),
            });
        }
        Ok(Vector::new(m.as_slice().to_vec())?)
    };

    HeadParams::new(
        tensor("w1")?,
        row_vector("b1")?,
        row_vector("ln_gamma")?,
        row_vector("ln_beta")?,
        tensor("w2")?,
        row_vector("b2")?,
        manifest.dropout_rate,
        manifest.rng_seed,
    )
    .map_err(|e| IoError::Manifest {
        path: display,
        message: e.to_string(),
    })
}
