//! The CLCE embedding file format.
//!
//! Layout: magic bytes `"CLCE"`, then little-endian `u32` version (1),
//! `u32` rows, `u32` cols, followed by `rows * cols` little-endian
//! 32-bit floats in row-major order. Readers up-cast to 64-bit.

use std::fs;
use std::path::Path;

use crate::tensor::{Matrix, Vector};

use super::{file_error, IoError};

pub const MAGIC: [u8; 4] = *b"CLCE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serializes a matrix, narrowing values to `f32`.
pub fn write_matrix(path: &Path, matrix: &Matrix) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for &v in matrix.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| file_error(path, e))
}

/// Deserializes a matrix, up-casting values to `f64`.
pub fn read_matrix(path: &Path) -> Result<Matrix, IoError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| file_error(path, e))?;
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(IoError::BadMagic { path: display });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(IoError::UnsupportedVersion {
            path: display,
            version,
        });
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows * cols;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(IoError::PayloadMismatch {
            path: display,
            expected,
            got: payload.len() / 4,
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::new(rows, cols, data)?)
}

/// Serializes a vector as a `1 x dim` matrix.
pub fn write_vector(path: &Path, vector: &Vector) -> Result<(), IoError> {
    let as_matrix = Matrix::new(1, vector.dim(), vector.as_slice().to_vec())?;
    write_matrix(path, &as_matrix)
}

/// Reads a `1 x dim` CLCE file back as a vector.
pub fn read_vector(path: &Path) -> Result<Vector, IoError> {
    let matrix = read_matrix(path)?;
    if matrix.rows() != 1 {
        return Err(IoError::NotAVector {
            path: path.display().to_string(),
            rows: matrix.rows() as u32,
            cols: matrix.cols() as u32,
        });
    }
    Ok(Vector::new(matrix.as_slice().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_representable_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.clce");
        let m = Matrix::new(2, 3, vec![0.5, -1.25, 2.0, 3.75, 0.0, -0.125]).unwrap();
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn round_trip_is_f32_lossy_not_worse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.clce");
        let v = Vector::new(vec![0.1, 0.2, std::f64::consts::PI]).unwrap();
        write_vector(&path, &v).unwrap();
        let back = read_vector(&path).unwrap();
        for (a, b) in v.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= a.abs() * f32::EPSILON as f64);
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.clce");
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_matrix(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_matrix(&path).unwrap_err(),
            IoError::PayloadMismatch {
                expected: 4,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not.clce");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            read_matrix(&path).unwrap_err(),
            IoError::BadMagic { .. }
        ));
    }

    #[test]
    fn matrix_is_not_a_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clce");
        write_matrix(&path, &Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            read_vector(&path).unwrap_err(),
            IoError::NotAVector { rows: 2, .. }
        ));
    }
}
