//! `.emb` matrices: `EMB1` | rows u64 LE | dim u64 LE | rows×dim f32 LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use cbm_core::{EmbeddingMatrix, Matrix};

use crate::error::{Result, ToolError};

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER: u64 = 20;

/// Writes `m` after validating it; a 0-row or non-finite matrix is refused
/// before the file is touched.
pub fn write_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    m.validate()?;
    let mut buf = Vec::with_capacity(HEADER as usize + 4 * m.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| ToolError::storage(path, e))?;
    f.write_all(&buf).map_err(|e| ToolError::storage(path, e))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| ToolError::storage(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ToolError::Format {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER as usize {
        return Err(ToolError::Size {
            path: path.to_path_buf(),
            expected: HEADER,
        });
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER));
    let Some(expected) = expected.filter(|&e| e == bytes.len() as u64) else {
        return Err(ToolError::Size {
            path: path.to_path_buf(),
            expected: expected.unwrap_or(u64::MAX),
        });
    };
    let data: Vec<f32> = bytes[HEADER as usize..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tag = path.display().to_string();
    let m = EmbeddingMatrix::new(rows as usize, dim as usize, data, tag)?;
    m.validate()?;
    Ok(m)
}

/// Reads an embedding file for use as data: zero rows are rejected and rows
/// are L2-normalized.
pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    let m = read_matrix(path)?;
    Ok(m.normalize_rows()?.to_matrix())
}

pub fn write_f64(m: &Matrix, path: &Path, tag: &str) -> Result<()> {
    write_matrix(&EmbeddingMatrix::from_matrix(m, tag), path)
}

pub fn read_f64(path: &Path) -> Result<Matrix> {
    Ok(read_matrix(path)?.to_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.emb");
        let m = EmbeddingMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], "t").unwrap();
        write_matrix(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 4 + 8 + 8 + 24);
        assert_eq!(&bytes[..4], b"EMB1");
        let back = read_matrix(&p).unwrap();
        assert_eq!(back.data(), m.data());
        assert_eq!((back.rows(), back.dim()), (2, 3));
    }

    #[test]
    fn refuses_bad_matrices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.emb");
        let empty = EmbeddingMatrix::new(0, 3, vec![], "t").unwrap();
        assert_eq!(write_matrix(&empty, &p).unwrap_err().to_string(), "empty matrix rejected");
        let nan = EmbeddingMatrix::new(2, 1, vec![0.0, f32::NAN], "t").unwrap();
        assert_eq!(write_matrix(&nan, &p).unwrap_err().to_string(), "non-finite value at row 1");
        assert!(!p.exists());
    }

    #[test]
    fn header_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.emb");
        let mut bytes = b"EMB9".to_vec();
        bytes.extend_from_slice(&[0; 16]);
        fs::write(&p, &bytes).unwrap();
        assert!(read_matrix(&p).unwrap_err().to_string().ends_with("unrecognized format"));

        let mut bytes = b"EMB1".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&[0; 12]);
        fs::write(&p, &bytes).unwrap();
        assert!(read_matrix(&p)
            .unwrap_err()
            .to_string()
            .ends_with("size mismatch: expected 44 bytes"));
    }

    #[test]
    fn load_rejects_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.emb");
        let m = EmbeddingMatrix::new(2, 2, vec![3.0, 4.0, 0.0, 0.0], "t").unwrap();
        write_matrix(&m, &p).unwrap();
        assert_eq!(
            load_embeddings(&p).unwrap_err().to_string(),
            "degenerate embedding at row 1"
        );
    }
}
