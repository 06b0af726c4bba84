use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Row-major stack of embedding vectors in the joint space, stored as `f32`.
///
/// Norms and dot products are accumulated in `f64`; [`to_matrix`] hands the
/// numerical modules a double-precision copy.
///
/// [`to_matrix`]: EmbeddingMatrix::to_matrix
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    /// Free-form provenance, e.g. the file it was loaded from.
    pub tag: String,
}

impl EmbeddingMatrix {
    /// Checks only that `data` has `rows × dim` entries; see [`validate`].
    ///
    /// [`validate`]: EmbeddingMatrix::validate
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, tag: impl Into<String>) -> Result<Self> {
        if rows.checked_mul(dim) != Some(data.len()) {
            return Err(Error::shape(alloc::format!(
                "{} values for {rows} rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            tag: tag.into(),
        })
    }

    pub fn from_matrix(m: &Matrix, tag: impl Into<String>) -> Self {
        Self {
            rows: m.rows(),
            dim: m.cols(),
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
            tag: tag.into(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_norm(&self, r: usize) -> f64 {
        libm::sqrt(self.row(r).iter().map(|&v| f64::from(v) * f64::from(v)).sum())
    }

    /// Non-empty and every value finite.
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.dim == 0 {
            return Err(Error::EmptyMatrix);
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.dim,
            });
        }
        Ok(())
    }

    /// Rejects rows that are exactly zero.
    pub fn check_nonzero_rows(&self) -> Result<()> {
        match (0..self.rows).find(|&r| self.row(r).iter().all(|&v| v == 0.0)) {
            Some(row) => Err(Error::DegenerateRow { row }),
            None => Ok(()),
        }
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&self) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let n = self.row_norm(r);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateRow { row: r });
            }
            data.extend(self.row(r).iter().map(|&v| (f64::from(v) / n) as f32));
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data,
            tag: self.tag.clone(),
        })
    }
}

/// In-place L2 normalization of the rows of an `f64` matrix.
pub fn normalize_matrix_rows(m: &mut Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = crate::linalg::norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use alloc::string::ToString;

    #[test]
    fn three_four_five() {
        let m = EmbeddingMatrix::new(1, 2, vec![3.0, 4.0], "t").unwrap();
        let n = m.normalize_rows().unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn unit_row_unchanged() {
        let m = EmbeddingMatrix::new(1, 3, vec![0.0, 1.0, 0.0], "t").unwrap();
        assert_eq!(m.normalize_rows().unwrap().row(0), m.row(0));
    }

    #[test]
    fn zero_row_rejected() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], "t").unwrap();
        assert_eq!(m.normalize_rows(), Err(Error::DegenerateRow { row: 1 }));
        assert_eq!(m.check_nonzero_rows(), Err(Error::DegenerateRow { row: 1 }));
        assert_eq!(
            Error::DegenerateRow { row: 1 }.to_string(),
            "degenerate embedding at row 1"
        );
    }

    #[test]
    fn validation_messages() {
        let empty = EmbeddingMatrix::new(0, 3, vec![], "t").unwrap();
        assert_eq!(empty.validate().unwrap_err().to_string(), "empty matrix rejected");
        let nan = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, f32::NAN, 1.0], "t").unwrap();
        assert_eq!(nan.validate().unwrap_err().to_string(), "non-finite value at row 1");
        assert!(EmbeddingMatrix::new(2, 2, vec![1.0], "t").is_err());
    }

    fn nonzero_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (1usize..6, 1usize..9).prop_flat_map(|(rows, dim)| {
            proptest::collection::vec(
                proptest::collection::vec(-100.0f32..100.0, dim)
                    .prop_filter("nonzero row", |r| r.iter().any(|v| v.abs() > 1e-3)),
                rows,
            )
            .prop_map(move |rs| {
                EmbeddingMatrix::new(rows, dim, rs.concat(), "prop").unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in nonzero_matrix()) {
            let once = m.normalize_rows().unwrap();
            let twice = once.normalize_rows().unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            for r in 0..once.rows() {
                prop_assert!((once.row_norm(r) - 1.0).abs() <= 1e-6);
                // Direction preserved.
                let cos: f64 = m.row(r).iter().zip(once.row(r))
                    .map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>() / m.row_norm(r) / once.row_norm(r);
                prop_assert!((cos - 1.0).abs() <= 1e-6);
            }
        }
    }
}
