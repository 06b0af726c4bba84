//! Sparse decomposition of image embeddings over a concept bank by orthogonal
//! matching pursuit. Only the fitted part `Î = Σ w_j c_j` is passed on; the
//! residue is reported but never used downstream.

use alloc::vec;
use alloc::vec::Vec;

use crate::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix, OrthoBasis};

pub const DEFAULT_SPARSITY: usize = 32;
pub const DEFAULT_STOP_TOL: f64 = 1e-6;

/// Concept embeddings must have unit norm within this tolerance.
const UNIT_TOL: f64 = 1e-6;
/// Atoms whose part outside the current support span is this small (relative)
/// are treated as dependent and skipped.
const DEPENDENT_TOL: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmpConfig {
    /// Maximum number of concepts per image (`n`).
    pub sparsity: usize,
    /// Stop early once `‖ε‖ ≤ stop_tol · ‖I‖`.
    pub stop_tol: f64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        Self {
            sparsity: DEFAULT_SPARSITY,
            stop_tol: DEFAULT_STOP_TOL,
        }
    }
}

impl OmpConfig {
    pub fn with_sparsity(sparsity: usize) -> Self {
        Self {
            sparsity,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Bank indices in pick order.
    pub support: Vec<usize>,
    /// Least-squares coefficients aligned with `support`.
    pub coefficients: Vec<f64>,
    /// `‖I − Î‖₂`
    pub residual_norm: f64,
    /// `Î = Σ w_j c_j`
    pub reconstructed: Vec<f64>,
    /// Residual norm before the first pick and after each pick.
    pub residual_history: Vec<f64>,
}

impl SparseCode {
    fn empty(dim: usize) -> Self {
        Self {
            support: Vec::new(),
            coefficients: Vec::new(),
            residual_norm: 0.0,
            reconstructed: vec![0.0; dim],
            residual_history: vec![0.0],
        }
    }

    /// Coefficients scattered over all `m` concepts of the bank.
    pub fn dense(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (&j, &w) in self.support.iter().zip(&self.coefficients) {
            out[j] = w;
        }
        out
    }

    /// `I − Î`
    pub fn residual(&self, image: &[f64]) -> Vec<f64> {
        image
            .iter()
            .zip(&self.reconstructed)
            .map(|(a, b)| a - b)
            .collect()
    }
}

fn check_bank(bank: &ConceptBank) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::config("concept bank is empty"));
    }
    for (j, c) in bank.embeddings().row_iter().enumerate() {
        let n = norm(c);
        if !((n - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::config(alloc::format!(
                "concept {j} has norm {n}, expected a unit-normalized bank"
            )));
        }
    }
    Ok(())
}

/// Decomposes one image embedding into at most `cfg.sparsity` concepts.
pub fn omp_decompose(image: &[f64], bank: &ConceptBank, cfg: &OmpConfig) -> Result<SparseCode> {
    check_bank(bank)?;
    omp_unchecked(image, bank, cfg)
}

fn omp_unchecked(image: &[f64], bank: &ConceptBank, cfg: &OmpConfig) -> Result<SparseCode> {
    if cfg.sparsity == 0 {
        return Err(Error::config("sparsity must be at least 1"));
    }
    let d = bank.dim();
    if image.len() != d {
        return Err(Error::shape(alloc::format!(
            "image of dimension {} against concepts of dimension {d}",
            image.len()
        )));
    }
    let image_norm = norm(image);
    if image_norm == 0.0 {
        return Ok(SparseCode::empty(d));
    }

    let m = bank.len();
    let mut excluded = vec![false; m];
    let mut basis = OrthoBasis::new(d);
    let mut support = Vec::new();
    let mut residual = image.to_vec();
    let mut history = vec![image_norm];
    let mut residual_norm = image_norm;

    while support.len() < cfg.sparsity && residual_norm > cfg.stop_tol * image_norm {
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in bank.embeddings().row_iter().enumerate() {
            if excluded[j] {
                continue;
            }
            let corr = dot(&residual, c).abs();
            if best.is_none_or(|(_, b)| corr > b) {
                best = Some((j, corr));
            }
        }
        let Some((j, corr)) = best else { break };
        // Residual already orthogonal to every remaining atom.
        if corr <= 1e-14 * image_norm {
            break;
        }
        excluded[j] = true;
        match basis.push(bank.embedding(j), DEPENDENT_TOL) {
            Ok(()) => {}
            Err(Error::Dependent { .. }) => continue,
            Err(e) => return Err(e),
        }
        support.push(j);
        residual = basis.residual(image);
        residual_norm = norm(&residual);
        history.push(residual_norm);
    }

    let coefficients = basis.solve(image);
    let mut reconstructed = vec![0.0; d];
    for (&j, &w) in support.iter().zip(&coefficients) {
        axpy(w, bank.embedding(j), &mut reconstructed);
    }
    let residual_norm = libm::sqrt(
        image
            .iter()
            .zip(&reconstructed)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    );
    Ok(SparseCode {
        support,
        coefficients,
        residual_norm,
        reconstructed,
        residual_history: history,
    })
}

/// Decomposes every row of `images`, returning the codes and the stacked
/// reconstructions `Î`.
///
/// Zero rows are rejected.
pub fn decompose_batch(
    images: &Matrix,
    bank: &ConceptBank,
    cfg: &OmpConfig,
) -> Result<(Vec<SparseCode>, Matrix)> {
    check_bank(bank)?;
    let mut codes = Vec::with_capacity(images.rows());
    let mut recon = Matrix::zeros(images.rows(), images.cols());
    for (r, row) in images.row_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateRow { row: r });
        }
        let code = omp_unchecked(row, bank, cfg).map_err(|e| e.at_row(r))?;
        recon.row_mut(r).copy_from_slice(&code.reconstructed);
        codes.push(code);
    }
    Ok((codes, recon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_bank(d: usize) -> ConceptBank {
        ConceptBank::unnamed(Matrix::identity(d))
    }

    #[test]
    fn single_atom_exact() {
        let bank = axis_bank(5);
        let mut image = vec![0.0; 5];
        image[3] = 2.5;
        let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(1)).unwrap();
        assert_eq!(code.support, vec![3]);
        assert!((code.coefficients[0] - 2.5).abs() < 1e-12);
        assert!(code.residual_norm <= 1e-7);
    }

    #[test]
    fn orthonormal_two_atoms() {
        let bank = axis_bank(6);
        let image = [0.0, 1.0, 0.0, 0.0, 0.5, 0.0];
        let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(2)).unwrap();
        assert_eq!(code.support, vec![1, 4]);
        assert!((code.coefficients[0] - 1.0).abs() < 1e-7);
        assert!((code.coefficients[1] - 0.5).abs() < 1e-7);
        assert_eq!(code.dense(6), vec![0.0, 1.0, 0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_image_gives_empty_code() {
        let code = omp_decompose(&[0.0; 4], &axis_bank(4), &OmpConfig::default()).unwrap();
        assert!(code.support.is_empty());
        assert_eq!(code.reconstructed, vec![0.0; 4]);
        assert_eq!(code.residual_norm, 0.0);
    }

    #[test]
    fn rejects_bad_configuration() {
        let bank = axis_bank(3);
        assert!(matches!(
            omp_decompose(&[1.0, 0.0, 0.0], &bank, &OmpConfig::with_sparsity(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            omp_decompose(&[1.0, 0.0], &bank, &OmpConfig::default()),
            Err(Error::Shape(_))
        ));
        let scaled = ConceptBank::unnamed(Matrix::identity(3).scale(2.0));
        assert!(matches!(
            omp_decompose(&[1.0, 0.0, 0.0], &scaled, &OmpConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sparsity_clamped_to_rank() {
        // Three atoms in a 2-d plane: at most two can be used.
        let s = libm::sqrt(0.5);
        let bank = ConceptBank::unnamed(
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [s, s, 0.0]]).unwrap(),
        );
        let image = [0.3, 0.9, 0.2];
        let code = omp_decompose(&image, &bank, &OmpConfig::with_sparsity(10)).unwrap();
        assert_eq!(code.support.len(), 2);
        assert!((code.residual_norm - 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_maps_rows_and_flags_zero_rows() {
        let bank = axis_bank(3);
        let images = Matrix::from_rows(&[[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        let (codes, recon) = decompose_batch(&images, &bank, &OmpConfig::with_sparsity(1)).unwrap();
        assert_eq!(codes.len(), 3);
        assert_eq!(codes[0], codes[1]);
        assert_eq!(recon.row(0), &[0.0, 2.0, 0.0]);
        assert_eq!(recon.row(2), &[0.0, 0.0, 3.0]);

        let with_zero = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            decompose_batch(&with_zero, &bank, &OmpConfig::default()).unwrap_err(),
            Error::DegenerateRow { row: 1 }
        );
    }
}
