//! Reconstruction-guided concept selection.
//!
//! Given probing image embeddings `X` (`N × d`) and a pool of candidate concept
//! text embeddings, pick concepts one at a time so that the projection of `X`
//! onto the span of the picked embeddings loses as little energy as possible:
//! at every step the candidate minimizing `‖X(E − L(c))‖²_F` is taken, where
//! `L(c)` is the projector onto the current span extended by `c`. Candidates
//! already (numerically) inside the span are pruned from the pool.
//!
//! Scoring never forms `L(c)`. With `P` the current projector and
//! `z = tᵀ(E − P)t`, `L(c) − P = (E − P)ttᵀ(E − P)/z`, hence
//! `‖X(E − L(c))‖² = ‖X(E − P)‖² − ‖X(E − P)t‖²/z`. The selector keeps every
//! candidate's deflated direction `(E − P)t` and its image `X(E − P)t`, and
//! updates both by one rank-one deflation per step, so a step costs
//! `O(M (N' + d))` with `N' = min(N, d)` after compressing `X` to its
//! triangular factor.
//!
//! Selection never sees labels.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, triangular_factor, Matrix, OrthoBasis};

/// Relative tolerance below which `z = tᵀ(E − P)t` counts as zero.
pub const DEFAULT_DEPENDENCE_TOL: f64 = 1e-8;

/// Default bottleneck size.
pub const DEFAULT_BOTTLENECK: usize = 300;

/// Candidates whose deflated energy falls below this fraction of `‖t‖²` are
/// re-deflated from scratch against the basis.
const REFRESH_RATIO: f64 = 1e-3;

/// How the first concept is chosen; recorded in every report.
pub const FIRST_STEP_RULE: &str =
    "first pick minimizes the rank-one residual (maximizes captured energy)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ReachedTarget,
    PoolExhausted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::ReachedTarget => "reached m",
            StopReason::PoolExhausted => "pool exhausted",
        }
    }
}

impl core::fmt::Display for StopReason {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    /// Pool indices in pick order.
    pub selected: Vec<usize>,
    pub names: Vec<String>,
    /// `‖X(E − P)‖²_F` after each pick.
    pub residual_trace: Vec<f64>,
    /// `‖X‖²_F`, the residual of the empty selection.
    pub initial_residual: f64,
    /// Pool indices dropped as linearly dependent, in the order they were pruned.
    pub pruned: Vec<usize>,
    pub stop: StopReason,
}

impl SelectionReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace
            .last()
            .copied()
            .unwrap_or(self.initial_residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Available,
    Selected,
    Pruned,
}

/// Greedy selection in progress.
#[derive(Debug, Clone)]
pub struct SelectionState<'a> {
    pool: &'a ConceptBank,
    tol: f64,
    basis: OrthoBasis,
    selected: Vec<usize>,
    pruned: Vec<usize>,
    residual_trace: Vec<f64>,
    initial_residual: f64,
    status: Vec<Status>,
    // X(E − P), compressed to at most d rows; stored transposed (d × N') so
    // that `Y v` is a row-wise axpy.
    y_t: Matrix,
    // (E − P) t_c for each candidate, M × d.
    deflated: Matrix,
    // X (E − P) t_c for each candidate, M × N'.
    images: Matrix,
    // ‖t_c‖²
    sq_norms: Vec<f64>,
}

impl<'a> SelectionState<'a> {
    pub fn new(x: &Matrix, pool: &'a ConceptBank, dependence_tol: f64) -> Result<Self> {
        if x.rows() == 0 || pool.is_empty() {
            return Err(Error::config("selection needs at least one image and one candidate"));
        }
        let d = x.cols();
        if pool.dim() != d {
            return Err(Error::shape(alloc::format!(
                "images have dimension {d}, pool embeddings {}",
                pool.dim()
            )));
        }
        if !(dependence_tol >= 0.0) {
            return Err(Error::config("dependence tolerance must be non-negative"));
        }
        let sq_norms: Vec<f64> = pool.embeddings().row_iter().map(|t| dot(t, t)).collect();
        if let Some(row) = sq_norms.iter().position(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::DegenerateRow { row });
        }

        let compressed = if x.rows() > d {
            triangular_factor(x)
        } else {
            x.clone()
        };
        let y_t = compressed.transpose();
        let deflated = pool.embeddings().clone();
        let mut images = Matrix::zeros(pool.len(), y_t.cols());
        for c in 0..pool.len() {
            let img = apply_transposed(&y_t, deflated.row(c));
            images.row_mut(c).copy_from_slice(&img);
        }
        let initial_residual = y_t.frobenius_sq();
        Ok(Self {
            pool,
            tol: dependence_tol,
            basis: OrthoBasis::new(d),
            selected: Vec::new(),
            pruned: Vec::new(),
            residual_trace: Vec::new(),
            initial_residual,
            status: vec![Status::Available; pool.len()],
            y_t,
            deflated,
            images,
            sq_norms,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn pruned(&self) -> &[usize] {
        &self.pruned
    }

    pub fn residual_trace(&self) -> &[f64] {
        &self.residual_trace
    }

    /// `‖X(E − P)‖²_F` for the current selection.
    pub fn residual(&self) -> f64 {
        self.y_t.frobenius_sq()
    }

    /// Text embeddings of the selected concepts, one row each (`R`).
    pub fn selected_rows(&self) -> Matrix {
        self.pool.embeddings().select_rows(&self.selected)
    }

    /// The projector `P` onto the span of the selection, refactorized from `R`.
    pub fn projector(&self) -> Result<Matrix> {
        if self.selected.is_empty() {
            let d = self.basis.dim();
            return Ok(Matrix::zeros(d, d));
        }
        projection_of(&self.selected_rows())
    }

    /// `z = tᵀ(E − P)t` for a pool member.
    pub fn dependence(&self, c: usize) -> f64 {
        let u = self.deflated.row(c);
        dot(u, u)
    }

    /// Residual `‖X(E − L(c))‖²_F` each candidate would leave if picked next;
    /// `None` for candidates already selected, pruned or about to be pruned.
    pub fn candidate_scores(&self) -> Vec<Option<f64>> {
        let base = self.residual();
        (0..self.pool.len())
            .map(|c| {
                if self.status[c] != Status::Available {
                    return None;
                }
                let z = self.dependence(c);
                if z <= self.tol * self.sq_norms[c] {
                    return None;
                }
                let img = self.images.row(c);
                Some(base - dot(img, img) / z)
            })
            .collect()
    }

    /// Prunes dependent candidates, then adds the best survivor. Returns the
    /// pool index picked, or `None` when no candidate survives.
    pub fn step(&mut self) -> Result<Option<usize>> {
        for c in 0..self.pool.len() {
            if self.status[c] == Status::Available
                && self.dependence(c) <= self.tol * self.sq_norms[c]
            {
                self.status[c] = Status::Pruned;
                self.pruned.push(c);
            }
        }

        let mut best: Option<(usize, f64)> = None;
        for (c, score) in self.candidate_scores().into_iter().enumerate() {
            let Some(score) = score else { continue };
            // Strict comparison keeps the lowest index on ties.
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((c, score));
            }
        }
        let Some((pick, _)) = best else {
            return Ok(None);
        };

        self.basis
            .push(self.pool.embedding(pick), 0.0)
            .map_err(|e| Error::Factorization(alloc::format!("accepting concept {pick}: {e}")))?;
        self.status[pick] = Status::Selected;
        self.selected.push(pick);

        let q = self.basis.basis_row(self.basis.len() - 1).to_vec();
        let yq = apply_transposed(&self.y_t, &q);
        for (r, &qr) in q.iter().enumerate() {
            if qr != 0.0 {
                axpy(-qr, &yq, self.y_t.row_mut(r));
            }
        }
        for c in 0..self.pool.len() {
            if self.status[c] != Status::Available {
                continue;
            }
            let alpha = dot(self.deflated.row(c), &q);
            axpy(-alpha, &q, self.deflated.row_mut(c));
            axpy(-alpha, &yq, self.images.row_mut(c));
            if self.dependence(c) < REFRESH_RATIO * self.sq_norms[c] {
                let u = self.basis.residual(self.pool.embedding(c));
                let img = apply_transposed(&self.y_t, &u);
                self.deflated.row_mut(c).copy_from_slice(&u);
                self.images.row_mut(c).copy_from_slice(&img);
            }
        }
        self.residual_trace.push(self.residual());
        Ok(Some(pick))
    }

    fn into_report(self, stop: StopReason) -> SelectionReport {
        SelectionReport {
            names: self
                .selected
                .iter()
                .map(|&i| String::from(self.pool.name(i)))
                .collect(),
            selected: self.selected,
            residual_trace: self.residual_trace,
            initial_residual: self.initial_residual,
            pruned: self.pruned,
            stop,
        }
    }
}

// `Y v` where `y_t = Yᵀ` is stored row-major (d × N').
fn apply_transposed(y_t: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y_t.cols()];
    for (r, &vr) in v.iter().enumerate() {
        if vr != 0.0 {
            axpy(vr, y_t.row(r), &mut out);
        }
    }
    out
}

/// Greedily selects up to `m` concepts from `pool` that best reconstruct the
/// rows of `x`.
pub fn select_concepts(
    x: &Matrix,
    pool: &ConceptBank,
    m: usize,
    dependence_tol: f64,
) -> Result<SelectionReport> {
    if m == 0 {
        return Err(Error::config("bottleneck size must be at least 1"));
    }
    let mut state = SelectionState::new(x, pool, dependence_tol)?;
    while state.selected().len() < m {
        if state.step()?.is_none() {
            return Ok(state.into_report(StopReason::PoolExhausted));
        }
    }
    Ok(state.into_report(StopReason::ReachedTarget))
}

/// Orthogonal projector onto the span of the rows of `r`.
///
/// The rows must be linearly independent.
pub fn projection_of(r: &Matrix) -> Result<Matrix> {
    let mut basis = OrthoBasis::new(r.cols());
    for (i, row) in r.row_iter().enumerate() {
        basis.push(row, 1e-14).map_err(|e| {
            Error::Factorization(alloc::format!("selected row {i} is rank deficient: {e}"))
        })?;
    }
    Ok(basis.projector())
}

/// `L = PQP − QP − PQ + P + Q` with `Q = ttᵀ/z`: the projector onto the span of
/// `P` extended by `t` when `z = tᵀ(E − P)t`.
pub fn augmented_projection(p: &Matrix, t: &[f64], z: f64) -> Result<Matrix> {
    if p.rows() != p.cols() || p.rows() != t.len() {
        return Err(Error::shape(alloc::format!(
            "{}x{} projector with vector of length {}",
            p.rows(),
            p.cols(),
            t.len()
        )));
    }
    if !(z > 0.0) {
        return Err(Error::Dependent { z });
    }
    let q = Matrix::outer(t, t, z);
    let pq = p.matmul(&q)?;
    let qp = q.matmul(p)?;
    let pqp = pq.matmul(p)?;
    pqp.sub(&qp)?.sub(&pq)?.add(p)?.add(&q)
}

/// `‖X(E − P)‖²_F`, evaluated directly.
pub fn residual_energy(x: &Matrix, p: &Matrix) -> Result<f64> {
    let xp = x.matmul(p)?;
    Ok(x.sub(&xp)?.frobenius_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn axis_projector() {
        let p = projection_of(&Matrix::from_rows(&[e(3, 0)]).unwrap()).unwrap();
        let mut want = Matrix::zeros(3, 3);
        want[(0, 0)] = 1.0;
        assert_eq!(p, want);
    }

    #[test]
    fn coordinate_projection() {
        let p = projection_of(&Matrix::from_rows(&[e(3, 0), e(3, 1)]).unwrap()).unwrap();
        assert_eq!(p.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn rank_deficient_rows_fail() {
        let r = Matrix::from_rows(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]).unwrap();
        assert!(matches!(projection_of(&r), Err(Error::Factorization(_))));
    }

    #[test]
    fn augmented_from_empty_is_outer_product() {
        let d = 4;
        let t = e(d, 1);
        let l = augmented_projection(&Matrix::zeros(d, d), &t, 1.0).unwrap();
        assert_eq!(l, Matrix::outer(&t, &t, 1.0));
    }

    #[test]
    fn augmented_rejects_nonpositive_z() {
        let p = Matrix::identity(2);
        assert!(matches!(
            augmented_projection(&p, &[1.0, 0.0], 0.0),
            Err(Error::Dependent { .. })
        ));
    }

    #[test]
    fn parallel_images_pick_their_direction() {
        let t = [0.6, 0.8, 0.0];
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64 + 1.0) * t[c]);
        let pool = ConceptBank::unnamed(Matrix::from_rows(&[[0.0, 0.0, 1.0], t]).unwrap());
        let report = select_concepts(&x, &pool, 2, DEFAULT_DEPENDENCE_TOL).unwrap();
        assert_eq!(report.selected[0], 1);
        assert!(report.residual_trace[0] <= 1e-10);
        assert!(*report.residual_trace.last().unwrap() <= 1e-10);
    }

    #[test]
    fn sum_of_selected_is_pruned() {
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        let sum = [1.0, 1.0, 0.0, 0.0];
        let junk = [0.0, 0.0, 1.0, 0.0];
        let x = Matrix::from_rows(&[[3.0, 0.1, 0.0, 0.0], [0.2, 2.0, 0.0, 0.01]]).unwrap();
        let pool = ConceptBank::unnamed(Matrix::from_rows(&[a, b, sum, junk]).unwrap());
        // Force a and b first by giving them the most energy.
        let report = select_concepts(&x, &pool, 4, DEFAULT_DEPENDENCE_TOL).unwrap();
        assert_eq!(&report.selected[..2], &[0, 1]);
        assert!(report.pruned.contains(&2));
        assert!(!report.selected.contains(&2));
        assert_eq!(report.stop, StopReason::PoolExhausted);
    }

    #[test]
    fn stops_at_target() {
        let pool = ConceptBank::unnamed(Matrix::identity(4));
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 + 1.0);
        let report = select_concepts(&x, &pool, 2, DEFAULT_DEPENDENCE_TOL).unwrap();
        assert_eq!(report.stop, StopReason::ReachedTarget);
        assert_eq!(report.selected.len(), 2);
        // Columns 3 then 2 carry the most energy.
        assert_eq!(report.selected, vec![3, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        let pool = ConceptBank::unnamed(Matrix::identity(3));
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            select_concepts(&x, &pool, 1, 1e-8),
            Err(Error::Shape(_))
        ));
        let x = Matrix::zeros(2, 3);
        assert!(matches!(select_concepts(&x, &pool, 0, 1e-8), Err(Error::Config(_))));
        let zero_pool = ConceptBank::unnamed(Matrix::zeros(1, 3));
        assert!(matches!(
            select_concepts(&x, &zero_pool, 1, 1e-8),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn compression_keeps_residuals() {
        // N > d triggers the triangular factor path.
        let x = Matrix::from_fn(40, 5, |r, c| libm::sin((r * 5 + c) as f64 * 0.71));
        let pool = ConceptBank::unnamed(Matrix::from_fn(6, 5, |r, c| {
            libm::cos((r * 7 + c * 3) as f64 * 0.37)
        }));
        let report = select_concepts(&x, &pool, 3, 1e-8).unwrap();
        assert!((report.initial_residual - x.frobenius_sq()).abs() < 1e-9 * x.frobenius_sq());
        let p = projection_of(&pool.embeddings().select_rows(&report.selected)).unwrap();
        let direct = residual_energy(&x, &p).unwrap();
        assert!((direct - report.final_residual()).abs() <= 1e-9 * direct);
        assert!(direct > 0.0);
    }
}
