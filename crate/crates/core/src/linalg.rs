//! Dense row-major `f64` matrices and the handful of factorizations the
//! pipeline needs. Storage elsewhere is `f32`; everything numerical runs here
//! in double precision.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(alloc::format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equally long slices as rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(alloc::format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(alloc::format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        Ok(out)
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(alloc::format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `Aᵀ x`
    pub fn t_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(alloc::format!(
                "vector of length {} against {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in self.row_iter().zip(x) {
            axpy(xr, r, &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(alloc::format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.frobenius_sq())
    }

    /// `x yᵀ / scale`.
    pub fn outer(x: &[f64], y: &[f64], scale: f64) -> Matrix {
        Matrix::from_fn(x.len(), y.len(), |r, c| x[r] * y[c] / scale)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Orthonormal basis grown one vector at a time by Gram–Schmidt with a
/// second orthogonalization pass, keeping the triangular factor.
///
/// After pushing `a_1..a_k` (all accepted) we have `A = Qᵀ R` with `Q` the
/// `k × d` matrix of basis rows and `R` upper triangular, so coefficients of a
/// least-squares fit against the accepted vectors come from `R w = Q y`.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    dim: usize,
    q: Vec<f64>,
    // Column j of R, holding the first j+1 entries.
    r_cols: Vec<Vec<f64>>,
}

impl OrthoBasis {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            q: Vec::new(),
            r_cols: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.r_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_cols.is_empty()
    }

    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    /// Coordinates `Q v` of `v` in the basis.
    pub fn coords(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| dot(self.basis_row(i), v)).collect()
    }

    /// `(E − QᵀQ) v`: the component of `v` orthogonal to the span.
    pub fn residual(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for _ in 0..2 {
            for i in 0..self.len() {
                let q = self.basis_row(i);
                let c = dot(q, &out);
                axpy(-c, q, &mut out);
            }
        }
        out
    }

    /// Tries to extend the basis with `v`. Returns `Error::Dependent` and
    /// leaves the basis untouched when the part of `v` outside the span has
    /// squared norm `≤ rel_tol · ‖v‖²`.
    pub fn push(&mut self, v: &[f64], rel_tol: f64) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(alloc::format!(
                "vector of length {} against basis dimension {}",
                v.len(),
                self.dim
            )));
        }
        let k = self.len();
        let mut coeffs = vec![0.0; k + 1];
        let mut w = v.to_vec();
        for _ in 0..2 {
            for (i, ci) in coeffs.iter_mut().take(k).enumerate() {
                let q = &self.q[i * self.dim..(i + 1) * self.dim];
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
                *ci += c;
            }
        }
        let z = dot(&w, &w);
        let vv = dot(v, v);
        if !(z > rel_tol * vv) || z == 0.0 {
            return Err(Error::Dependent { z });
        }
        let nz = libm::sqrt(z);
        coeffs[k] = nz;
        self.q.extend(w.iter().map(|x| x / nz));
        self.r_cols.push(coeffs);
        Ok(())
    }

    /// Least-squares coefficients of `y` against the accepted vectors, in
    /// push order.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let rhs = self.coords(y);
        let k = self.len();
        let mut w = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = rhs[i];
            for (j, wj) in w.iter().enumerate().skip(i + 1) {
                s -= self.r_cols[j][i] * wj;
            }
            w[i] = s / self.r_cols[i][i];
        }
        w
    }

    /// The `d × d` orthogonal projector `QᵀQ` onto the span.
    pub fn projector(&self) -> Matrix {
        let d = self.dim;
        let mut p = Matrix::zeros(d, d);
        for i in 0..self.len() {
            let q = self.basis_row(i);
            for r in 0..d {
                if q[r] == 0.0 {
                    continue;
                }
                axpy(q[r], q, p.row_mut(r));
            }
        }
        // Exact symmetry regardless of summation order.
        for r in 0..d {
            for c in (r + 1)..d {
                let v = 0.5 * (p[(r, c)] + p[(c, r)]);
                p[(r, c)] = v;
                p[(c, r)] = v;
            }
        }
        p
    }
}

/// Upper-triangular factor `R` of a Householder QR of `x` (`N × d`), keeping
/// its first `min(N, d)` rows. `RᵀR = xᵀx`, so `‖x A‖_F = ‖R A‖_F` for any `A`.
pub fn triangular_factor(x: &Matrix) -> Matrix {
    let (n, d) = (x.rows(), x.cols());
    let mut a = x.clone();
    let steps = n.min(d);
    let mut v = vec![0.0; n];
    for k in 0..steps {
        let mut alpha = 0.0;
        for i in k..n {
            alpha += a[(i, k)] * a[(i, k)];
        }
        let alpha = libm::sqrt(alpha);
        if alpha == 0.0 {
            continue;
        }
        let sign = if a[(k, k)] >= 0.0 { 1.0 } else { -1.0 };
        for i in k..n {
            v[i] = a[(i, k)];
        }
        v[k] += sign * alpha;
        let vv: f64 = v[k..n].iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        for c in k..d {
            let mut s = 0.0;
            for i in k..n {
                s += v[i] * a[(i, c)];
            }
            let f = 2.0 * s / vv;
            for i in k..n {
                a[(i, c)] -= f * v[i];
            }
        }
    }
    Matrix::from_fn(steps, d, |r, c| if c < r { 0.0 } else { a[(r, c)] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let b = a.transpose().matmul(&a).unwrap();
        assert_eq!(b.as_slice(), &[35.0, 44.0, 44.0, 56.0]);
        assert!(a.matmul(&a).is_err());
        assert_eq!(a.t_matvec(&[1.0, 0.0, 1.0]).unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn basis_solves_least_squares() {
        let mut basis = OrthoBasis::new(3);
        basis.push(&[1.0, 1.0, 0.0], 1e-12).unwrap();
        basis.push(&[0.0, 1.0, 1.0], 1e-12).unwrap();
        // y = 2 a1 - 3 a2 lies in the span.
        let y = [2.0, -1.0, -3.0];
        let w = basis.solve(&y);
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] + 3.0).abs() < 1e-12);
        assert!(norm(&basis.residual(&y)) < 1e-12);
        assert!(matches!(
            basis.push(&[1.0, 2.0, 1.0], 1e-10),
            Err(Error::Dependent { .. })
        ));
        assert_eq!(basis.len(), 2);
    }

    #[test]
    fn triangular_factor_preserves_gram() {
        let x = Matrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let r = triangular_factor(&x);
        assert_eq!((r.rows(), r.cols()), (3, 3));
        let g1 = x.transpose().matmul(&x).unwrap();
        let g2 = r.transpose().matmul(&r).unwrap();
        assert!(g1.sub(&g2).unwrap().frobenius() < 1e-12);
        let wide = Matrix::from_fn(2, 5, |r, c| (r + c) as f64);
        assert_eq!(triangular_factor(&wide).rows(), 2);
    }

    #[test]
    fn projector_is_symmetric_idempotent() {
        let mut basis = OrthoBasis::new(4);
        basis.push(&[1.0, 2.0, 0.5, -1.0], 1e-12).unwrap();
        basis.push(&[0.3, -1.0, 2.0, 0.0], 1e-12).unwrap();
        let p = basis.projector();
        assert!(p.sub(&p.transpose()).unwrap().frobenius() == 0.0);
        let p2 = p.matmul(&p).unwrap();
        assert!(p2.sub(&p).unwrap().frobenius() < 1e-14);
    }
}
