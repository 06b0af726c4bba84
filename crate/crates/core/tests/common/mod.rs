#![allow(dead_code)]

use cbm_core::Matrix;

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares coefficients of `y` over the given atoms (normal equations).
pub fn ls_coeffs(atoms: &[&[f64]], y: &[f64]) -> Vec<f64> {
    let gram = atoms
        .iter()
        .map(|a| atoms.iter().map(|b| dot(a, b)).collect())
        .collect();
    let rhs = atoms.iter().map(|a| dot(a, y)).collect();
    solve(gram, rhs)
}

/// `‖y − Σ w_j a_j‖²` at the least-squares optimum.
pub fn ls_residual(atoms: &[&[f64]], y: &[f64]) -> f64 {
    if atoms.is_empty() {
        return dot(y, y);
    }
    let w = ls_coeffs(atoms, y);
    let mut r = y.to_vec();
    for (a, &wj) in atoms.iter().zip(&w) {
        for (ri, ai) in r.iter_mut().zip(a.iter()) {
            *ri -= wj * ai;
        }
    }
    dot(&r, &r)
}

/// Sum of per-row least-squares residuals of `x` against the rows of `pool`
/// listed in `idx`.
pub fn set_residual(x: &Matrix, pool: &Matrix, idx: &[usize]) -> f64 {
    let atoms: Vec<&[f64]> = idx.iter().map(|&i| pool.row(i)).collect();
    x.row_iter().map(|row| ls_residual(&atoms, row)).sum()
}
