//! Dense symmetric helpers and block (Kronecker-structured) arithmetic.
//!
//! Network matrices are small (N ≤ 50), so everything here is dense. Stacked
//! dual vectors are stored per agent as `&[DVector<f64>]`; a matrix `P` acting
//! on such a stack means `P ⊗ I` without ever forming the Kronecker product.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative cutoff below which eigenvalues are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

/// Eigenvalues (ascending) and matching eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    sym_eigen(m).0
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(m);
    let largest = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = PINV_RCOND * largest;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in values.iter().enumerate() {
        if lam.abs() > cutoff {
            let v = vectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// `(P ⊗ I) y` for a stack of equally sized blocks.
pub fn block_apply(p: &DMatrix<f64>, ys: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let dim = ys.first().map_or(0, |y| y.len());
    (0..p.nrows())
        .map(|i| {
            let mut acc = DVector::zeros(dim);
            for (j, y) in ys.iter().enumerate() {
                let w = p[(i, j)];
                if w != 0.0 {
                    acc.axpy(w, y, 1.0);
                }
            }
            acc
        })
        .collect()
}

/// `yᵀ (P ⊗ I) y`.
pub fn block_quad(p: &DMatrix<f64>, ys: &[DVector<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..ys.len() {
        for j in 0..ys.len() {
            let w = p[(i, j)];
            if w != 0.0 {
                total += w * ys[i].dot(&ys[j]);
            }
        }
    }
    total
}

/// `√(yᵀ (P ⊗ I) y)`, clamped at zero for roundoff in PSD forms.
pub fn block_norm(p: &DMatrix<f64>, ys: &[DVector<f64>]) -> f64 {
    block_quad(p, ys).max(0.0).sqrt()
}

pub fn block_sub(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn block_sum(ys: &[DVector<f64>]) -> DVector<f64> {
    let dim = ys.first().map_or(0, |y| y.len());
    ys.iter().fold(DVector::zeros(dim), |acc, y| acc + y)
}

pub fn stack_norm(ys: &[DVector<f64>]) -> f64 {
    ys.iter().map(|y| y.norm_squared()).sum::<f64>().sqrt()
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-major CSV export of a matrix.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Option<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}
