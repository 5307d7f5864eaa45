//! Small dense linear-algebra helpers built on SVD.

use nalgebra::DMatrix;

pub type Matrix = DMatrix<f64>;

/// Default relative singular-value threshold for rank decisions.
pub const DEFAULT_RANK_RTOL: f64 = 1e-10;

/// Full SVD factors `A = U Σ Vᵀ` with `U` (m×m), `V` (n×n) and singular
/// values sorted in decreasing order.
pub struct FullSvd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

/// Computes a full SVD by completing the thin factors with an orthonormal basis
/// of the complement.
pub fn full_svd(a: &Matrix) -> FullSvd {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return FullSvd {
            u: Matrix::identity(m, m),
            singular_values: Vec::new(),
            v: Matrix::identity(n, n),
        };
    }
    let svd = a.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u_thin = svd.u.expect("requested U");
    let vt_thin = svd.v_t.expect("requested Vt");
    let u_cols: Vec<_> = order.iter().map(|&i| u_thin.column(i).into_owned()).collect();
    let v_cols: Vec<_> = order.iter().map(|&i| vt_thin.row(i).transpose()).collect();
    FullSvd {
        u: complete_basis(&u_cols, m),
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        v: complete_basis(&v_cols, n),
    }
}

/// Extends orthonormal columns to an orthonormal basis of `R^dim` by
/// Gram-Schmidt against the standard basis (two passes).
fn complete_basis(cols: &[nalgebra::DVector<f64>], dim: usize) -> Matrix {
    let mut basis: Vec<nalgebra::DVector<f64>> = cols.to_vec();
    for e in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut cand = nalgebra::DVector::zeros(dim);
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&cand);
                cand -= b * d;
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            basis.push(cand / norm);
        }
    }
    Matrix::from_columns(&basis)
}

/// Numerical rank with threshold `rtol * σ_max` (or `atol` when given).
pub fn rank(a: &Matrix, tol: Option<f64>) -> usize {
    let s = singular_values(a);
    let thresh = threshold(&s, tol);
    s.iter().filter(|&&v| v > thresh).count()
}

pub fn singular_values(a: &Matrix) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn threshold(s: &[f64], tol: Option<f64>) -> f64 {
    match tol {
        Some(t) => t,
        None => DEFAULT_RANK_RTOL * s.first().copied().unwrap_or(0.0),
    }
}

/// Orthonormal basis of `im(A)` as columns.
pub fn range_basis(a: &Matrix, tol: Option<f64>) -> Matrix {
    let f = full_svd(a);
    let r = f.singular_values.iter().filter(|&&v| v > threshold(&f.singular_values, tol)).count();
    f.u.columns(0, r).into_owned()
}

/// Orthonormal basis of `ker(Aᵀ)` as rows, i.e. a full-row-rank `M` with
/// `M A = 0` and `ker(M) = im(A)`.
pub fn left_null_rows(a: &Matrix, tol: Option<f64>) -> Matrix {
    let f = full_svd(a);
    let r = f.singular_values.iter().filter(|&&v| v > threshold(&f.singular_values, tol)).count();
    let m = a.nrows();
    f.u.columns(r, m - r).transpose()
}

/// Moore-Penrose pseudo-inverse with rank threshold.
pub fn pinv(a: &Matrix, tol: Option<f64>) -> Matrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Matrix::zeros(n, m);
    }
    let f = full_svd(a);
    let thresh = threshold(&f.singular_values, tol);
    let mut out = Matrix::zeros(n, m);
    for (i, &s) in f.singular_values.iter().enumerate() {
        if s > thresh {
            out += f.v.column(i) * f.u.column(i).transpose() / s;
        }
    }
    out
}

/// Spectral radius via the real Schur form.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(a: &Matrix) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 && s.len() == a.nrows().min(a.ncols()) => hi / lo,
        _ => f64::INFINITY,
    }
}
