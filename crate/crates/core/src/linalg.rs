//! Dense linear-algebra helpers built on nalgebra.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold on projected eigenvalues used for definiteness decisions.
pub const DEFINITENESS_TOL: f64 = 1e-10;

/// Orthonormal basis (as columns) of the orthogonal complement of
/// `u = (1, ..., 1, 0, ..., 0)` in `R^dim`, where the first `ones` entries
/// are one. Built from a single Householder reflector.
pub fn complement_basis(dim: usize, ones: usize) -> DMatrix<f64> {
    assert!(ones >= 1 && ones <= dim, "complement of a non-empty prefix");
    let mut u = DVector::zeros(dim);
    for k in 0..ones {
        u[k] = 1.0;
    }
    let s = (ones as f64).sqrt();
    // v = u + s e_0 (u_0 = 1 > 0)
    let mut v = u;
    v[0] += s;
    let vtv = v.dot(&v);
    let h = DMatrix::<f64>::identity(dim, dim) - (&v * v.transpose()) * (2.0 / vtv);
    // column 0 of h is parallel to u; the rest span its complement
    h.columns(1, dim - 1).into_owned()
}

/// Eigenvalues (ascending) and matching eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Ascending eigenvalues of the symmetric matrix `Q^T M Q`.
pub fn projected_eigenvalues(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> Vec<f64> {
    let p = basis.transpose() * m * basis;
    sym_eigen(&p).0
}

/// Sign classification of a symmetric quadratic form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Definiteness {
    NegativeDefinite,
    NegativeSemidefiniteOnly,
    IndefiniteOrPositive,
}

/// Classifies by the largest eigenvalue with threshold [`DEFINITENESS_TOL`].
pub fn classify_negative(eigenvalues: &[f64]) -> Definiteness {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max < -DEFINITENESS_TOL {
        Definiteness::NegativeDefinite
    } else if max <= DEFINITENESS_TOL {
        Definiteness::NegativeSemidefiniteOnly
    } else {
        Definiteness::IndefiniteOrPositive
    }
}

/// Moore-Penrose pseudoinverse; singular values below `rel_tol * sigma_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let cutoff = rel_tol * smax;
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Relative deflation thresholds tried in turn by [`eigenvalues`]. The QR
/// iteration has no exceptional shifts and can stall on highly symmetric
/// networks (clusters of repeated eigenvalues) at machine precision.
const SCHUR_DEFLATION: [f64; 4] = [f64::EPSILON, 1e-14, 1e-13, 1e-12];

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenFailure);
    }
    SCHUR_DEFLATION
        .iter()
        .find_map(|&eps| m.clone().try_schur(eps, 100_000))
        .map(|schur| schur.complex_eigenvalues().iter().copied().collect())
        .ok_or(Error::EigenFailure)
}

/// Roots of `c[0] + c[1] x + ... + c[d] x^d` from the eigenvalues of the
/// companion matrix. The leading coefficient must be non-zero.
pub fn polynomial_roots(coeffs: &[f64]) -> Result<Vec<Complex<f64>>> {
    let d = coeffs.len().saturating_sub(1);
    if d == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[d];
    if lead == 0.0 || !lead.is_finite() {
        return Err(Error::Consistency("polynomial leading coefficient is zero".into()));
    }
    let mut comp = DMatrix::zeros(d, d);
    for k in 1..d {
        comp[(k, k - 1)] = 1.0;
    }
    for k in 0..d {
        comp[(k, d - 1)] = -coeffs[k] / lead;
    }
    eigenvalues(&comp)
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}
