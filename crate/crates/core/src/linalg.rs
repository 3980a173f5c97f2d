//! Dense complex matrix helpers shared by every module.
//!
//! Vectorization convention: `vec` stacks columns (column-major), so that
//! `vec(A X B^†) = (conj(B) ⊗ A) vec(X)`. Every superoperator in the crate
//! uses this convention.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

pub fn zeros(r: usize, c: usize) -> CMatrix {
    CMatrix::zeros(r, c)
}

/// Real diagonal matrix.
pub fn diag(entries: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        entries.len(),
        entries.iter().map(|&x| c(x)),
    ))
}

/// Builds a matrix from real row-major entries.
pub fn real_matrix(rows: usize, cols: usize, entries: &[f64]) -> CMatrix {
    assert_eq!(entries.len(), rows * cols);
    CMatrix::from_fn(rows, cols, |r, k| c(entries[r * cols + k]))
}

/// `|v⟩⟨v|`.
pub fn projector(v: &CVector) -> CMatrix {
    v * v.adjoint()
}

/// Canonical basis vector `e_k` of `C^d` (zero-based).
pub fn basis_vector(d: usize, k: usize) -> CVector {
    let mut v = CVector::zeros(d);
    v[k] = ONE;
    v
}

pub fn vectorize(m: &CMatrix) -> CVector {
    CVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &[C64], d: usize) -> CMatrix {
    CMatrix::from_column_slice(d, d, v)
}

/// Matrix of `X ↦ L X L^†` on column-vectorized blocks.
pub fn sandwich(l: &CMatrix) -> CMatrix {
    l.map(|z| z.conj()).kronecker(l)
}

pub fn trace(m: &CMatrix) -> C64 {
    m.trace()
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn is_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// Eigen-decomposition of the Hermitian part, eigenvalues ascending.
pub fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// Applies `f` to the spectrum of the Hermitian part of `m`.
pub fn hermitian_function(m: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (values, vectors) = eigh(m);
    let mapped = CMatrix::from_diagonal(&CVector::from_iterator(
        values.len(),
        values.iter().map(|&x| c(f(x))),
    ));
    &vectors * mapped * vectors.adjoint()
}

pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    hermitian_function(m, |x| x.max(0.0).sqrt())
}

pub fn positive_part(m: &CMatrix) -> CMatrix {
    hermitian_function(m, |x| x.max(0.0))
}

pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    eigh(m).0.first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &CMatrix) -> f64 {
    eigh(m).0.last().copied().unwrap_or(0.0)
}

/// Spectral norm of a Hermitian matrix (largest absolute eigenvalue).
pub fn hermitian_norm(m: &CMatrix) -> f64 {
    eigh(m).0.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Largest singular value.
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |acc: f64, &s| acc.max(s))
}

/// Trace norm of a Hermitian matrix.
pub fn trace_norm(m: &CMatrix) -> f64 {
    eigh(m).0.iter().map(|x| x.abs()).sum()
}

pub fn eigenvalues(m: &CMatrix) -> Vec<C64> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![m[(0, 0)]];
    }
    // The unshifted QR sweep can cycle forever on spectra symmetric about 0
    // (e.g. bipartite walks); a complex diagonal shift breaks the symmetry.
    let scale = max_abs(m).max(1e-300);
    let max_niter = 200 * n;
    for shift in [ZERO, C64::new(0.131, 0.057), C64::new(-0.093, 0.171), C64::new(0.0, 0.29)] {
        let sigma = shift * scale;
        let shifted = m + CMatrix::identity(n, n) * sigma;
        if let Some(schur) = Schur::try_new(shifted, f64::EPSILON, max_niter) {
            let (_, t) = schur.unpack();
            return t.diagonal().iter().map(|&z| z - sigma).collect();
        }
    }
    panic!("Schur decomposition failed to converge on a {n}×{n} matrix");
}

pub fn spectral_radius(m: &CMatrix) -> f64 {
    eigenvalues(m).iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Orthonormal basis of the column span, dropping directions whose singular
/// value is below `rel_tol` times the largest one.
pub fn column_span(m: &CMatrix, rel_tol: f64) -> CMatrix {
    if m.ncols() == 0 || m.nrows() == 0 {
        return CMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    if smax == 0.0 {
        return CMatrix::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > rel_tol * smax)
        .collect();
    CMatrix::from_fn(m.nrows(), keep.len(), |r, k| u[(r, keep[k])])
}

/// Orthonormal basis of `{x : m x ≈ 0}`, where "≈" means singular value at most
/// `abs_tol` (absolute, since callers compare against an O(1) scale).
pub fn null_space(m: &CMatrix, abs_tol: f64) -> CMatrix {
    let n = m.ncols();
    if n == 0 {
        return CMatrix::zeros(0, 0);
    }
    // Pad to square so that the SVD returns a full right basis.
    let square = if m.nrows() < n {
        let mut p = CMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] <= abs_tol)
        .collect();
    CMatrix::from_fn(n, keep.len(), |r, k| v_t[(keep[k], r)].conj())
}

/// Extends an orthonormal basis `q` with the components of `candidates`
/// orthogonal to it. Returns the number of vectors added.
pub fn extend_basis(q: &mut CMatrix, candidates: &CMatrix, abs_tol: f64) -> usize {
    let mut added = 0;
    for k in 0..candidates.ncols() {
        let mut v = candidates.column(k).into_owned();
        // Two passes of classical Gram-Schmidt.
        for _ in 0..2 {
            if q.ncols() > 0 {
                let coeffs = q.adjoint() * &v;
                v -= &*q * coeffs;
            }
        }
        let norm = v.norm();
        if norm > abs_tol {
            v /= c(norm);
            let cols = q.ncols();
            let mut grown = q.clone().resize_horizontally(cols + 1, ZERO);
            grown.set_column(cols, &v);
            *q = grown;
            added += 1;
        }
    }
    added
}

/// Solves `a x = b` by LU; `None` when `a` is singular.
pub fn solve(a: &CMatrix, b: &CMatrix) -> Option<CMatrix> {
    if a.nrows() == 0 {
        return Some(CMatrix::zeros(0, b.ncols()));
    }
    a.clone().lu().solve(b)
}

/// Block-diagonal direct sum.
pub fn direct_sum(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut m = CMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut(a.shape(), b.shape()).copy_from(b);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sandwich_matches_vectorization_convention() {
        let l = CMatrix::from_fn(2, 3, |r, k| C64::new(r as f64 + 0.5, k as f64 - 1.0));
        let x = CMatrix::from_fn(3, 3, |r, k| C64::new((r * 3 + k) as f64, 0.25 * r as f64));
        let direct = &l * &x * l.adjoint();
        let via = sandwich(&l) * vectorize(&x);
        assert!(max_abs(&(unvectorize(via.as_slice(), 2) - direct)) < 1e-12);
    }

    #[test]
    fn null_space_of_rank_one() {
        let m = real_matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let ns = null_space(&m, 1e-10);
        assert_eq!(ns.ncols(), 1);
        assert!((&m * ns).norm() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let m = real_matrix(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((spectral_radius(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = real_matrix(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = psd_sqrt(&m);
        assert!(max_abs(&(&s * &s - m)) < 1e-12);
    }

    #[test]
    fn extend_basis_skips_dependent_vectors() {
        let mut q = CMatrix::zeros(3, 0);
        let cand = real_matrix(3, 3, &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(extend_basis(&mut q, &cand, 1e-10), 2);
        assert!(max_abs(&(q.adjoint() * &q - identity(2))) < 1e-12);
    }

    #[test]
    fn eigenvalues_of_bipartite_tridiagonal() {
        // Zero diagonal, spectrum symmetric about 0.
        let a = 0.3f64.sqrt() * 0.7f64.sqrt();
        let m = real_matrix(3, 3, &[0.0, a, 0.0, a, 0.0, a, 0.0, a, 0.0]);
        let r = spectral_radius(&m);
        assert!((r - a * 2f64.sqrt()).abs() < 1e-12);
    }
}
