//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest condition number accepted by [`solve_checked`] and friends.
pub const MAX_CONDITION: f64 = 1e12;

pub fn identity<T: Scalar>(n: usize) -> DMatrix<T> {
    DMatrix::identity(n, n)
}

pub fn ones<T: Scalar>(n: usize) -> DVector<T> {
    DVector::from_element(n, T::one())
}

pub fn kron<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// `(P + Pᵀ) / 2`, in place.
pub fn symmetrize<T: Scalar>(p: &mut DMatrix<T>) {
    let n = p.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (p[(i, j)] + p[(j, i)]) * half;
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.norm()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom > T::zero() {
        diff / denom
    } else {
        diff
    }
}

pub fn singular_values<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    m.clone().svd(false, false).singular_values
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let sv = singular_values(m);
    let max = sv.max().as_f64();
    let min = sv.min().as_f64();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank with singular-value cutoff `rel_tol × σ_max`.
pub fn rank<T: Scalar>(m: &DMatrix<T>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let cutoff = sv.max().as_f64() * rel_tol;
    sv.iter().filter(|s| s.as_f64() > cutoff).count()
}

/// Solves `a · x = b` after rejecting systems whose condition number exceeds `max_cond`.
pub fn solve_checked<T: Scalar>(
    what: &'static str,
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    max_cond: f64,
) -> Result<DMatrix<T>> {
    let cond = condition_number(a);
    if !(cond <= max_cond) {
        return Err(Error::Singular { what, cond });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::Singular { what, cond })
}

pub fn inverse_checked<T: Scalar>(what: &'static str, a: &DMatrix<T>, max_cond: f64) -> Result<DMatrix<T>> {
    solve_checked(what, a, &identity(a.nrows()), max_cond)
}

/// Inverse of a symmetric positive definite matrix (innovation covariance).
pub fn spd_inverse<T: Scalar>(what: &'static str, s: &DMatrix<T>) -> Result<DMatrix<T>> {
    match s.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::Singular {
            what,
            cond: condition_number(s),
        }),
    }
}

/// Factor `L` with `L Lᵀ = Q` for a covariance matrix.
///
/// Cholesky when `Q` is numerically positive definite, otherwise a symmetric
/// eigendecomposition with negative eigenvalues clamped to zero.
pub fn covariance_factor<T: Scalar>(q: &DMatrix<T>) -> DMatrix<T> {
    if let Some(ch) = q.clone().cholesky() {
        return ch.l();
    }
    let mut sym = q.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let mut f = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if *lambda > T::zero() { lambda.sqrt() } else { T::zero() };
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    sym.symmetric_eigenvalues().min()
}

pub fn max_symmetric_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    sym.symmetric_eigenvalues().max()
}

/// Spectral radius from the real Schur form.
pub fn spectral_radius<T: Scalar>(m: &DMatrix<T>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt().as_f64())
        .fold(0.0, f64::max)
}

/// Column-major vectorisation `vec(M)`.
pub fn vec<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec<T: Scalar>(v: &DVector<T>, rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Diagonal matrix from a vector.
pub fn diag<T: Scalar>(d: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_diagonal(d)
}
