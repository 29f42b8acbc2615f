//! Weight-parameterised observable canonical decomposition.
//!
//! For a weight vector `q` with `qᵀ1 = 1` the ensemble state splits into
//! `η_o = [(I₂⊗V)x; z]`, which the difference measurements see, and
//! `η_ō = (I₂⊗qᵀ)x`, the weighted ensemble mean, which they never see.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::ensemble::{EnsembleSpec, SystemMatrices};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Tolerance on `qᵀ1 = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Ensemble weights. Only the normalisation is enforced; entries may be
/// negative.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T: Scalar> {
    q: DVector<T>,
}

impl<T: Scalar> WeightVector<T> {
    pub fn new(q: DVector<T>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidSpec("empty weight vector".into()));
        }
        if q.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::InvalidSpec("weight vector has non-finite entries".into()));
        }
        let sum = q.sum().as_f64();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Domain {
                what: "weight sum",
                rule: "q^T 1 = 1 within 1e-12",
                value: sum,
            });
        }
        Ok(WeightVector { q })
    }

    pub fn from_slice(q: &[T]) -> Result<Self> {
        Self::new(DVector::from_column_slice(q))
    }

    /// Normalises non-negative scores to sum to one.
    pub fn normalized(scores: DVector<T>) -> Result<Self> {
        let s = scores.sum();
        if !(s.as_f64().is_finite()) || s == T::zero() {
            return Err(Error::InvalidSpec("weights cannot be normalised (zero sum)".into()));
        }
        Self::new(scores / s)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::normalized(DVector::from_element(n, T::one()))
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.q
    }

    pub fn as_slice(&self) -> &[T] {
        self.q.as_slice()
    }
}

/// `W = (I − 1qᵀ)S` with `S` the first `N−1` unit columns; `qᵀW = 0`.
pub fn build_w<T: Scalar>(q: &WeightVector<T>) -> DMatrix<T> {
    let n = q.len();
    let mut w = DMatrix::zeros(n, n - 1);
    for j in 0..n - 1 {
        for i in 0..n {
            let e = if i == j { T::one() } else { T::zero() };
            w[(i, j)] = e - q.q[j];
        }
    }
    w
}

/// `V⁺ = W(VW)⁻¹`, a right inverse of `V` with `qᵀV⁺ = 0`.
pub fn generalized_inverse<T: Scalar>(v: &DMatrix<T>, q: &WeightVector<T>) -> Result<DMatrix<T>> {
    let n = q.len();
    if v.nrows() + 1 != n || v.ncols() != n {
        return Err(Error::dim("V columns", n, v.ncols()));
    }
    let w = build_w(q);
    let vw = v * &w;
    let inv = linalg::inverse_checked("V W", &vw, linalg::MAX_CONDITION)?;
    Ok(w * inv)
}

/// The decomposition's transforms and the transformed system blocks.
#[derive(Debug, Clone)]
pub struct DecompositionBundle<T: Scalar> {
    pub n: usize,
    pub m: usize,
    pub tau: T,
    pub q: WeightVector<T>,
    pub v: DMatrix<T>,
    pub w: DMatrix<T>,
    pub vplus: DMatrix<T>,
    /// Maps `[x; z]` to `[η_o; η_ō]`.
    pub t: DMatrix<T>,
    pub tinv: DMatrix<T>,
    pub a_oo: DMatrix<T>,
    pub a_obar_o: DMatrix<T>,
    /// Single-clock `A`, which also drives `η_ō`.
    pub a: Matrix2<T>,
    pub b_o: DMatrix<T>,
    pub b_obar: DMatrix<T>,
    pub c_o: DMatrix<T>,
    pub t_o: DMatrix<T>,
    pub t_obar: DMatrix<T>,
    /// `V J`, the maser columns of `V`.
    pub vj: DMatrix<T>,
    /// `qᵀ J`, the maser weights.
    pub qj: DMatrix<T>,
}

/// Process-noise covariance expressed in decomposition coordinates.
#[derive(Debug, Clone)]
pub struct ReducedNoise<T: Scalar> {
    /// `T_o Q T_oᵀ`
    pub q_oo: DMatrix<T>,
    /// `T_ō Q T_oᵀ`
    pub q_obar_o: DMatrix<T>,
    /// `T_ō Q T_ōᵀ`
    pub q_obar: DMatrix<T>,
}

impl<T: Scalar> DecompositionBundle<T> {
    /// `2(N−1) + M`.
    pub fn obs_dim(&self) -> usize {
        2 * (self.n - 1) + self.m
    }

    pub fn full_dim(&self) -> usize {
        2 * self.n + self.m
    }

    pub fn a_dyn(&self) -> DMatrix<T> {
        DMatrix::from_iterator(2, 2, self.a.iter().copied())
    }

    pub fn reduced_noise(&self, q: &DMatrix<T>) -> ReducedNoise<T> {
        let t_o_q = &self.t_o * q;
        let t_obar_q = &self.t_obar * q;
        let mut q_oo = &t_o_q * self.t_o.transpose();
        linalg::symmetrize(&mut q_oo);
        let mut q_obar = &t_obar_q * self.t_obar.transpose();
        linalg::symmetrize(&mut q_obar);
        ReducedNoise {
            q_oo,
            q_obar_o: t_obar_q * self.t_o.transpose(),
            q_obar,
        }
    }

    /// `(η_o, η_ō)` for a full state `[x; z]`.
    pub fn split(&self, s: &DVector<T>) -> (DVector<T>, DVector<T>) {
        let eta = &self.t * s;
        let d = self.obs_dim();
        (eta.rows(0, d).into_owned(), eta.rows(d, 2).into_owned())
    }

    /// Full state from `(η_o, η_ō)`.
    pub fn join(&self, eta_o: &DVector<T>, eta_obar: &DVector<T>) -> DVector<T> {
        let d = self.obs_dim();
        let mut eta = DVector::zeros(d + 2);
        eta.rows_mut(0, d).copy_from(eta_o);
        eta.rows_mut(d, 2).copy_from(eta_obar);
        &self.tinv * eta
    }

    /// Block matrix `[[A_oo, 0], [A_ōo, A]]` acting on `[η_o; η_ō]`.
    pub fn transformed_dynamics(&self) -> DMatrix<T> {
        let d = self.obs_dim();
        let mut m = DMatrix::zeros(d + 2, d + 2);
        m.view_mut((0, 0), (d, d)).copy_from(&self.a_oo);
        m.view_mut((d, 0), (2, d)).copy_from(&self.a_obar_o);
        m.view_mut((d, d), (2, 2)).copy_from(&self.a_dyn());
        m
    }
}

pub fn build_transform<T: Scalar>(spec: &EnsembleSpec<T>, q: &WeightVector<T>) -> Result<DecompositionBundle<T>> {
    spec.validate()?;
    let (n, m) = (spec.n(), spec.m());
    if q.len() != n {
        return Err(Error::dim("weight vector", n, q.len()));
    }
    let tau = spec.tau;
    let half = T::lit(0.5);
    let a = Matrix2::new(T::one(), tau, T::zero(), T::one());
    let a_blk = DMatrix::from_row_slice(2, 2, &[T::one(), tau, T::zero(), T::one()]);
    let beta = DMatrix::from_column_slice(2, 1, &[half * tau * tau, tau]);
    let b_blk = DMatrix::from_column_slice(2, 1, &[tau, T::one()]);
    let c_blk = DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]);
    let i2 = linalg::identity::<T>(2);

    let v = spec.v.clone();
    let w = build_w(q);
    let vplus = generalized_inverse(&v, q)?;
    let qt = DMatrix::from_row_slice(1, n, q.q.as_slice());
    let j = crate::ensemble::selector_j::<T>(n, m);
    let vj = &v * &j;
    let qj = &qt * &j;
    let ones = DMatrix::from_element(n, 1, T::one());

    let d = 2 * (n - 1) + m;
    let full = 2 * n + m;

    let i2v = linalg::kron(&i2, &v);
    let i2q = linalg::kron(&i2, &qt);

    let mut t_o = DMatrix::zeros(d, full);
    t_o.view_mut((0, 0), (2 * (n - 1), 2 * n)).copy_from(&i2v);
    t_o.view_mut((2 * (n - 1), 2 * n), (m, m)).fill_with_identity();
    let mut t_obar = DMatrix::zeros(2, full);
    t_obar.view_mut((0, 0), (2, 2 * n)).copy_from(&i2q);

    let mut t = DMatrix::zeros(d + 2, full);
    t.view_mut((0, 0), (d, full)).copy_from(&t_o);
    t.view_mut((d, 0), (2, full)).copy_from(&t_obar);

    let mut tinv = DMatrix::zeros(full, d + 2);
    tinv.view_mut((0, 0), (2 * n, 2 * (n - 1)))
        .copy_from(&linalg::kron(&i2, &vplus));
    tinv.view_mut((2 * n, 2 * (n - 1)), (m, m)).fill_with_identity();
    tinv.view_mut((0, d), (2 * n, 2)).copy_from(&linalg::kron(&i2, &ones));

    let mut a_oo = DMatrix::zeros(d, d);
    a_oo.view_mut((0, 0), (2 * (n - 1), 2 * (n - 1)))
        .copy_from(&linalg::kron(&a_blk, &linalg::identity(n - 1)));
    a_oo.view_mut((0, 2 * (n - 1)), (2 * (n - 1), m))
        .copy_from(&linalg::kron(&beta, &vj));
    a_oo.view_mut((2 * (n - 1), 2 * (n - 1)), (m, m)).fill_with_identity();

    let mut a_obar_o = DMatrix::zeros(2, d);
    a_obar_o.view_mut((0, 2 * (n - 1)), (2, m)).copy_from(&linalg::kron(&beta, &qj));

    let mut b_o = DMatrix::zeros(d, n);
    b_o.view_mut((0, 0), (2 * (n - 1), n)).copy_from(&linalg::kron(&b_blk, &v));
    let b_obar = linalg::kron(&b_blk, &qt);

    let mut c_o = DMatrix::zeros(n - 1, d);
    c_o.view_mut((0, 0), (n - 1, 2 * (n - 1)))
        .copy_from(&linalg::kron(&c_blk, &linalg::identity(n - 1)));

    Ok(DecompositionBundle {
        n,
        m,
        tau,
        q: q.clone(),
        v,
        w,
        vplus,
        t,
        tinv,
        a_oo,
        a_obar_o,
        a,
        b_o,
        b_obar,
        c_o,
        t_o,
        t_obar,
        vj,
        qj,
    })
}

/// Residuals of the block identities `T𝒜T⁻¹`, `Tℬ`, `𝒞T⁻¹` against the
/// stored blocks, each relative to the norm of the expected block.
pub fn block_identity_residuals<T: Scalar>(bundle: &DecompositionBundle<T>, sys: &SystemMatrices<T>) -> [f64; 3] {
    let d = bundle.obs_dim();
    let n = bundle.n;
    let tat = &bundle.t * &sys.a * &bundle.tinv;
    let expected = bundle.transformed_dynamics();
    let tb = &bundle.t * &sys.b;
    let mut expected_b = DMatrix::zeros(d + 2, n);
    expected_b.view_mut((0, 0), (d, n)).copy_from(&bundle.b_o);
    expected_b.view_mut((d, 0), (2, n)).copy_from(&bundle.b_obar);
    let ct = &sys.c * &bundle.tinv;
    let mut expected_c = DMatrix::zeros(n - 1, d + 2);
    expected_c.view_mut((0, 0), (n - 1, d)).copy_from(&bundle.c_o);
    [
        linalg::relative_diff(&tat, &expected).as_f64(),
        linalg::relative_diff(&tb, &expected_b).as_f64(),
        linalg::relative_diff(&ct, &expected_c).as_f64(),
    ]
}
