//! Transformed Kalman filter.
//!
//! Runs in `[η_o; η_ō]` coordinates and propagates only `P_oo` and `P_ōo`.
//! The `P_ōō` block is where the conventional filter diverges; nothing here
//! depends on it, so it is never formed.

use nalgebra::{DMatrix, DVector};

use super::ckf::CkfState;
use super::innovation_inverse;
use crate::decomposition::{DecompositionBundle, ReducedNoise};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Default `P_oo[0] = 1e-18 · I`.
pub const DEFAULT_P_OO_SCALE: f64 = 1e-18;

/// Mean part of the transformed filter, shared with the steady-state filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TkfMean<T: Scalar> {
    pub eta_o: DVector<T>,
    pub eta_obar: DVector<T>,
}

impl<T: Scalar> TkfMean<T> {
    pub fn zeros(bundle: &DecompositionBundle<T>) -> Self {
        TkfMean {
            eta_o: DVector::zeros(bundle.obs_dim()),
            eta_obar: DVector::zeros(2),
        }
    }

    /// Prior mean after the input `u` of the previous step.
    pub fn predict(&self, u: &DVector<T>, bundle: &DecompositionBundle<T>) -> Result<TkfMean<T>> {
        if self.eta_o.len() != bundle.obs_dim() {
            return Err(Error::dim("observable estimate", bundle.obs_dim(), self.eta_o.len()));
        }
        if u.len() != bundle.n {
            return Err(Error::dim("input", bundle.n, u.len()));
        }
        Ok(TkfMean {
            eta_o: &bundle.a_oo * &self.eta_o + &bundle.b_o * u,
            eta_obar: &bundle.a_obar_o * &self.eta_o + bundle.a_dyn() * &self.eta_obar + &bundle.b_obar * u,
        })
    }

    /// `y − C_o η̂⁻_o`.
    pub fn innovation(&self, y: &DVector<T>, bundle: &DecompositionBundle<T>) -> Result<DVector<T>> {
        if y.len() != bundle.n - 1 {
            return Err(Error::dim("measurement", bundle.n - 1, y.len()));
        }
        Ok(y - &bundle.c_o * &self.eta_o)
    }

    pub fn corrected(&self, innovation: &DVector<T>, l_o: &DMatrix<T>, l_obar: &DMatrix<T>) -> TkfMean<T> {
        TkfMean {
            eta_o: &self.eta_o + l_o * innovation,
            eta_obar: &self.eta_obar + l_obar * innovation,
        }
    }

    /// Stacked `[η_o; η_ō]`.
    pub fn stacked(&self) -> DVector<T> {
        let d = self.eta_o.len();
        let mut s = DVector::zeros(d + 2);
        s.rows_mut(0, d).copy_from(&self.eta_o);
        s.rows_mut(d, 2).copy_from(&self.eta_obar);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TkfState<T: Scalar> {
    pub mean: TkfMean<T>,
    /// Posterior `P_oo`.
    pub p_oo: DMatrix<T>,
    /// Posterior `P_ōo`.
    pub p_obar_o: DMatrix<T>,
    /// Gains of the most recent correction.
    pub l_o: Option<DMatrix<T>>,
    pub l_obar: Option<DMatrix<T>>,
}

impl<T: Scalar> TkfState<T> {
    /// Zero estimates, `P_oo = scale · I`, `P_ōo = 0`.
    pub fn new(bundle: &DecompositionBundle<T>, p_oo_scale: T) -> Self {
        let d = bundle.obs_dim();
        TkfState {
            mean: TkfMean::zeros(bundle),
            p_oo: linalg::identity::<T>(d) * p_oo_scale,
            p_obar_o: DMatrix::zeros(2, d),
            l_o: None,
            l_obar: None,
        }
    }

    pub fn with_defaults(bundle: &DecompositionBundle<T>) -> Self {
        Self::new(bundle, T::lit(DEFAULT_P_OO_SCALE))
    }

    /// Zero estimates with the posterior covariance implied by steady-state
    /// priors, so the next correction uses the steady gains.
    pub fn at_steady_state(bundle: &DecompositionBundle<T>, gains: &super::SteadyGains<T>) -> Self {
        let (p_oo, p_obar_o) = posterior_covariance(&gains.p_oo_star, &gains.p_obar_o_star, &gains.l_o_star, bundle);
        TkfState {
            mean: TkfMean::zeros(bundle),
            p_oo,
            p_obar_o,
            l_o: None,
            l_obar: None,
        }
    }

    /// State consistent with a conventional filter: `η̂ = T x̂`,
    /// `P_oo = T_o P T_oᵀ`, `P_ōo = T_ō P T_oᵀ`.
    pub fn from_ckf(ckf: &CkfState<T>, bundle: &DecompositionBundle<T>) -> Result<Self> {
        if ckf.xhat.len() != bundle.full_dim() {
            return Err(Error::dim("CKF state", bundle.full_dim(), ckf.xhat.len()));
        }
        let (eta_o, eta_obar) = bundle.split(&ckf.xhat);
        let p_t_o = &ckf.p * bundle.t_o.transpose();
        let mut p_oo = &bundle.t_o * &p_t_o;
        linalg::symmetrize(&mut p_oo);
        Ok(TkfState {
            mean: TkfMean { eta_o, eta_obar },
            p_oo,
            p_obar_o: &bundle.t_obar * p_t_o,
            l_o: None,
            l_obar: None,
        })
    }

    /// `(P⁻_oo, P⁻_ōo)` from the current posterior blocks.
    pub fn predict_covariance(
        &self,
        bundle: &DecompositionBundle<T>,
        noise: &ReducedNoise<T>,
    ) -> (DMatrix<T>, DMatrix<T>) {
        prior_covariance(&self.p_oo, &self.p_obar_o, bundle, noise)
    }

    /// One predict/correct cycle with the input `u` of the previous step.
    pub fn step(
        &mut self,
        y: &DVector<T>,
        u: &DVector<T>,
        bundle: &DecompositionBundle<T>,
        noise: &ReducedNoise<T>,
        r: T,
    ) -> Result<()> {
        let prior = self.mean.predict(u, bundle)?;
        let (p_oo_prior, p_obar_o_prior) = self.predict_covariance(bundle, noise);
        self.correct_from(prior, p_oo_prior, p_obar_o_prior, y, bundle, r)
    }

    /// Correction only, treating the current state as the prior.
    pub fn correct(&mut self, y: &DVector<T>, bundle: &DecompositionBundle<T>, r: T) -> Result<()> {
        let (m, p, c) = (self.mean.clone(), self.p_oo.clone(), self.p_obar_o.clone());
        self.correct_from(m, p, c, y, bundle, r)
    }

    fn correct_from(
        &mut self,
        prior: TkfMean<T>,
        p_oo_prior: DMatrix<T>,
        p_obar_o_prior: DMatrix<T>,
        y: &DVector<T>,
        bundle: &DecompositionBundle<T>,
        r: T,
    ) -> Result<()> {
        let innovation = prior.innovation(y, bundle)?;
        let (l_o, l_obar) = gains(&p_oo_prior, &p_obar_o_prior, bundle, r)?;
        let (p_oo, p_obar_o) = posterior_covariance(&p_oo_prior, &p_obar_o_prior, &l_o, bundle);
        debug_assert!(joseph_agrees(&p_oo, &p_oo_prior, &l_o, bundle, r));
        self.mean = prior.corrected(&innovation, &l_o, &l_obar);
        self.p_oo = p_oo;
        self.p_obar_o = p_obar_o;
        self.l_o = Some(l_o);
        self.l_obar = Some(l_obar);
        Ok(())
    }
}

pub(crate) fn prior_covariance<T: Scalar>(
    p_oo: &DMatrix<T>,
    p_obar_o: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let a_oo_t = bundle.a_oo.transpose();
    let p_a = p_oo * &a_oo_t;
    let mut p_oo_prior = &bundle.a_oo * &p_a + &noise.q_oo;
    linalg::symmetrize(&mut p_oo_prior);
    let p_obar_o_prior = &bundle.a_obar_o * &p_a + bundle.a_dyn() * p_obar_o * &a_oo_t + &noise.q_obar_o;
    (p_oo_prior, p_obar_o_prior)
}

/// `(L_o, L_ō)` from prior covariance blocks.
pub(crate) fn gains<T: Scalar>(
    p_oo_prior: &DMatrix<T>,
    p_obar_o_prior: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    r: T,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let s_inv = innovation_inverse(&bundle.c_o, p_oo_prior, r)?;
    let c_t_s = bundle.c_o.transpose() * s_inv;
    Ok((p_oo_prior * &c_t_s, p_obar_o_prior * c_t_s))
}

pub(crate) fn posterior_covariance<T: Scalar>(
    p_oo_prior: &DMatrix<T>,
    p_obar_o_prior: &DMatrix<T>,
    l_o: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let i_lc = linalg::identity::<T>(bundle.obs_dim()) - l_o * &bundle.c_o;
    let mut p_oo = &i_lc * p_oo_prior;
    linalg::symmetrize(&mut p_oo);
    (p_oo, p_obar_o_prior * i_lc.transpose())
}

/// Compares the printed posterior with the Joseph form
/// `(I−LC)P⁻(I−LC)ᵀ + rLLᵀ`; they coincide for the optimal gain.
fn joseph_agrees<T: Scalar>(
    p_oo: &DMatrix<T>,
    p_oo_prior: &DMatrix<T>,
    l_o: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    r: T,
) -> bool {
    let i_lc = linalg::identity::<T>(bundle.obs_dim()) - l_o * &bundle.c_o;
    let joseph = &i_lc * p_oo_prior * i_lc.transpose() + l_o * l_o.transpose() * r;
    let scale = linalg::frobenius(p_oo_prior).as_f64();
    let diff = linalg::frobenius(&(p_oo - joseph)).as_f64();
    if diff > 1e-6 * scale {
        eprintln!("posterior covariance departs from Joseph form: {diff:e} vs scale {scale:e}");
        return false;
    }
    true
}
