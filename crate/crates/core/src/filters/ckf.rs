//! Conventional Kalman filter on the full ensemble model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::innovation_inverse;
use crate::ensemble::SystemMatrices;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Measurement-update form of the final filter line.
///
/// `AsPrinted` applies the dynamics a second time to the prior before the
/// correction, `x̂ = 𝒜x̂⁻ + L(y − 𝒞x̂⁻)`. `Standard` is `x̂ = x̂⁻ + L(y − 𝒞x̂⁻)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkfUpdateForm {
    AsPrinted,
    #[default]
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkfState<T: Scalar> {
    /// Full state estimate `[x̂; ẑ]`.
    pub xhat: DVector<T>,
    /// Posterior error covariance.
    pub p: DMatrix<T>,
    /// Gain used by the most recent correction.
    pub gain: Option<DMatrix<T>>,
}

impl<T: Scalar> CkfState<T> {
    pub fn new(xhat: DVector<T>, p: DMatrix<T>) -> Result<Self> {
        if p.nrows() != xhat.len() || p.ncols() != xhat.len() {
            return Err(Error::dim("CKF covariance", xhat.len(), p.nrows()));
        }
        Ok(CkfState { xhat, p, gain: None })
    }

    /// Zero estimate with covariance `scale · I`.
    pub fn with_isotropic(dim: usize, scale: T) -> Self {
        CkfState {
            xhat: DVector::zeros(dim),
            p: linalg::identity::<T>(dim) * scale,
            gain: None,
        }
    }

    /// `(x̂⁻, P⁻)` after applying the input `u` of the previous step.
    pub fn predict(&self, u: &DVector<T>, sys: &SystemMatrices<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        let dim = sys.state_dim();
        if self.xhat.len() != dim {
            return Err(Error::dim("CKF state", dim, self.xhat.len()));
        }
        if u.len() != sys.n {
            return Err(Error::dim("input", sys.n, u.len()));
        }
        let x_prior = &sys.a * &self.xhat + &sys.b * u;
        let mut p_prior = &sys.a * &self.p * sys.a.transpose() + &sys.q;
        linalg::symmetrize(&mut p_prior);
        Ok((x_prior, p_prior))
    }

    /// One predict/correct cycle.
    pub fn step(
        &mut self,
        y: &DVector<T>,
        u: &DVector<T>,
        sys: &SystemMatrices<T>,
        r: T,
        form: CkfUpdateForm,
    ) -> Result<()> {
        let (x_prior, p_prior) = self.predict(u, sys)?;
        self.correct_from(x_prior, p_prior, y, sys, r, form)
    }

    /// Correction only, treating the current estimate as the prior.
    pub fn correct(&mut self, y: &DVector<T>, sys: &SystemMatrices<T>, r: T, form: CkfUpdateForm) -> Result<()> {
        let (x, p) = (self.xhat.clone(), self.p.clone());
        self.correct_from(x, p, y, sys, r, form)
    }

    fn correct_from(
        &mut self,
        x_prior: DVector<T>,
        p_prior: DMatrix<T>,
        y: &DVector<T>,
        sys: &SystemMatrices<T>,
        r: T,
        form: CkfUpdateForm,
    ) -> Result<()> {
        if y.len() != sys.n - 1 {
            return Err(Error::dim("measurement", sys.n - 1, y.len()));
        }
        let s_inv = innovation_inverse(&sys.c, &p_prior, r)?;
        let gain = &p_prior * sys.c.transpose() * s_inv;
        let dim = sys.state_dim();
        let mut p = (linalg::identity::<T>(dim) - &gain * &sys.c) * &p_prior;
        linalg::symmetrize(&mut p);
        let innovation = y - &sys.c * &x_prior;
        self.xhat = match form {
            CkfUpdateForm::Standard => x_prior + &gain * innovation,
            CkfUpdateForm::AsPrinted => &sys.a * x_prior + &gain * innovation,
        };
        self.p = p;
        self.gain = Some(gain);
        Ok(())
    }

    pub fn max_diagonal(&self) -> T {
        self.p.diagonal().max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{assemble_system, EnsembleSpec};
    use crate::testkit::small_spec;

    fn spec() -> EnsembleSpec<f64> {
        small_spec(1e-27)
    }

    #[test]
    fn zero_innovation_keeps_prior() {
        let s = spec();
        let mut sys = assemble_system(&s).unwrap();
        sys.q.fill(0.0);
        let x = DVector::from_vec(vec![1e-9, 2e-9, -1e-9, 1e-12, 0.0, 3e-12, 1e-18]);
        let mut f = CkfState::new(x.clone(), linalg::identity(7) * 1e-18).unwrap();
        let u = DVector::from_vec(vec![1e-10, 0.0, -1e-10]);
        let prior = &sys.a * &x + &sys.b * &u;
        let y = &sys.c * &prior;
        f.step(&y, &u, &sys, 1e-27, CkfUpdateForm::Standard).unwrap();
        assert!((&f.xhat - &prior).norm() <= 1e-12 * prior.norm());
    }

    #[test]
    fn as_printed_form_applies_dynamics_twice() {
        let s = spec();
        let sys = assemble_system(&s).unwrap();
        let x = DVector::from_vec(vec![1e-9, 2e-9, -1e-9, 1e-12, 0.0, 3e-12, 1e-18]);
        let u = DVector::zeros(3);
        let mut a = CkfState::new(x.clone(), linalg::identity(7) * 1e-18).unwrap();
        let mut b = a.clone();
        let prior = &sys.a * &x;
        let y = &sys.c * &prior;
        a.step(&y, &u, &sys, 1e-27, CkfUpdateForm::Standard).unwrap();
        b.step(&y, &u, &sys, 1e-27, CkfUpdateForm::AsPrinted).unwrap();
        assert!((&b.xhat - &sys.a * &a.xhat).norm() <= 1e-12 * b.xhat.norm());
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn common_mode_variance_grows() {
        let s = spec();
        let sys = assemble_system(&s).unwrap();
        let mut f = CkfState::with_isotropic(7, 0.0);
        let d = {
            let mut d = DVector::zeros(7);
            for i in 0..3 {
                d[i] = 1.0 / 3f64.sqrt();
            }
            d
        };
        let min_s1 = [0.17e-9f64, 0.09e-9, 0.02e-9].iter().map(|s| s * s).fold(f64::MAX, f64::min);
        let y = DVector::zeros(2);
        let u = DVector::zeros(3);
        let mut last = 0.0;
        for _ in 0..200 {
            f.step(&y, &u, &sys, 1e-27, CkfUpdateForm::Standard).unwrap();
            let v = (d.transpose() * &f.p * &d)[(0, 0)];
            assert!(v - last >= min_s1 / 3.0 * (1.0 - 1e-9));
            last = v;
        }
    }

    #[test]
    fn gain_settles() {
        // the step-to-step change bottoms out near 1e-9: the covariance
        // carries the growing common-mode variance, and C P Cᵀ cancels it
        let s = spec();
        let sys = assemble_system(&s).unwrap();
        let mut f = CkfState::with_isotropic(7, 0.0);
        let y = DVector::zeros(2);
        let u = DVector::zeros(3);
        let mut prev = DMatrix::zeros(7, 2);
        let mut worst_late = 0.0f64;
        for k in 0..3000 {
            f.step(&y, &u, &sys, 1e-27, CkfUpdateForm::Standard).unwrap();
            let g = f.gain.clone().unwrap();
            if k >= 2500 {
                worst_late = worst_late.max((&g - &prev).norm());
            }
            prev = g;
        }
        assert!(worst_late < 1e-8, "gain change {worst_late:e}");
    }

    #[test]
    fn dimension_errors() {
        let s = spec();
        let sys = assemble_system(&s).unwrap();
        let mut f = CkfState::with_isotropic(7, 0.0);
        assert!(f.step(&DVector::zeros(3), &DVector::zeros(3), &sys, 1e-27, CkfUpdateForm::Standard).is_err());
        assert!(f.step(&DVector::zeros(2), &DVector::zeros(2), &sys, 1e-27, CkfUpdateForm::Standard).is_err());
        assert!(CkfState::new(DVector::zeros(7), DMatrix::<f64>::zeros(6, 6)).is_err());
    }
}
