//! Single-clock stochastic deviation models.
//!
//! A cesium-type clock carries phase and frequency deviation; a hydrogen
//! maser additionally carries a frequency-drift state driven by a random
//! run. Both are exact discretisations of integrated white noise over the
//! sampling interval `tau`, which is why the process covariances below carry
//! the `tau^k / k!`-style coefficients.

use nalgebra::{Matrix2, Matrix3, RowVector2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// Cesium: two states (phase, frequency).
    Cs,
    /// Hydrogen maser: three states (phase, frequency, drift).
    Hm,
}

impl ClockKind {
    pub fn state_dim(self) -> usize {
        match self {
            ClockKind::Cs => 2,
            ClockKind::Hm => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClockKind::Cs => "Cs",
            ClockKind::Hm => "Hm",
        }
    }
}

/// Noise standard deviations of one clock, in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSpec<T> {
    pub kind: ClockKind,
    /// White frequency noise.
    pub sigma1: T,
    /// Random-walk frequency noise.
    pub sigma2: T,
    /// Random run of frequency drift; zero for cesium clocks.
    pub sigma3: T,
}

impl<T: Scalar> ClockSpec<T> {
    pub fn cs(sigma1: T, sigma2: T) -> Result<Self> {
        Self::new(ClockKind::Cs, sigma1, sigma2, T::zero())
    }

    pub fn hm(sigma1: T, sigma2: T, sigma3: T) -> Result<Self> {
        Self::new(ClockKind::Hm, sigma1, sigma2, sigma3)
    }

    pub fn new(kind: ClockKind, sigma1: T, sigma2: T, sigma3: T) -> Result<Self> {
        let spec = ClockSpec {
            kind,
            sigma1,
            sigma2,
            sigma3,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, s) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("sigma3", self.sigma3),
        ] {
            if !(s.as_f64().is_finite() && s >= T::zero()) {
                return Err(Error::Domain {
                    what,
                    rule: "finite and non-negative",
                    value: s.as_f64(),
                });
            }
        }
        if self.kind == ClockKind::Cs && self.sigma3 != T::zero() {
            return Err(Error::Domain {
                what: "sigma3 of a Cs clock",
                rule: "zero",
                value: self.sigma3.as_f64(),
            });
        }
        Ok(())
    }
}

/// Deviation state of one clock. `z` stays zero for cesium clocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockState<T> {
    pub kind: ClockKind,
    pub p: T,
    pub f: T,
    pub z: T,
}

impl<T: Scalar> ClockState<T> {
    pub fn zero(kind: ClockKind) -> Self {
        ClockState {
            kind,
            p: T::zero(),
            f: T::zero(),
            z: T::zero(),
        }
    }
}

/// The per-clock building blocks `A`, `B`, `beta`, `C` for a sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMatrices<T: Scalar> {
    pub a: Matrix2<T>,
    pub b: Vector2<T>,
    pub beta: Vector2<T>,
    pub c: RowVector2<T>,
    pub tau: T,
}

pub(crate) fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.as_f64().is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "tau",
            rule: "positive and finite",
            value: tau.as_f64(),
        })
    }
}

impl<T: Scalar> BaseMatrices<T> {
    pub fn new(tau: T) -> Result<Self> {
        check_tau(tau)?;
        let (o, z) = (T::one(), T::zero());
        Ok(BaseMatrices {
            a: Matrix2::new(o, tau, z, o),
            b: Vector2::new(tau, o),
            beta: Vector2::new(tau * tau * T::lit(0.5), tau),
            c: RowVector2::new(o, z),
            tau,
        })
    }
}

fn expect_kind<T>(spec: &ClockSpec<T>, kind: ClockKind) -> Result<()> {
    if spec.kind == kind {
        Ok(())
    } else {
        Err(Error::KindMismatch {
            expected: kind.name(),
            found: spec.kind.name(),
        })
    }
}

/// Process-noise covariance of a cesium clock over one interval.
pub fn cs_process_covariance<T: Scalar>(tau: T, spec: &ClockSpec<T>) -> Result<Matrix2<T>> {
    check_tau(tau)?;
    expect_kind(spec, ClockKind::Cs)?;
    let (s1, s2) = (spec.sigma1 * spec.sigma1, spec.sigma2 * spec.sigma2);
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let pp = tau * s1 + t3 / T::lit(3.0) * s2;
    let pf = t2 / T::lit(2.0) * s2;
    let ff = tau * s2;
    Ok(Matrix2::new(pp, pf, pf, ff))
}

/// Process-noise covariance of a hydrogen maser over one interval.
///
/// Term ordering matches [`cs_process_covariance`] so that `sigma3 = 0`
/// reproduces the cesium block bit for bit.
pub fn hm_process_covariance<T: Scalar>(tau: T, spec: &ClockSpec<T>) -> Result<Matrix3<T>> {
    check_tau(tau)?;
    expect_kind(spec, ClockKind::Hm)?;
    let (s1, s2, s3) = (
        spec.sigma1 * spec.sigma1,
        spec.sigma2 * spec.sigma2,
        spec.sigma3 * spec.sigma3,
    );
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let t4 = t3 * tau;
    let t5 = t4 * tau;
    let pp = tau * s1 + t3 / T::lit(3.0) * s2 + t5 / T::lit(20.0) * s3;
    let pf = t2 / T::lit(2.0) * s2 + t4 / T::lit(8.0) * s3;
    let pz = t3 / T::lit(6.0) * s3;
    let ff = tau * s2 + t3 / T::lit(3.0) * s3;
    let fz = t2 / T::lit(2.0) * s3;
    let zz = tau * s3;
    Ok(Matrix3::new(pp, pf, pz, pf, ff, fz, pz, fz, zz))
}

/// Advances one clock by a sampling interval.
///
/// `noise` must have 2 entries for a cesium clock and 3 for a maser. The
/// drift state receives no input.
pub fn step_clock<T: Scalar>(
    state: &ClockState<T>,
    u: T,
    noise: &[T],
    base: &BaseMatrices<T>,
) -> Result<ClockState<T>> {
    let dim = state.kind.state_dim();
    if noise.len() != dim {
        return Err(Error::dim("clock noise", dim, noise.len()));
    }
    let pf = base.a * Vector2::new(state.p, state.f) + base.b * u;
    Ok(match state.kind {
        ClockKind::Cs => ClockState {
            kind: ClockKind::Cs,
            p: pf[0] + noise[0],
            f: pf[1] + noise[1],
            z: T::zero(),
        },
        ClockKind::Hm => {
            let drift = base.beta * state.z;
            ClockState {
                kind: ClockKind::Hm,
                p: pf[0] + drift[0] + noise[0],
                f: pf[1] + drift[1] + noise[1],
                z: state.z + noise[2],
            }
        }
    })
}

/// Closed-form Hadamard variance of a free-running clock at interval `tau`.
pub fn theoretical_free_hvar<T: Scalar>(tau: T, spec: &ClockSpec<T>) -> Result<T> {
    check_tau(tau)?;
    let (s1, s2, s3) = (
        spec.sigma1 * spec.sigma1,
        spec.sigma2 * spec.sigma2,
        spec.sigma3 * spec.sigma3,
    );
    let t3 = tau * tau * tau;
    Ok(s1 / tau + tau / T::lit(6.0) * s2 + T::lit(11.0) * t3 / T::lit(120.0) * s3)
}

/// Dense view of a clock's state as a 2- or 3-vector.
pub fn state_vector<T: Scalar>(state: &ClockState<T>) -> Vec<T> {
    match state.kind {
        ClockKind::Cs => vec![state.p, state.f],
        ClockKind::Hm => Vector3::new(state.p, state.f, state.z).iter().copied().collect(),
    }
}
