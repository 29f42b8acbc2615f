//! Hadamard-variance tools and stability-optimal ensemble weights.
//!
//! `Ψ(q)` is the free-running two-state dynamics of the weighted mean
//! `g = (I₂⊗qᵀ)x`, driven by the weighted process noise and with the maser
//! drift states left out. Its Hadamard variance at interval `τ` is
//! `qᵀΠ(τ)q / τ²` with `Π(τ) = τΣ₁ + (τ³/6)Σ₂ + (13τ⁵/360)Σ₃`.

use std::io::Write;

use nalgebra::{DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{check_tau, ClockKind, ClockSpec};
use crate::decomposition::WeightVector;
use crate::ensemble::{csv_err, NoiseDiagonals, SimulationTrace};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;

/// Third difference `p[k+3m] − 3p[k+2m] + 3p[k+m] − p[k]`, grouped as
/// `(p[k+3m] − p[k]) − 3(p[k+2m] − p[k+m])` so a constant series gives an
/// exact zero.
fn third_difference<T: Scalar>(p: &[T], k: usize, m: usize) -> T {
    (p[k + 3 * m] - p[k]) - T::lit(3.0) * (p[k + 2 * m] - p[k + m])
}

/// `1/(T−3m) Σ_{k=0}^{T−3m−1} (Δ³_m p[k])² / (6(mτ)²)` for a series
/// `p[0..=T]`.
pub fn hvar_estimate<T: Scalar>(series: &[T], tau: T, m: usize) -> Result<T> {
    check_tau(tau)?;
    if m == 0 {
        return Err(Error::Domain {
            what: "m",
            rule: "at least 1",
            value: 0.0,
        });
    }
    let t = series.len().saturating_sub(1);
    if series.is_empty() || t < 3 * m + 1 {
        return Err(Error::Domain {
            what: "series length",
            rule: "at least 3m + 2 samples",
            value: series.len() as f64,
        });
    }
    let terms = t - 3 * m;
    let sum = (0..terms).fold(T::zero(), |acc, k| {
        let d = third_difference(series, k, m);
        acc + d * d
    });
    let interval = T::of_usize(m) * tau;
    Ok(sum / (T::of_usize(terms) * T::lit(6.0) * interval * interval))
}

/// Powers of two `1, 2, 4, ..` up to `horizon / 4`.
pub fn octave_grid(horizon: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |m| m.checked_mul(2))
        .take_while(|&m| m <= (horizon / 4).max(1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvarSource {
    Empirical,
    Theoretical,
}

impl HvarSource {
    pub fn name(self) -> &'static str {
        match self {
            HvarSource::Empirical => "empirical",
            HvarSource::Theoretical => "theoretical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HvarPoint<T: Scalar> {
    pub m: usize,
    /// `m·τ` in seconds.
    pub interval: T,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvarCurve<T: Scalar> {
    pub points: Vec<HvarPoint<T>>,
    pub source: HvarSource,
}

impl<T: Scalar> HvarCurve<T> {
    pub fn value_at(&self, m: usize) -> Option<T> {
        self.points.iter().find(|p| p.m == m).map(|p| p.value)
    }
}

/// Empirical curve over the `m` grid; the grid is evaluated in parallel.
pub fn hvar_curve<T: Scalar>(series: &[T], tau: T, grid: &[usize]) -> Result<HvarCurve<T>> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSpec("m grid must be strictly increasing".into()));
    }
    let points = grid
        .par_iter()
        .map(|&m| {
            Ok(HvarPoint {
                m,
                interval: T::of_usize(m) * tau,
                value: hvar_estimate(series, tau, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HvarCurve {
        points,
        source: HvarSource::Empirical,
    })
}

/// One labelled curve in a long-format HVAR table.
pub struct HvarSeries<'a, T: Scalar> {
    pub series_id: &'a str,
    pub clock_id: Option<usize>,
    pub curve: &'a HvarCurve<T>,
}

/// Long-format CSV: `series_id, clock_id, m, interval_s, value, source`.
pub fn write_hvar_csv<T: Scalar, W: Write>(out: W, series: &[HvarSeries<'_, T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series_id", "clock_id", "m", "interval_s", "value", "source"])
        .map_err(csv_err)?;
    for s in series {
        let clock = s.clock_id.map(|c| c.to_string()).unwrap_or_default();
        for p in &s.curve.points {
            w.write_record([
                s.series_id,
                &clock,
                &p.m.to_string(),
                &format!("{:e}", p.interval.as_f64()),
                &format!("{:e}", p.value.as_f64()),
                s.curve.source.name(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `diag(Π(τ))` for the per-clock noise variances.
pub fn pi_diagonal<T: Scalar>(tau: T, sigmas: &NoiseDiagonals<T>) -> DVector<T> {
    let t3 = tau * tau * tau;
    let t5 = t3 * tau * tau;
    &sigmas.sigma1 * tau + &sigmas.sigma2 * (t3 / T::lit(6.0)) + &sigmas.sigma3 * (T::lit(13.0) * t5 / T::lit(360.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiModel<T: Scalar> {
    pub q: WeightVector<T>,
    pub sigmas: NoiseDiagonals<T>,
    pub tau: T,
}

impl<T: Scalar> PsiModel<T> {
    pub fn new(q: WeightVector<T>, sigmas: NoiseDiagonals<T>, tau: T, m: usize) -> Result<Self> {
        check_tau(tau)?;
        let n = q.len();
        for (what, v) in [("Sigma1", &sigmas.sigma1), ("Sigma2", &sigmas.sigma2), ("Sigma3", &sigmas.sigma3)] {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
            if v.iter().any(|x| !(x.as_f64() >= 0.0 && x.as_f64().is_finite())) {
                return Err(Error::InvalidSpec(format!("{what} must be finite and non-negative")));
            }
        }
        if m > n {
            return Err(Error::dim("maser count", n, m));
        }
        if sigmas.sigma3.iter().take(n - m).any(|x| *x != T::zero()) {
            return Err(Error::InvalidSpec("Sigma3 must vanish on the cesium clocks".into()));
        }
        Ok(PsiModel { q, sigmas, tau })
    }

    pub fn from_clocks(q: WeightVector<T>, clocks: &[ClockSpec<T>], tau: T) -> Result<Self> {
        let m = clocks.iter().filter(|c| c.kind == ClockKind::Hm).count();
        if q.len() != clocks.len() {
            return Err(Error::dim("weight vector", clocks.len(), q.len()));
        }
        Self::new(q, NoiseDiagonals::from_clocks(clocks), tau, m)
    }

    /// Same weights and noise at a different sampling interval.
    pub fn at_interval(&self, tau: T) -> Result<Self> {
        check_tau(tau)?;
        Ok(PsiModel {
            tau,
            ..self.clone()
        })
    }

    /// Covariance of the weighted per-step noise `(I₂⊗qᵀ)v^x`.
    pub fn noise_covariance(&self) -> Matrix2<T> {
        let q = self.q.as_vector();
        let tau = self.tau;
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let (t4, t5) = (t3 * tau, t3 * t2);
        let quad = |d: &DVector<T>| q.component_mul(q).dot(d);
        let (s1, s2, s3) = (quad(&self.sigmas.sigma1), quad(&self.sigmas.sigma2), quad(&self.sigmas.sigma3));
        let pp = tau * s1 + t3 / T::lit(3.0) * s2 + t5 / T::lit(20.0) * s3;
        let pf = t2 / T::lit(2.0) * s2 + t4 / T::lit(8.0) * s3;
        let ff = tau * s2 + t3 / T::lit(3.0) * s3;
        Matrix2::new(pp, pf, pf, ff)
    }

    /// Phase `h_g[k]` of `g[k+1] = A g[k] + w[k]`, `g[0] = 0`, for `steps` steps.
    pub fn simulate(&self, steps: usize, seed: u64, label: u64) -> Vec<T> {
        let qx = self.noise_covariance();
        let factor = linalg::covariance_factor(&nalgebra::DMatrix::from_iterator(2, 2, qx.iter().copied()));
        let l = Matrix2::new(factor[(0, 0)], factor[(0, 1)], factor[(1, 0)], factor[(1, 1)]);
        let a = Matrix2::new(T::one(), self.tau, T::zero(), T::one());
        let mut stream = rng::stream(seed, label);
        let mut g = Vector2::zeros();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(g[0]);
        for _ in 0..steps {
            let xi = Vector2::new(rng::normal::<T>(&mut stream), rng::normal::<T>(&mut stream));
            g = a * g + l * xi;
            out.push(g[0]);
        }
        out
    }
}

/// `qᵀΠ(τ)q / τ²`.
pub fn hvar_psi<T: Scalar>(model: &PsiModel<T>) -> T {
    let q = model.q.as_vector();
    let pi = pi_diagonal(model.tau, &model.sigmas);
    q.component_mul(q).dot(&pi) / (model.tau * model.tau)
}

/// Closed-form curve `qᵀΠ(mτ)q / (mτ)²` over the grid.
pub fn psi_curve<T: Scalar>(model: &PsiModel<T>, grid: &[usize]) -> Result<HvarCurve<T>> {
    let points = grid
        .iter()
        .map(|&m| {
            let interval = T::of_usize(m) * model.tau;
            Ok(HvarPoint {
                m,
                interval,
                value: hvar_psi(&model.at_interval(interval)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HvarCurve {
        points,
        source: HvarSource::Theoretical,
    })
}

/// Realisation of `Ψ(q)` driven by the process noise recorded in `trace`:
/// `g[k+1] = A g[k] + (I₂⊗qᵀ)v^x[k]`, `g[0] = (I₂⊗qᵀ)x[0]`.
pub fn psi_trace_from_noise<T: Scalar>(trace: &SimulationTrace<T>, q: &WeightVector<T>, tau: T) -> Result<Vec<T>> {
    let n = trace.n;
    if q.len() != n {
        return Err(Error::dim("weight vector", n, q.len()));
    }
    let q = q.as_vector();
    let a = Matrix2::new(T::one(), tau, T::zero(), T::one());
    let x0 = &trace.records[0].x;
    let mut g = Vector2::new(q.dot(&x0.rows(0, n)), q.dot(&x0.rows(n, n)));
    let mut out = Vec::with_capacity(trace.len());
    for (k, rec) in trace.records.iter().enumerate() {
        out.push(g[0]);
        if k + 1 == trace.len() {
            break;
        }
        let (v, _) = rec
            .noise
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("trace was recorded without noise".into()))?;
        g = a * g + Vector2::new(q.dot(&v.rows(0, n)), q.dot(&v.rows(n, n)));
    }
    Ok(out)
}

fn inverse_weights<T: Scalar>(d: DVector<T>, what: &'static str) -> Result<WeightVector<T>> {
    if let Some(i) = d.iter().position(|x| !(*x > T::zero())) {
        return Err(Error::Singular {
            what,
            cond: if d[i] == T::zero() { f64::INFINITY } else { f64::NAN },
        });
    }
    WeightVector::normalized(d.map(|x| T::one() / x))
}

/// `q_H(τ) = Π⁻¹(τ)1 / (1ᵀΠ⁻¹(τ)1)`.
pub fn optimal_weight<T: Scalar>(tau: T, sigmas: &NoiseDiagonals<T>) -> Result<WeightVector<T>> {
    check_tau(tau)?;
    inverse_weights(pi_diagonal(tau, sigmas), "Pi(tau) (a clock with no noise)")
}

/// Short-interval limit: weights proportional to `1/σ₁²`.
pub fn weight_short_term<T: Scalar>(sigma1_sq: &DVector<T>) -> Result<WeightVector<T>> {
    inverse_weights(sigma1_sq.clone(), "Sigma1 (a clock with zero white FM noise)")
}

/// Long-interval limit: cesium weights proportional to `1/σ₂²`, masers zero.
pub fn weight_long_term<T: Scalar>(sigma2_sq: &DVector<T>, n: usize, m: usize) -> Result<WeightVector<T>> {
    if sigma2_sq.len() != n || m >= n {
        return Err(Error::dim("Sigma2", n, sigma2_sq.len()));
    }
    let cs = sigma2_sq.rows(0, n - m).into_owned();
    let cs_q = inverse_weights(cs, "Sigma2 of a cesium clock")?;
    let mut q = DVector::zeros(n);
    q.rows_mut(0, n - m).copy_from(cs_q.as_vector());
    WeightVector::new(q)
}
