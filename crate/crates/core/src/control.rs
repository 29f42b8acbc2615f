//! Explicit ensemble-mean synchronisation control.
//!
//! The input `u = V⁺φ` with `φ = −[F⊗I_{N−1}, D⊗VJ] η̂_o` steers every
//! clock towards the weighted mean `θ_ō = qᵀp`. Because `qᵀV⁺ = 0` the
//! input never moves the weighted mean itself.

use nalgebra::{DMatrix, DVector, Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::decomposition::DecompositionBundle;
use crate::ensemble::{self, EnsembleSpec, SimulationOptions, SimulationTrace, SystemMatrices};
use crate::error::{Error, Result};
use crate::filters::{sstkf_step, SteadyGains, TkfMean, TkfState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig<T: Scalar> {
    pub gamma: T,
    pub tau: T,
    /// `[γ/τ, 1]`
    pub f: RowVector2<T>,
    /// `τ/2`
    pub d: T,
    /// `|1 − γ| < 1`
    pub stable: bool,
}

/// Feedback gains for parameter `gamma`; the stability flag is recorded, not enforced.
pub fn feedback_gains<T: Scalar>(gamma: T, tau: T) -> Result<ControllerConfig<T>> {
    crate::clock::check_tau(tau)?;
    if !gamma.as_f64().is_finite() {
        return Err(Error::Domain {
            what: "gamma",
            rule: "finite",
            value: gamma.as_f64(),
        });
    }
    Ok(ControllerConfig {
        gamma,
        tau,
        f: RowVector2::new(gamma / tau, T::one()),
        d: tau * T::lit(0.5),
        stable: (T::one() - gamma).abs() < T::one(),
    })
}

impl<T: Scalar> ControllerConfig<T> {
    /// `A − BF`
    pub fn closed_loop_a(&self) -> Matrix2<T> {
        let a = Matrix2::new(T::one(), self.tau, T::zero(), T::one());
        let b = Vector2::new(self.tau, T::one());
        a - b * self.f
    }

    /// `β − DB`
    pub fn drift_residual(&self) -> Vector2<T> {
        let beta = Vector2::new(self.tau * self.tau * T::lit(0.5), self.tau);
        let b = Vector2::new(self.tau, T::one());
        beta - b * self.d
    }

    /// Fails unless stable or explicitly overridden.
    pub fn require_stable(&self, allow_unstable: bool) -> Result<()> {
        if self.stable || allow_unstable {
            Ok(())
        } else {
            Err(Error::UnstableGain {
                gamma: self.gamma.as_f64(),
            })
        }
    }
}

/// `u = V⁺φ`, `φ = −(F⊗I)ξ − (D⊗VJ)ν` for `η̂_o = [ξ^p; ξ^f; ν]`.
pub fn control_input<T: Scalar>(
    eta_o: &DVector<T>,
    cfg: &ControllerConfig<T>,
    bundle: &DecompositionBundle<T>,
) -> Result<DVector<T>> {
    let n1 = bundle.n - 1;
    if eta_o.len() != bundle.obs_dim() {
        return Err(Error::dim("observable estimate", bundle.obs_dim(), eta_o.len()));
    }
    let xi_p = eta_o.rows(0, n1);
    let xi_f = eta_o.rows(n1, n1);
    let nu = eta_o.rows(2 * n1, bundle.m);
    let phi = -(xi_p * cfg.f[0] + xi_f * cfg.f[1] + &bundle.vj * nu * cfg.d);
    Ok(&bundle.vplus * phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    /// Frozen steady-state gains.
    #[default]
    Steady,
    /// Time-varying transformed filter.
    TimeVarying,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopOptions {
    pub filter: FilterChoice,
    /// `P_oo[0]` scale for the time-varying filter.
    pub p_oo_scale: f64,
    pub allow_unstable: bool,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        ClosedLoopOptions {
            filter: FilterChoice::Steady,
            p_oo_scale: crate::filters::tkf::DEFAULT_P_OO_SCALE,
            allow_unstable: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun<T: Scalar> {
    /// Truth, measurements, inputs, and the drawn noise.
    pub trace: SimulationTrace<T>,
    /// Filter estimate after the correction at each step.
    pub estimates: Vec<TkfMean<T>>,
    /// `qᵀp[k]` from the simulated states.
    pub theta: Vec<T>,
    /// `θ_ō[k]` re-integrated from the mean dynamics with the true drifts
    /// and the same process-noise draws.
    pub theta_reintegrated: Vec<T>,
    pub max_abs_u: T,
}

impl<T: Scalar> ClosedLoopRun<T> {
    /// `max_i |p_i[k] − θ[k]|`.
    pub fn sync_error(&self, k: usize) -> T {
        let theta = self.theta[k];
        let x = &self.trace.records[k].x;
        (0..self.trace.n).map(|i| (x[i] - theta).abs()).fold(T::zero(), |a, b| a.max(b))
    }
}

/// `max_{i,j} |p_i − p_j|` at step `k`.
pub fn phase_spread<T: Scalar>(trace: &SimulationTrace<T>, k: usize) -> T {
    let x = &trace.records[k].x;
    let p = x.rows(0, trace.n);
    p.max() - p.min()
}

/// `(I₂⊗qᵀ)x` for every record.
pub fn weighted_mean_phase<T: Scalar>(trace: &SimulationTrace<T>, bundle: &DecompositionBundle<T>) -> Vec<T> {
    let q = bundle.q.as_vector();
    trace
        .records
        .iter()
        .map(|r| q.dot(&r.x.rows(0, trace.n)))
        .collect()
}

/// Runs the ensemble under filter-plus-feedback control.
///
/// Step 0 corrects the zero initial estimate with `y[0]`; afterwards each
/// step predicts with `u[k−1]`, corrects with `y[k]`, and emits `u[k]`.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_simulate<T: Scalar>(
    spec: &EnsembleSpec<T>,
    sys: &SystemMatrices<T>,
    bundle: &DecompositionBundle<T>,
    gains: &SteadyGains<T>,
    cfg: &ControllerConfig<T>,
    horizon: usize,
    seed: u64,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopRun<T>> {
    cfg.require_stable(opts.allow_unstable)?;
    if bundle.n != sys.n || bundle.m != sys.m {
        return Err(Error::dim("decomposition clocks", sys.n, bundle.n));
    }
    let noise = bundle.reduced_noise(&sys.q);
    let mut estimates: Vec<TkfMean<T>> = Vec::with_capacity(horizon + 1);
    let mut tkf = TkfState::new(bundle, T::lit(opts.p_oo_scale));
    let mut last_u = DVector::zeros(sys.n);
    let mut max_abs_u = T::zero();
    let mut policy = |k: usize, y: &DVector<T>| -> Result<DVector<T>> {
        let mean = match (opts.filter, k) {
            (FilterChoice::Steady, 0) => {
                let prior = TkfMean::zeros(bundle);
                let innovation = prior.innovation(y, bundle)?;
                prior.corrected(&innovation, &gains.l_o_star, &gains.l_obar_star)
            }
            (FilterChoice::Steady, _) => sstkf_step(estimates.last().expect("estimate"), y, &last_u, bundle, gains)?,
            (FilterChoice::TimeVarying, 0) => {
                tkf.correct(y, bundle, spec.r)?;
                tkf.mean.clone()
            }
            (FilterChoice::TimeVarying, _) => {
                tkf.step(y, &last_u, bundle, &noise, spec.r)?;
                tkf.mean.clone()
            }
        };
        let u = control_input(&mean.eta_o, cfg, bundle)?;
        max_abs_u = u.iter().fold(max_abs_u, |a, v| a.max(v.abs()));
        estimates.push(mean);
        last_u = u.clone();
        Ok(u)
    };
    let sim_opts = SimulationOptions {
        record_noise: true,
        ..Default::default()
    };
    let trace = ensemble::simulate(sys, spec, &mut policy, horizon, seed, &sim_opts)?;
    let theta = weighted_mean_phase(&trace, bundle);
    let theta_reintegrated = reintegrate_mean(&trace, bundle);
    Ok(ClosedLoopRun {
        trace,
        estimates,
        theta,
        theta_reintegrated,
        max_abs_u,
    })
}

/// `η_ō[k+1] = Aη_ō[k] + (β⊗qᵀJ)z[k] + (I₂⊗qᵀ)v^x[k]`, started from the
/// true weighted mean; returns the phase component.
pub fn reintegrate_mean<T: Scalar>(trace: &SimulationTrace<T>, bundle: &DecompositionBundle<T>) -> Vec<T> {
    let n = trace.n;
    let q = bundle.q.as_vector();
    let qj = &bundle.qj;
    let a = bundle.a;
    let tau = bundle.tau;
    let beta = Vector2::new(tau * tau * T::lit(0.5), tau);
    let first = &trace.records[0].x;
    let mut eta = Vector2::new(q.dot(&first.rows(0, n)), q.dot(&first.rows(n, n)));
    let mut out = Vec::with_capacity(trace.len());
    for rec in &trace.records {
        out.push(eta[0]);
        let Some((v, _)) = rec.noise.as_ref() else { break };
        let drift = (qj * &rec.z)[(0, 0)];
        let vx = Vector2::new(q.dot(&v.rows(0, n)), q.dot(&v.rows(n, n)));
        eta = a * eta + beta * drift + vx;
    }
    out
}

/// `(1 − γ) I_{N−1}`, the closed-loop phase block seen by `ξ^p_o`.
pub fn phase_error_dynamics<T: Scalar>(gamma: T, n: usize) -> DMatrix<T> {
    DMatrix::identity(n - 1, n - 1) * (T::one() - gamma)
}
