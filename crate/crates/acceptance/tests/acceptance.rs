//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed whether or not
//! it passes; the process exits non-zero if any criterion fails. All
//! tolerances and budgets are pinned below. Runs use the bundled ten-clock
//! scenario unless stated otherwise.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use clock_ensemble::clock::{theoretical_free_hvar, ClockSpec};
use clock_ensemble::config::{self, ScenarioConfig, WeightMode};
use clock_ensemble::control::{closed_loop_simulate, feedback_gains, phase_spread, ClosedLoopOptions};
use clock_ensemble::decomposition::WeightVector;
use clock_ensemble::ensemble::{simulate, NoiseDiagonals, SimulationOptions, SimulationTrace, ZeroPolicy};
use clock_ensemble::filters::steady::{
    closed_loop_matrix, iterate_to_limit, solve_cross_covariance, CrossCovarianceMethod,
};
use clock_ensemble::filters::tkf::DEFAULT_P_OO_SCALE;
use clock_ensemble::filters::{steady_gains, CkfState, CkfUpdateForm, RiccatiOptions, TkfState};
use clock_ensemble::linalg::{relative_diff, spectral_radius};
use clock_ensemble::rng;
use clock_ensemble::scenario::{prepare, run_scenario, Prepared};
use clock_ensemble::stability::{
    hvar_curve, hvar_estimate, hvar_psi, octave_grid, optimal_weight, pi_diagonal, psi_curve, weight_long_term,
    weight_short_term, PsiModel,
};
use clock_ensemble::Result;

const SEED: u64 = 7;

// 1: divergence dichotomy
const C1_STEPS: usize = 5_000;
const C1_WINDOW: usize = 1_000;
const C1_MIN_GROWTH: f64 = 10.0;
const C1_MAX_REL_CHANGE: f64 = 1e-9;
const C1_BUDGET: Duration = Duration::from_secs(30);

// 2: filter equivalence
const C2_STEPS: usize = 200;
const C2_REL_TOL: f64 = 1e-8;
const C2_BUDGET: Duration = Duration::from_secs(5);

// 3: steady state
const C3_RESIDUAL_TOL: f64 = 1e-8;
const C3_LIMIT_REL_TOL: f64 = 1e-6;
/// Length of the literal filter run used as the limit oracle.
const C3_LIMIT_STEPS: usize = 200_000;
const C3_BUDGET: Duration = Duration::from_secs(60);

// 4: synchronisation
const C4_STEPS: usize = 10_000;
const C4_MIN_REDUCTION: f64 = 10.0;
const C4_UNSTABLE_GAMMA: f64 = 2.5;
const C4_UNSTABLE_STEPS: usize = 400;
/// Required growth of the unstable spread over the second half of its run.
const C4_MIN_DIVERGENCE: f64 = 1e10;
const C4_SEEDS: u64 = 64;
const C4_MEAN_STEP: usize = 5_000;
const C4_MAX_SE: f64 = 3.0;
const C4_BUDGET: Duration = Duration::from_secs(300);

// 5: optimal weights
const C5_TAUS: [f64; 3] = [0.1, 1.0, 100.0];
const C5_RANDOM_TRIALS: usize = 100;
const C5_GRID_TOL: f64 = 2e-3;
const C5_LIMIT_TOL: f64 = 1e-6;
const C5_SHORT_TAU: f64 = 1e-6;
const C5_LONG_TAU: f64 = 1e6;

// 6: estimator
const C6_WHITE_LEN: usize = 1_000_000;
const C6_WHITE_SIGMA: f64 = 1e-9;
const C6_WHITE_REL_TOL: f64 = 0.10;
const C6_FREE_STEPS: usize = 100_000;
const C6_FREE_REL_TOL: f64 = 0.20;
const C6_FREE_EXPECTED: f64 = 2.89e-20;

// 7: Ψ consistency
const C7_STEPS: usize = 1_000_000;
const C7_REL_TOL: f64 = 0.10;

// 8: figure-level ordering
const C8_SHORT_HORIZON: usize = 1_000;
const C8_SHORT_MAX_INTERVAL: f64 = 10.0;
const C8_PSI_FACTOR: f64 = 3.0;
const C8_LONG_HORIZON: usize = 100_000;
const C8_LONG_MIN_INTERVAL: f64 = 1e4;
const C8_BUDGET: Duration = Duration::from_secs(600);

// 9: determinism
const C9_HORIZON: usize = 1_000;

type Check = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn bundled() -> ScenarioConfig {
    config::bundled().expect("bundled scenario")
}

fn free_run(cfg: &ScenarioConfig, prep: &Prepared, horizon: usize, seed: u64) -> Result<SimulationTrace<f64>> {
    simulate(
        &prep.sys,
        &cfg.spec,
        &mut ZeroPolicy { n: cfg.spec.n() },
        horizon,
        seed,
        &SimulationOptions::default(),
    )
}

fn within_budget(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.2}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

fn divergence_dichotomy() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = bundled();
    let prep = prepare(&cfg)?;
    let trace = free_run(&cfg, &prep, C1_STEPS, SEED)?;
    let r = cfg.spec.r;
    let noise = prep.bundle.reduced_noise(&prep.sys.q);
    // The zero initial state is known exactly, so the CKF starts from one
    // step of process noise; an isotropic prior would first shrink on the
    // drift states before the phase growth takes over.
    let mut ckf = CkfState::new(DVector::zeros(prep.sys.state_dim()), prep.sys.q.clone())?;
    let mut tkf = TkfState::new(&prep.bundle, DEFAULT_P_OO_SCALE);
    let mut ckf_diag = Vec::with_capacity(C1_STEPS + 1);
    let mut p_oo_at_window = None;
    for (k, rec) in trace.records.iter().enumerate() {
        if k == 0 {
            ckf.correct(&rec.y, &prep.sys, r, CkfUpdateForm::Standard)?;
            tkf.correct(&rec.y, &prep.bundle, r)?;
        } else {
            ckf.step(&rec.y, &rec.u, &prep.sys, r, CkfUpdateForm::Standard)?;
            tkf.step(&rec.y, &rec.u, &prep.bundle, &noise, r)?;
        }
        ckf_diag.push(ckf.max_diagonal());
        if k == C1_STEPS - C1_WINDOW {
            p_oo_at_window = Some(tkf.p_oo.clone());
        }
    }
    let monotone = ckf_diag.windows(2).all(|w| w[1] >= w[0]);
    let growth = ckf_diag.last().unwrap() / ckf_diag[0];
    let rel_change = relative_diff(p_oo_at_window.as_ref().unwrap(), &tkf.p_oo);
    let (fast, time) = within_budget(start, C1_BUDGET);
    Ok(Outcome::new(
        monotone && growth > C1_MIN_GROWTH && rel_change < C1_MAX_REL_CHANGE && fast,
        format!(
            "CKF max-diagonal monotone={monotone} growth={growth:.3e} (>{C1_MIN_GROWTH}); \
             TKF ||P_oo|| change over last {C1_WINDOW} steps={rel_change:.3e} (<{C1_MAX_REL_CHANGE:e}); {time}"
        ),
    ))
}

fn filter_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = bundled();
    let prep = prepare(&cfg)?;
    let trace = free_run(&cfg, &prep, C2_STEPS, SEED)?;
    let r = cfg.spec.r;
    let noise = prep.bundle.reduced_noise(&prep.sys.q);
    let t = &prep.bundle.t;
    let mut ckf = CkfState::with_isotropic(prep.sys.state_dim(), DEFAULT_P_OO_SCALE);
    let mut tkf = TkfState::from_ckf(&ckf, &prep.bundle)?;
    let (mut worst_mean, mut worst_gain) = (0.0f64, 0.0f64);
    for (k, rec) in trace.records.iter().enumerate().take(C2_STEPS) {
        if k == 0 {
            ckf.correct(&rec.y, &prep.sys, r, CkfUpdateForm::Standard)?;
            tkf.correct(&rec.y, &prep.bundle, r)?;
        } else {
            ckf.step(&rec.y, &rec.u, &prep.sys, r, CkfUpdateForm::Standard)?;
            tkf.step(&rec.y, &rec.u, &prep.bundle, &noise, r)?;
        }
        let mapped = t * &ckf.xhat;
        let eta = tkf.mean.stacked();
        worst_mean = worst_mean.max((&mapped - &eta).norm() / eta.norm());
        let ckf_gain = ckf.gain.as_ref().expect("CKF gain after a correction");
        let (l_o, l_obar) = (tkf.l_o.as_ref().unwrap(), tkf.l_obar.as_ref().unwrap());
        let stacked = DMatrix::from_fn(l_o.nrows() + 2, l_o.ncols(), |i, j| {
            if i < l_o.nrows() {
                l_o[(i, j)]
            } else {
                l_obar[(i - l_o.nrows(), j)]
            }
        });
        worst_gain = worst_gain.max(relative_diff(&(t * ckf_gain), &stacked));
    }
    let (fast, time) = within_budget(start, C2_BUDGET);
    Ok(Outcome::new(
        worst_mean <= C2_REL_TOL && worst_gain <= C2_REL_TOL && fast,
        format!(
            "worst estimate mismatch {worst_mean:.3e}, worst gain mismatch {worst_gain:.3e} \
             over {C2_STEPS} steps (tol {C2_REL_TOL:e}); {time}"
        ),
    ))
}

fn steady_state() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = bundled();
    let prep = prepare(&cfg)?;
    let noise = prep.bundle.reduced_noise(&prep.sys.q);
    let g = steady_gains(&prep.bundle, &noise, cfg.spec.r, &RiccatiOptions::default())?;
    let rho = spectral_radius(&closed_loop_matrix(&prep.bundle, &g.l_o_star));
    let (p_oo_lim, p_obar_o_lim, p_obar_o_tail) = iterate_to_limit(&prep.bundle, &noise, cfg.spec.r, C3_LIMIT_STEPS)?;
    let p_oo_diff = relative_diff(&g.p_oo_star, &p_oo_lim);
    let p_obar_o_diff = relative_diff(&g.p_obar_o_star, &p_obar_o_lim);
    let tail_diff = relative_diff(&g.p_obar_o_star, &p_obar_o_tail);
    let smith = solve_cross_covariance(&prep.bundle, &noise, &g.p_oo_star, &g.l_o_star, CrossCovarianceMethod::Smith)
        .map(|x| format!("{:.3e}", relative_diff(&x, &g.p_obar_o_star)))
        .unwrap_or_else(|e| format!("failed ({e})"));
    let (fast, time) = within_budget(start, C3_BUDGET);
    Ok(Outcome::new(
        g.riccati_residual <= C3_RESIDUAL_TOL
            && g.cross_residual <= C3_RESIDUAL_TOL
            && p_oo_diff <= C3_LIMIT_REL_TOL
            && p_obar_o_diff <= C3_LIMIT_REL_TOL
            && rho < 1.0
            && fast,
        format!(
            "residuals riccati={:.3e} cross={:.3e} (tol {C3_RESIDUAL_TOL:e}); after {C3_LIMIT_STEPS} filter steps \
             P_oo diff={p_oo_diff:.3e}, P_obar_o diff={p_obar_o_diff:.3e} (tol {C3_LIMIT_REL_TOL:e}); \
             rho={rho:.10}; info: frozen-gain tail diff={tail_diff:.3e}, Smith vs LU={smith}; {time}",
            g.riccati_residual, g.cross_residual
        ),
    ))
}

fn mean_over(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn synchronisation() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = bundled();
    let prep = prepare(&cfg)?;
    let opts = cfg.closed_loop_options();
    let run = closed_loop_simulate(
        &cfg.spec,
        &prep.sys,
        &prep.bundle,
        &prep.gains,
        &cfg.controller,
        C4_STEPS,
        SEED,
        &opts,
    )?;
    let free = free_run(&cfg, &prep, C4_STEPS, SEED)?;
    let tail = C4_STEPS - C4_STEPS / 5..=C4_STEPS;
    let controlled = mean_over(tail.clone().map(|k| phase_spread(&run.trace, k)));
    let uncontrolled = mean_over(tail.map(|k| phase_spread(&free, k)));
    let reduction = uncontrolled / controlled;

    let unstable_cfg = feedback_gains(C4_UNSTABLE_GAMMA, cfg.spec.tau)?;
    let unstable = closed_loop_simulate(
        &cfg.spec,
        &prep.sys,
        &prep.bundle,
        &prep.gains,
        &unstable_cfg,
        C4_UNSTABLE_STEPS,
        SEED,
        &ClosedLoopOptions {
            allow_unstable: true,
            ..opts
        },
    )?;
    let divergence =
        phase_spread(&unstable.trace, C4_UNSTABLE_STEPS) / phase_spread(&unstable.trace, C4_UNSTABLE_STEPS / 2);

    let n = cfg.spec.n();
    let samples: Vec<DVector<f64>> = (0..C4_SEEDS)
        .map(|s| {
            let run = closed_loop_simulate(
                &cfg.spec,
                &prep.sys,
                &prep.bundle,
                &prep.gains,
                &cfg.controller,
                C4_MEAN_STEP,
                1_000 + s,
                &opts,
            )?;
            let p = run.trace.records[C4_MEAN_STEP].x.rows(0, n).into_owned();
            Ok(&cfg.spec.v * p)
        })
        .collect::<Result<_>>()?;
    let count = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(n - 1), |a, s| a + s) / count;
    let mut worst_z = 0.0f64;
    for j in 0..n - 1 {
        let var = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (count - 1.0);
        let se = (var / count).sqrt();
        worst_z = worst_z.max(mean[j].abs() / se);
    }
    let (fast, time) = within_budget(start, C4_BUDGET);
    Ok(Outcome::new(
        reduction >= C4_MIN_REDUCTION && divergence > C4_MIN_DIVERGENCE && worst_z <= C4_MAX_SE && fast,
        format!(
            "final-20% spread controlled={controlled:.3e} free={uncontrolled:.3e} reduction={reduction:.1}x \
             (>={C4_MIN_REDUCTION}); gamma={C4_UNSTABLE_GAMMA} spread growth={divergence:.3e} (>{C4_MIN_DIVERGENCE:e}); \
             worst |mean|/SE of V p at k={C4_MEAN_STEP} over {C4_SEEDS} seeds={worst_z:.2} (<={C4_MAX_SE}); {time}"
        ),
    ))
}

fn psi_value(q: &WeightVector<f64>, clocks: &[ClockSpec<f64>], tau: f64) -> Result<f64> {
    Ok(hvar_psi(&PsiModel::from_clocks(q.clone(), clocks, tau)?))
}

/// Minimises `qᵀΠq` over the three-clock simplex by a coarse grid followed by
/// a fine grid around the best coarse point.
fn grid_oracle(pi: &DVector<f64>) -> [f64; 3] {
    let cost = |a: f64, b: f64| pi[0] * a * a + pi[1] * b * b + pi[2] * (1.0 - a - b).powi(2);
    let search = |lo: (f64, f64), span: f64, step: f64| {
        let steps = (2.0 * span / step).round() as usize;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (lo.0 - span + i as f64 * step, lo.1 - span + j as f64 * step);
                let c = cost(a, b);
                if c < best.0 {
                    best = (c, a, b);
                }
            }
        }
        (best.1, best.2)
    };
    let coarse = search((0.5, 0.5), 1.0, 1e-2);
    let (a, b) = search(coarse, 2e-2, 1e-4);
    [a, b, 1.0 - a - b]
}

fn optimality() -> Result<Outcome> {
    let cfg = bundled();
    let clocks = &cfg.spec.clocks;
    let sigmas = cfg.noise();
    let n = cfg.spec.n();
    let mut stream = rng::stream(SEED, rng::WHITE_PHASE_STREAM + 100);
    let mut beaten = 0usize;
    for &tau in &C5_TAUS {
        let best = psi_value(&optimal_weight(tau, &sigmas)?, clocks, tau)?;
        for _ in 0..C5_RANDOM_TRIALS {
            let raw = DVector::from_fn(n, |_, _| rng::normal::<f64>(&mut stream).abs());
            let q = WeightVector::normalized(raw)?;
            if psi_value(&q, clocks, tau)? < best {
                beaten += 1;
            }
        }
    }

    let three = [clocks[0], clocks[1], clocks[7]];
    let small = NoiseDiagonals::from_clocks(&three);
    let mut grid_err = 0.0f64;
    for &tau in &C5_TAUS {
        let oracle = grid_oracle(&pi_diagonal(tau, &small));
        let q = optimal_weight(tau, &small)?;
        for (a, b) in q.as_slice().iter().zip(oracle) {
            grid_err = grid_err.max((a - b).abs());
        }
    }

    let short_err = optimal_weight(C5_SHORT_TAU, &sigmas)?
        .as_vector()
        .iter()
        .zip(weight_short_term(&sigmas.sigma1)?.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let long_opt = optimal_weight(C5_LONG_TAU, &sigmas)?;
    let long_ref = weight_long_term(&sigmas.sigma2, n, cfg.spec.m())?;
    let cs = n - cfg.spec.m();
    let diffs: Vec<f64> = long_opt
        .as_slice()
        .iter()
        .zip(long_ref.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let long_cs_err = diffs[..cs].iter().copied().fold(0.0, f64::max);
    let long_hm_err = diffs[cs..].iter().copied().fold(0.0, f64::max);
    Ok(Outcome::new(
        beaten == 0
            && grid_err <= C5_GRID_TOL
            && short_err <= C5_LIMIT_TOL
            && long_cs_err <= C5_LIMIT_TOL
            && long_hm_err <= C5_LIMIT_TOL,
        format!(
            "random weights beating q_H: {beaten}/{}; grid oracle max error {grid_err:.2e} (tol {C5_GRID_TOL:e}); \
             tau={C5_SHORT_TAU:e} vs short-term max error {short_err:.2e}; tau={C5_LONG_TAU:e} vs long-term \
             max error cs={long_cs_err:.2e} hm={long_hm_err:.2e} (tol {C5_LIMIT_TOL:e})",
            C5_TAUS.len() * C5_RANDOM_TRIALS
        ),
    ))
}

fn estimator_validity() -> Result<Outcome> {
    let tau = 1.0;
    let mut stream = rng::stream(SEED, rng::WHITE_PHASE_STREAM);
    let white: Vec<f64> = (0..C6_WHITE_LEN)
        .map(|_| C6_WHITE_SIGMA * rng::normal::<f64>(&mut stream))
        .collect();
    let expected = 20.0 * C6_WHITE_SIGMA * C6_WHITE_SIGMA / (6.0 * tau * tau);
    let white_err = (hvar_estimate(&white, tau, 1)? - expected).abs() / expected;

    let cfg = bundled();
    let prep = prepare(&cfg)?;
    let free = free_run(&cfg, &prep, C6_FREE_STEPS, SEED)?;
    let closed_form = theoretical_free_hvar(tau, &cfg.spec.clocks[0])?;
    let estimate = hvar_estimate(&free.phase(0), tau, 1)?;
    let free_err = (estimate - closed_form).abs() / closed_form;
    let form_err = (closed_form - C6_FREE_EXPECTED).abs() / C6_FREE_EXPECTED;

    let quadratic: Vec<f64> = (0..4096).map(|k| 3.0 - 2.0 * k as f64 + 0.5 * (k * k) as f64).collect();
    let mut worst_quadratic = 0.0f64;
    for m in [1, 2, 4, 8, 64] {
        worst_quadratic = worst_quadratic.max(hvar_estimate(&quadratic, tau, m)?.abs());
    }
    Ok(Outcome::new(
        white_err <= C6_WHITE_REL_TOL && free_err <= C6_FREE_REL_TOL && form_err <= 0.01 && worst_quadratic == 0.0,
        format!(
            "white phase rel error {white_err:.3} (tol {C6_WHITE_REL_TOL}); cs clock 1 estimate {estimate:.3e} vs \
             closed form {closed_form:.3e} rel error {free_err:.3} (tol {C6_FREE_REL_TOL}); quadratic max {worst_quadratic:e}"
        ),
    ))
}

fn psi_consistency() -> Result<Outcome> {
    let cfg = bundled();
    let tau = cfg.spec.tau;
    let sigmas = cfg.noise();
    let n = cfg.spec.n();
    let cases = [
        ("short_term", weight_short_term(&sigmas.sigma1)?),
        ("long_term", weight_long_term(&sigmas.sigma2, n, cfg.spec.m())?),
        ("uniform", WeightVector::uniform(n)?),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, q) in cases {
        let model = PsiModel::from_clocks(q, &cfg.spec.clocks, tau)?;
        let series = model.simulate(C7_STEPS, SEED, rng::PSI_STREAM);
        let theory = hvar_psi(&model);
        let err = (hvar_estimate(&series, tau, 1)? - theory).abs() / theory;
        worst = worst.max(err);
        parts.push(format!("{name} {err:.3}"));
    }
    Ok(Outcome::new(
        worst <= C7_REL_TOL,
        format!("rel error {} (tol {C7_REL_TOL})", parts.join(", ")),
    ))
}

fn figure_ordering() -> Result<Outcome> {
    let start = Instant::now();
    let base = bundled();
    let tau = base.spec.tau;
    let n = base.spec.n();
    let cs = n - base.spec.m();

    let cfg = base.with_weights(WeightMode::ShortTerm)?.with_run(C8_SHORT_HORIZON, vec![SEED])?;
    let prep = prepare(&cfg)?;
    let free = free_run(&cfg, &prep, C8_SHORT_HORIZON, SEED)?;
    let run = closed_loop_simulate(
        &cfg.spec,
        &prep.sys,
        &prep.bundle,
        &prep.gains,
        &cfg.controller,
        C8_SHORT_HORIZON,
        SEED,
        &cfg.closed_loop_options(),
    )?;
    let grid: Vec<usize> = octave_grid(C8_SHORT_HORIZON)
        .into_iter()
        .filter(|&m| m as f64 * tau <= C8_SHORT_MAX_INTERVAL)
        .collect();
    let free_cs_min = (0..cs)
        .map(|i| hvar_curve(&free.phase(i), tau, &grid))
        .collect::<Result<Vec<_>>>()?;
    let psi = psi_curve(&PsiModel::from_clocks(cfg.weights.clone(), &cfg.spec.clocks, tau)?, &grid)?;
    let theta = hvar_curve(&run.theta, tau, &grid)?;
    let (mut below, mut near_psi, mut theta_ok) = (true, true, true);
    let mut worst_ratio = 0.0f64;
    for i in 0..n {
        let ctrl = hvar_curve(&run.trace.phase(i), tau, &grid)?;
        for (j, p) in ctrl.points.iter().enumerate() {
            let floor = free_cs_min.iter().map(|c| c.points[j].value).fold(f64::INFINITY, f64::min);
            below &= p.value < floor;
            let ratio = (p.value / psi.points[j].value).max(psi.points[j].value / p.value);
            worst_ratio = worst_ratio.max(ratio);
            near_psi &= ratio <= C8_PSI_FACTOR;
        }
    }
    let mut theta_ratio = 0.0f64;
    for (j, p) in theta.points.iter().enumerate() {
        let floor = free_cs_min.iter().map(|c| c.points[j].value).fold(f64::INFINITY, f64::min);
        let ratio = (p.value / psi.points[j].value).max(psi.points[j].value / p.value);
        theta_ratio = theta_ratio.max(ratio);
        theta_ok &= p.value < floor && ratio <= C8_PSI_FACTOR;
    }

    let long = base.with_weights(WeightMode::LongTerm)?.with_run(C8_LONG_HORIZON, vec![SEED])?;
    let prep = prepare(&long)?;
    let free = free_run(&long, &prep, C8_LONG_HORIZON, SEED)?;
    let run = closed_loop_simulate(
        &long.spec,
        &prep.sys,
        &prep.bundle,
        &prep.gains,
        &long.controller,
        C8_LONG_HORIZON,
        SEED,
        &long.closed_loop_options(),
    )?;
    let grid: Vec<usize> = octave_grid(C8_LONG_HORIZON)
        .into_iter()
        .filter(|&m| m as f64 * tau >= C8_LONG_MIN_INTERVAL)
        .collect();
    let free_hm = (cs..n)
        .map(|i| hvar_curve(&free.phase(i), tau, &grid))
        .collect::<Result<Vec<_>>>()?;
    let mut long_ok = !grid.is_empty();
    let mut long_margin = f64::INFINITY;
    for i in 0..n {
        let ctrl = hvar_curve(&run.trace.phase(i), tau, &grid)?;
        for (j, p) in ctrl.points.iter().enumerate() {
            let floor = free_hm.iter().map(|c| c.points[j].value).fold(f64::INFINITY, f64::min);
            long_margin = long_margin.min(floor / p.value);
            long_ok &= p.value < floor;
        }
    }
    let (fast, time) = within_budget(start, C8_BUDGET);
    Ok(Outcome::new(
        below && near_psi && long_ok && fast,
        format!(
            "short term: controlled clocks below free cs={below}, worst ratio to psi model {worst_ratio:.2} \
             (<= {C8_PSI_FACTOR}); info: weighted mean below free cs and near psi={theta_ok} (ratio {theta_ratio:.2}); \
             long term at m tau in {grid:?}: controlled below free hm={long_ok} (min margin {long_margin:.2}x); {time}"
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let mut file = bundled().file;
    file.filter.kinds = vec![config::FilterKind::Ckf, config::FilterKind::Tkf, config::FilterKind::Sstkf];
    file.run.horizon = C9_HORIZON;
    file.run.seeds = vec![SEED, SEED + 1];
    let cfg = ScenarioConfig::from_file(file)?;
    let tmp = tempfile::tempdir()?;
    let a = run_scenario(&cfg, &tmp.path().join("a"))?;
    let b = run_scenario(&cfg, &tmp.path().join("b"))?;
    let mut identical = a.files == b.files;
    let mut csvs = 0;
    for f in &a.files {
        let left = std::fs::read(a.dir.join(&f.path))?;
        let right = std::fs::read(b.dir.join(&f.path))?;
        identical &= left == right;
        csvs += f.path.ends_with(".csv") as usize;
    }
    let manifests = std::fs::read(a.dir.join("manifest.json"))? == std::fs::read(b.dir.join("manifest.json"))?;
    Ok(Outcome::new(
        identical && manifests && csvs > 0,
        format!("{csvs} CSV files byte-identical={identical}, manifests identical={manifests}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("divergence dichotomy", divergence_dichotomy),
        ("filter equivalence", filter_equivalence),
        ("steady-state correctness", steady_state),
        ("synchronisation", synchronisation),
        ("weight optimality", optimality),
        ("hvar estimator validity", estimator_validity),
        ("psi model consistency", psi_consistency),
        ("figure-level ordering", figure_ordering),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id} {name}: {}", outcome.detail);
        failed += !outcome.pass as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
