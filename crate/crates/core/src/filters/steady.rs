//! Steady-state gains for the transformed filter.
//!
//! `P*_oo` is the stabilising solution of the filter Riccati equation for
//! the observable block. `P*_ōo` then solves the linear fixed point
//! `X = T_ōQT_oᵀ + A X Mᵀ + A_ōo(I − L*_o C_o)P*_oo A_ooᵀ`, where
//! `M = A_oo(I − L*_o C_o)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::innovation_inverse;
use super::tkf::{self, TkfMean};
use crate::decomposition::{DecompositionBundle, ReducedNoise};
use crate::ensemble::csv_err;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Acceptance bound on the relative Riccati and cross-covariance residuals.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiMethod {
    /// Structure-preserving doubling; quadratic convergence.
    #[default]
    Doubling,
    /// Iterates the filter's own prior-covariance recursion.
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    pub method: RiccatiMethod,
    /// Stop when the relative change between iterates falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            method: RiccatiMethod::Doubling,
            tol: 1e-14,
            max_iter: 200,
        }
    }
}

impl RiccatiOptions {
    pub fn fixed_point() -> Self {
        RiccatiOptions {
            method: RiccatiMethod::FixedPoint,
            tol: 1e-12,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution<T: Scalar> {
    /// Steady prior covariance `P*_oo`.
    pub p: DMatrix<T>,
    pub iterations: usize,
    pub residual: f64,
}

/// Right-hand side of the filter Riccati equation at `p`.
pub fn riccati_map<T: Scalar>(
    p: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
) -> Result<DMatrix<T>> {
    let s_inv = innovation_inverse(&bundle.c_o, p, r)?;
    let pc = p * bundle.c_o.transpose();
    let post = p - &pc * s_inv * pc.transpose();
    let mut next = &bundle.a_oo * post * bundle.a_oo.transpose() + &noise.q_oo;
    linalg::symmetrize(&mut next);
    Ok(next)
}

/// `‖map(P) − P‖_F / ‖P‖_F`.
pub fn riccati_residual<T: Scalar>(
    p: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
) -> Result<f64> {
    Ok(linalg::relative_diff(&riccati_map(p, bundle, noise, r)?, p).as_f64())
}

pub fn solve_riccati<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution<T>> {
    let (p, iterations) = match opts.method {
        RiccatiMethod::Doubling => doubling(bundle, noise, r, opts)?,
        RiccatiMethod::FixedPoint => fixed_point(bundle, noise, r, opts)?,
    };
    let residual = riccati_residual(&p, bundle, noise, r)?;
    if !(residual <= RESIDUAL_TOL) {
        return Err(Error::NoConvergence {
            what: "Riccati equation",
            iterations,
            residual,
        });
    }
    Ok(RiccatiSolution { p, iterations, residual })
}

fn fixed_point<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
    opts: &RiccatiOptions,
) -> Result<(DMatrix<T>, usize)> {
    let mut p = noise.q_oo.clone();
    let mut change = f64::INFINITY;
    for k in 1..=opts.max_iter {
        let next = riccati_map(&p, bundle, noise, r)?;
        change = linalg::relative_diff(&next, &p).as_f64();
        p = next;
        if change <= opts.tol {
            return Ok((p, k));
        }
    }
    Err(Error::NoConvergence {
        what: "Riccati fixed-point iteration",
        iterations: opts.max_iter,
        residual: change,
    })
}

/// Structure-preserving doubling on the dual (control-form) equation,
/// in units where `r = 1`.
fn doubling<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
    opts: &RiccatiOptions,
) -> Result<(DMatrix<T>, usize)> {
    if !(r > T::zero()) {
        return Err(Error::Singular {
            what: "measurement noise variance (doubling needs r > 0)",
            cond: f64::INFINITY,
        });
    }
    let id = linalg::identity::<T>(bundle.a_oo.nrows());
    let scale = T::one() / r;
    let mut a = bundle.a_oo.transpose();
    let mut g = bundle.c_o.transpose() * &bundle.c_o;
    let mut h = &noise.q_oo * scale;
    let mut change = f64::INFINITY;
    for k in 1..=opts.max_iter {
        let w = &id + &g * &h;
        let lu = w.lu();
        let w_a = lu.solve(&a).ok_or(Error::Singular {
            what: "doubling step I + GH",
            cond: f64::INFINITY,
        })?;
        let w_g = lu.solve(&g).ok_or(Error::Singular {
            what: "doubling step I + GH",
            cond: f64::INFINITY,
        })?;
        let a_t = a.transpose();
        let mut h_next = &h + &a_t * &h * &w_a;
        let mut g_next = &g + &a * w_g * &a_t;
        linalg::symmetrize(&mut h_next);
        linalg::symmetrize(&mut g_next);
        a = &a * w_a;
        change = linalg::relative_diff(&h_next, &h).as_f64();
        h = h_next;
        g = g_next;
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            return Ok((h / scale, k));
        }
    }
    Err(Error::NoConvergence {
        what: "Riccati doubling",
        iterations: opts.max_iter,
        residual: change,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossCovarianceMethod {
    /// Dense LU on the vectorised system with one refinement pass.
    #[default]
    VecLu,
    /// Smith doubling of the fixed-point series.
    Smith,
}

/// `M = A_oo(I − L*_o C_o)`.
pub fn closed_loop_matrix<T: Scalar>(bundle: &DecompositionBundle<T>, l_o: &DMatrix<T>) -> DMatrix<T> {
    &bundle.a_oo * (linalg::identity::<T>(bundle.obs_dim()) - l_o * &bundle.c_o)
}

fn cross_constant<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    p_oo: &DMatrix<T>,
    l_o: &DMatrix<T>,
) -> DMatrix<T> {
    let i_lc = linalg::identity::<T>(bundle.obs_dim()) - l_o * &bundle.c_o;
    &noise.q_obar_o + &bundle.a_obar_o * i_lc * p_oo * bundle.a_oo.transpose()
}

/// Relative residual of the cross-covariance fixed point at `x`.
pub fn cross_covariance_residual<T: Scalar>(
    x: &DMatrix<T>,
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    p_oo: &DMatrix<T>,
    l_o: &DMatrix<T>,
) -> f64 {
    let m = closed_loop_matrix(bundle, l_o);
    let rhs = cross_constant(bundle, noise, p_oo, l_o) + bundle.a_dyn() * x * m.transpose();
    linalg::relative_diff(&rhs, x).as_f64()
}

pub fn solve_cross_covariance<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    p_oo: &DMatrix<T>,
    l_o: &DMatrix<T>,
    method: CrossCovarianceMethod,
) -> Result<DMatrix<T>> {
    let d = bundle.obs_dim();
    let m = closed_loop_matrix(bundle, l_o);
    let radius = linalg::spectral_radius(&m);
    if !(radius < 1.0) {
        return Err(Error::Unstable { radius });
    }
    let c = cross_constant(bundle, noise, p_oo, l_o);
    let a = bundle.a_dyn();
    match method {
        CrossCovarianceMethod::VecLu => {
            let k = linalg::identity::<T>(2 * d) - linalg::kron(&m, &a);
            let b = linalg::vec(&c);
            let lu = k.clone().lu();
            let singular = || Error::Singular {
                what: "I - M (x) A",
                cond: f64::INFINITY,
            };
            let mut x = lu.solve(&b).ok_or_else(singular)?;
            let correction = lu.solve(&(&b - &k * &x)).ok_or_else(singular)?;
            x += correction;
            Ok(linalg::unvec(&x, 2, d))
        }
        CrossCovarianceMethod::Smith => {
            let mut x = c;
            let mut ak = a;
            let mut mk = m;
            for _ in 0..200 {
                let term = &ak * &x * mk.transpose();
                let done = linalg::frobenius(&term).as_f64() <= 1e-17 * linalg::frobenius(&x).as_f64();
                x += term;
                if done {
                    return Ok(x);
                }
                ak = &ak * &ak;
                mk = &mk * &mk;
            }
            Err(Error::NoConvergence {
                what: "Smith doubling",
                iterations: 200,
                residual: cross_covariance_residual(&x, bundle, noise, p_oo, l_o),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyGains<T: Scalar> {
    pub p_oo_star: DMatrix<T>,
    pub l_o_star: DMatrix<T>,
    pub p_obar_o_star: DMatrix<T>,
    pub l_obar_star: DMatrix<T>,
    /// `ρ(A_oo(I − L*_o C_o))`.
    pub closed_loop_spectral_radius: f64,
    pub riccati_residual: f64,
    pub cross_residual: f64,
}

pub fn steady_gains<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
    opts: &RiccatiOptions,
) -> Result<SteadyGains<T>> {
    let ric = solve_riccati(bundle, noise, r, opts)?;
    let p = ric.p;
    let s_inv = innovation_inverse(&bundle.c_o, &p, r)?;
    let c_t_s = bundle.c_o.transpose() * s_inv;
    let l_o = &p * &c_t_s;
    let radius = linalg::spectral_radius(&closed_loop_matrix(bundle, &l_o));
    let x = solve_cross_covariance(bundle, noise, &p, &l_o, CrossCovarianceMethod::VecLu)?;
    let cross_residual = cross_covariance_residual(&x, bundle, noise, &p, &l_o);
    if !(cross_residual <= RESIDUAL_TOL) {
        return Err(Error::NoConvergence {
            what: "cross-covariance solve",
            iterations: 1,
            residual: cross_residual,
        });
    }
    let l_obar = &x * c_t_s;
    Ok(SteadyGains {
        p_oo_star: p,
        l_o_star: l_o,
        p_obar_o_star: x,
        l_obar_star: l_obar,
        closed_loop_spectral_radius: radius,
        riccati_residual: ric.residual,
        cross_residual,
    })
}

/// Mean-only transformed filter step with frozen gains.
pub fn sstkf_step<T: Scalar>(
    mean: &TkfMean<T>,
    y: &DVector<T>,
    u: &DVector<T>,
    bundle: &DecompositionBundle<T>,
    gains: &SteadyGains<T>,
) -> Result<TkfMean<T>> {
    if gains.l_o_star.nrows() != bundle.obs_dim() {
        return Err(Error::dim("steady gain rows", bundle.obs_dim(), gains.l_o_star.nrows()));
    }
    let prior = mean.predict(u, bundle)?;
    let innovation = prior.innovation(y, bundle)?;
    Ok(prior.corrected(&innovation, &gains.l_o_star, &gains.l_obar_star))
}

/// Limit of the time-varying filter's covariance blocks.
///
/// Iterates the filter recursion for `steps` steps from `P_oo = 0`, then,
/// with the gain frozen at its last value, sums the remaining affine
/// recursion for `P_ōo` in closed form by doubling. Used as an oracle.
pub fn iterate_to_limit<T: Scalar>(
    bundle: &DecompositionBundle<T>,
    noise: &ReducedNoise<T>,
    r: T,
    steps: usize,
) -> Result<(DMatrix<T>, DMatrix<T>, DMatrix<T>)> {
    let d = bundle.obs_dim();
    let mut p_oo = DMatrix::zeros(d, d);
    let mut p_obar_o = DMatrix::zeros(2, d);
    let mut prior = (p_oo.clone(), p_obar_o.clone());
    for _ in 0..steps {
        prior = tkf::prior_covariance(&p_oo, &p_obar_o, bundle, noise);
        let (l_o, _) = tkf::gains(&prior.0, &prior.1, bundle, r)?;
        (p_oo, p_obar_o) = tkf::posterior_covariance(&prior.0, &prior.1, &l_o, bundle);
    }
    let (p_oo_prior, p_obar_o_prior) = prior;
    let (l_o, _) = tkf::gains(&p_oo_prior, &p_obar_o_prior, bundle, r)?;
    // prior recursion with frozen gain: X' = A X Mᵀ + c
    let m = closed_loop_matrix(bundle, &l_o);
    let c = cross_constant(bundle, noise, &p_oo_prior, &l_o);
    let fixed = {
        // X∞ = X_k + Σ_{j≥0} A^j (A X_k Mᵀ + c − X_k) M^jᵀ
        let delta = bundle.a_dyn() * &p_obar_o_prior * m.transpose() + &c - &p_obar_o_prior;
        let mut sum = delta;
        let mut ak = bundle.a_dyn();
        let mut mk = m;
        for _ in 0..200 {
            let term = &ak * &sum * mk.transpose();
            let small = linalg::frobenius(&term).as_f64() <= 1e-17 * linalg::frobenius(&sum).as_f64();
            sum += term;
            if small {
                break;
            }
            ak = &ak * &ak;
            mk = &mk * &mk;
        }
        &p_obar_o_prior + sum
    };
    Ok((p_oo_prior, p_obar_o_prior, fixed))
}

const ARTIFACT_FORMAT: &str = "clock-ensemble-steady-gains";
const ARTIFACT_VERSION: u32 = 1;

impl<T: Scalar> SteadyGains<T> {
    /// Writes a versioned CSV artifact tagged with `key` (typically a
    /// fingerprint of the ensemble and weights the gains were built for).
    pub fn write_csv<W: Write>(&self, out: W, key: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record([ARTIFACT_FORMAT, &ARTIFACT_VERSION.to_string()]).map_err(csv_err)?;
        w.write_record(["key", key]).map_err(csv_err)?;
        for (name, v) in [
            ("closed_loop_spectral_radius", self.closed_loop_spectral_radius),
            ("riccati_residual", self.riccati_residual),
            ("cross_residual", self.cross_residual),
        ] {
            w.write_record([name, &format!("{v:e}")]).map_err(csv_err)?;
        }
        for (name, m) in self.blocks() {
            w.write_record([name, &m.nrows().to_string(), &m.ncols().to_string()])
                .map_err(csv_err)?;
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)].as_f64())).collect();
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an artifact written by [`SteadyGains::write_csv`]; returns the key.
    pub fn read_csv<R: Read>(input: R) -> Result<(String, Self)> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut rows = rd.records();
        let mut next = || -> Result<csv::StringRecord> {
            rows.next()
                .ok_or_else(|| Error::Parse("truncated steady-gains artifact".into()))?
                .map_err(csv_err)
        };
        let head = next()?;
        if head.get(0) != Some(ARTIFACT_FORMAT) || head.get(1) != Some(&ARTIFACT_VERSION.to_string()[..]) {
            return Err(Error::Parse(format!("not a v{ARTIFACT_VERSION} steady-gains artifact")));
        }
        let field = |rec: &csv::StringRecord, name: &str| -> Result<String> {
            match (rec.get(0), rec.get(1)) {
                (Some(n), Some(v)) if n == name => Ok(v.to_string()),
                _ => Err(Error::Parse(format!("expected field {name}"))),
            }
        };
        let num = |s: &str| -> Result<f64> { s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))) };
        let key = field(&next()?, "key")?;
        let radius = num(&field(&next()?, "closed_loop_spectral_radius")?)?;
        let ric = num(&field(&next()?, "riccati_residual")?)?;
        let cross = num(&field(&next()?, "cross_residual")?)?;
        let mut blocks = Vec::with_capacity(4);
        for name in ["p_oo_star", "l_o_star", "p_obar_o_star", "l_obar_star"] {
            let head = next()?;
            if head.get(0) != Some(name) || head.len() != 3 {
                return Err(Error::Parse(format!("expected block {name}")));
            }
            let rows = num(&head[1])? as usize;
            let cols = num(&head[2])? as usize;
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let rec = next()?;
                if rec.len() != cols {
                    return Err(Error::Parse(format!("block {name} row {i} has {} columns", rec.len())));
                }
                for j in 0..cols {
                    m[(i, j)] = T::lit(num(&rec[j])?);
                }
            }
            blocks.push(m);
        }
        let mut it = blocks.into_iter();
        let mut take = || it.next().unwrap_or_else(|| DMatrix::zeros(0, 0));
        Ok((
            key,
            SteadyGains {
                p_oo_star: take(),
                l_o_star: take(),
                p_obar_o_star: take(),
                l_obar_star: take(),
                closed_loop_spectral_radius: radius,
                riccati_residual: ric,
                cross_residual: cross,
            },
        ))
    }

    fn blocks(&self) -> [(&'static str, &DMatrix<T>); 4] {
        [
            ("p_oo_star", &self.p_oo_star),
            ("l_o_star", &self.l_o_star),
            ("p_obar_o_star", &self.p_obar_o_star),
            ("l_obar_star", &self.l_obar_star),
        ]
    }
}
