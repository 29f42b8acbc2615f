//! Stacked state-space model of an N-clock ensemble and its simulation.
//!
//! State ordering is fixed everywhere in the crate:
//! `x = [p_1..p_N, f_1..f_N]`, followed by the maser drifts
//! `z = [z_{N-M+1}..z_N]`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::clock::{self, check_tau, BaseMatrices, ClockKind, ClockSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;

/// Singular-value cutoff (relative to the largest) for rank/kernel checks on `V`.
pub const V_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec<T: Scalar> {
    /// Cesium clocks first, masers last.
    pub clocks: Vec<ClockSpec<T>>,
    pub tau: T,
    /// Measurement-noise variance (s²), shared by every channel.
    pub r: T,
    /// `(N-1) × N` difference matrix with kernel spanned by `1_N`.
    pub v: DMatrix<T>,
}

impl<T: Scalar> EnsembleSpec<T> {
    pub fn new(clocks: Vec<ClockSpec<T>>, tau: T, r: T, v: DMatrix<T>) -> Result<Self> {
        let spec = EnsembleSpec { clocks, tau, r, v };
        spec.validate()?;
        Ok(spec)
    }

    /// Ensemble measured with the star-against-the-last-clock difference matrix.
    pub fn with_default_v(clocks: Vec<ClockSpec<T>>, tau: T, r: T) -> Result<Self> {
        let v = default_difference_matrix(clocks.len())?;
        Self::new(clocks, tau, r, v)
    }

    pub fn n(&self) -> usize {
        self.clocks.len()
    }

    pub fn m(&self) -> usize {
        self.clocks.iter().filter(|c| c.kind == ClockKind::Hm).count()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n() + self.m()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 clocks, got {n}")));
        }
        check_tau(self.tau)?;
        if !(self.r >= T::zero() && self.r.as_f64().is_finite()) {
            return Err(Error::Domain {
                what: "r",
                rule: "finite and non-negative",
                value: self.r.as_f64(),
            });
        }
        for c in &self.clocks {
            c.validate()?;
        }
        let m = self.m();
        if m == 0 || m == n {
            return Err(Error::InvalidSpec(format!(
                "a mixed ensemble needs at least one Cs and one Hm clock (N={n}, M={m})"
            )));
        }
        if let Some(i) = self.clocks[..n - m].iter().position(|c| c.kind == ClockKind::Hm) {
            return Err(Error::InvalidSpec(format!(
                "clock {} is Hm but precedes a Cs clock; masers must come last",
                i + 1
            )));
        }
        check_difference_matrix(&self.v, n)
    }

    /// Stable content hash (hex SHA-256) over the numerical definition.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |x: f64| h.update(x.to_bits().to_le_bytes());
        put(self.tau.as_f64());
        put(self.r.as_f64());
        for c in &self.clocks {
            put(c.kind.state_dim() as f64);
            put(c.sigma1.as_f64());
            put(c.sigma2.as_f64());
            put(c.sigma3.as_f64());
        }
        for x in self.v.iter() {
            put(x.as_f64());
        }
        hex::encode(h.finalize())
    }
}

fn check_difference_matrix<T: Scalar>(v: &DMatrix<T>, n: usize) -> Result<()> {
    if v.nrows() != n - 1 || v.ncols() != n {
        return Err(Error::InvalidSpec(format!(
            "V must be {}x{n}, got {}x{}",
            n - 1,
            v.nrows(),
            v.ncols()
        )));
    }
    let sv = linalg::singular_values(v);
    let smax = sv.max().as_f64();
    let residual = (v * linalg::ones::<T>(n)).norm().as_f64();
    if residual > V_RANK_TOL * smax * (n as f64).sqrt() {
        return Err(Error::InvalidSpec(format!(
            "V does not annihilate the all-ones vector (|V 1| = {residual:e})"
        )));
    }
    let rank = linalg::rank(v, V_RANK_TOL);
    if rank != n - 1 {
        return Err(Error::InvalidSpec(format!(
            "V must have rank {} (kernel exactly span(1)), got rank {rank}",
            n - 1
        )));
    }
    Ok(())
}

/// `[I_{N-1} | -1_{N-1}]`: every clock measured against clock `N`.
pub fn default_difference_matrix<T: Scalar>(n: usize) -> Result<DMatrix<T>> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 clocks, got {n}")));
    }
    let mut v = DMatrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        v[(i, i)] = T::one();
        v[(i, n - 1)] = -T::one();
    }
    Ok(v)
}

/// Per-clock noise variances arranged as the diagonal blocks of the ensemble covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDiagonals<T: Scalar> {
    /// `diag(σ₁ᵢ²)`, length N.
    pub sigma1: DVector<T>,
    /// `diag(σ₂ᵢ²)`, length N.
    pub sigma2: DVector<T>,
    /// `diag(0, .., 0, σ₃ⱼ²)`, length N (zeros for cesium clocks).
    pub sigma3: DVector<T>,
}

impl<T: Scalar> NoiseDiagonals<T> {
    pub fn from_clocks(clocks: &[ClockSpec<T>]) -> Self {
        let sq = |f: fn(&ClockSpec<T>) -> T| {
            DVector::from_iterator(clocks.len(), clocks.iter().map(|c| f(c) * f(c)))
        };
        NoiseDiagonals {
            sigma1: sq(|c| c.sigma1),
            sigma2: sq(|c| c.sigma2),
            sigma3: sq(|c| c.sigma3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemMatrices<T: Scalar> {
    pub n: usize,
    pub m: usize,
    pub tau: T,
    /// `[[A⊗I_N, β⊗J], [0, I_M]]`
    pub a: DMatrix<T>,
    /// `[B⊗I_N; 0]`
    pub b: DMatrix<T>,
    /// `[C⊗V, 0]`
    pub c: DMatrix<T>,
    pub q: DMatrix<T>,
    /// `[0_{(N-M)×M}; I_M]`
    pub j: DMatrix<T>,
    pub sigmas: NoiseDiagonals<T>,
    /// `N × M`, the maser rows of `diag(σ₃²)`.
    pub sigma4: DMatrix<T>,
    /// `diag(σ₃ⱼ²)` over the masers, length M.
    pub sigma5: DVector<T>,
}

impl<T: Scalar> SystemMatrices<T> {
    pub fn state_dim(&self) -> usize {
        2 * self.n + self.m
    }

    /// `[C; CA; ..; CA^{n-1}]`.
    pub fn observability_matrix(&self) -> DMatrix<T> {
        observability_matrix(&self.a, &self.c)
    }

    /// Basis `[I₂⊗1_N; 0]` of the common-mode phase/frequency directions.
    pub fn common_mode_basis(&self) -> DMatrix<T> {
        let mut basis = DMatrix::zeros(self.state_dim(), 2);
        for i in 0..self.n {
            basis[(i, 0)] = T::one();
            basis[(self.n + i, 1)] = T::one();
        }
        basis
    }
}

pub fn observability_matrix<T: Scalar>(a: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    let p = c.nrows();
    let mut obs = DMatrix::zeros(p * n, n);
    let mut row = c.clone();
    for k in 0..n {
        obs.view_mut((k * p, 0), (p, n)).copy_from(&row);
        row = &row * a;
    }
    obs
}

pub fn selector_j<T: Scalar>(n: usize, m: usize) -> DMatrix<T> {
    let mut j = DMatrix::zeros(n, m);
    for k in 0..m {
        j[(n - m + k, k)] = T::one();
    }
    j
}

fn mat2<T: Scalar>(m: &nalgebra::Matrix2<T>) -> DMatrix<T> {
    DMatrix::from_iterator(2, 2, m.iter().copied())
}

fn col2<T: Scalar>(v: &nalgebra::Vector2<T>) -> DMatrix<T> {
    DMatrix::from_column_slice(2, 1, v.as_slice())
}

/// Ensemble process-noise covariance assembled from the diagonal noise blocks.
pub fn process_covariance_from_blocks<T: Scalar>(
    tau: T,
    sigmas: &NoiseDiagonals<T>,
    sigma4: &DMatrix<T>,
    sigma5: &DVector<T>,
) -> DMatrix<T> {
    let n = sigmas.sigma1.len();
    let m = sigma5.len();
    let (s1, s2, s3) = (
        linalg::diag(&sigmas.sigma1),
        linalg::diag(&sigmas.sigma2),
        linalg::diag(&sigmas.sigma3),
    );
    let s5 = linalg::diag(sigma5);
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let t4 = t3 * tau;
    let t5 = t4 * tau;
    let pp = &s1 * tau + &s2 * (t3 / T::lit(3.0)) + &s3 * (t5 / T::lit(20.0));
    let pf = &s2 * (t2 / T::lit(2.0)) + &s3 * (t4 / T::lit(8.0));
    let ff = &s2 * tau + &s3 * (t3 / T::lit(3.0));
    let pz = sigma4 * (t3 / T::lit(6.0));
    let fz = sigma4 * (t2 / T::lit(2.0));
    let zz = &s5 * tau;

    let mut q = DMatrix::zeros(2 * n + m, 2 * n + m);
    q.view_mut((0, 0), (n, n)).copy_from(&pp);
    q.view_mut((0, n), (n, n)).copy_from(&pf);
    q.view_mut((n, 0), (n, n)).copy_from(&pf);
    q.view_mut((n, n), (n, n)).copy_from(&ff);
    q.view_mut((0, 2 * n), (n, m)).copy_from(&pz);
    q.view_mut((n, 2 * n), (n, m)).copy_from(&fz);
    q.view_mut((2 * n, 0), (m, n)).copy_from(&pz.transpose());
    q.view_mut((2 * n, n), (m, n)).copy_from(&fz.transpose());
    q.view_mut((2 * n, 2 * n), (m, m)).copy_from(&zz);
    q
}

/// Noise blocks for any ordered clock list (masers last); `M = 0` allowed.
pub fn noise_blocks<T: Scalar>(clocks: &[ClockSpec<T>]) -> (NoiseDiagonals<T>, DMatrix<T>, DVector<T>) {
    let n = clocks.len();
    let m = clocks.iter().filter(|c| c.kind == ClockKind::Hm).count();
    let sigmas = NoiseDiagonals::from_clocks(clocks);
    let sigma5 = DVector::from_iterator(m, sigmas.sigma3.iter().skip(n - m).copied());
    let sigma4 = selector_j::<T>(n, m) * linalg::diag(&sigma5);
    (sigmas, sigma4, sigma5)
}

pub fn assemble_system<T: Scalar>(spec: &EnsembleSpec<T>) -> Result<SystemMatrices<T>> {
    spec.validate()?;
    let (n, m) = (spec.n(), spec.m());
    let base = BaseMatrices::new(spec.tau)?;
    let j = selector_j::<T>(n, m);
    let a_blk = mat2(&base.a);
    let beta = col2(&base.beta);
    let b_blk = col2(&base.b);
    let c_blk = DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]);

    let dim = 2 * n + m;
    let mut a = DMatrix::zeros(dim, dim);
    a.view_mut((0, 0), (2 * n, 2 * n))
        .copy_from(&linalg::kron(&a_blk, &linalg::identity(n)));
    a.view_mut((0, 2 * n), (2 * n, m)).copy_from(&linalg::kron(&beta, &j));
    a.view_mut((2 * n, 2 * n), (m, m)).fill_with_identity();

    let mut b = DMatrix::zeros(dim, n);
    b.view_mut((0, 0), (2 * n, n))
        .copy_from(&linalg::kron(&b_blk, &linalg::identity(n)));

    let mut c = DMatrix::zeros(n - 1, dim);
    c.view_mut((0, 0), (n - 1, 2 * n)).copy_from(&linalg::kron(&c_blk, &spec.v));

    let (sigmas, sigma4, sigma5) = noise_blocks(&spec.clocks);
    let q = process_covariance_from_blocks(spec.tau, &sigmas, &sigma4, &sigma5);

    Ok(SystemMatrices {
        n,
        m,
        tau: spec.tau,
        a,
        b,
        c,
        q,
        j,
        sigmas,
        sigma4,
        sigma5,
    })
}

/// State indices `(p, f, z)` of clock `i` in the stacked ordering.
pub fn clock_indices(n: usize, m: usize, i: usize) -> Vec<usize> {
    let mut idx = vec![i, n + i];
    if i >= n - m {
        idx.push(2 * n + (i - (n - m)));
    }
    idx
}

/// Draws ensemble process and measurement noise from labelled streams.
///
/// Clocks are independent, so the process noise is sampled clock by clock
/// from a factor of each clock's covariance block, each from its own stream.
pub struct NoiseSource<T: Scalar> {
    dim: usize,
    clocks: Vec<(Vec<usize>, DMatrix<T>, ChaCha20Rng)>,
    meas_sd: T,
    meas_dim: usize,
    meas_rng: ChaCha20Rng,
}

impl<T: Scalar> NoiseSource<T> {
    pub fn new(sys: &SystemMatrices<T>, r: T, seed: u64) -> Self {
        let clocks = (0..sys.n)
            .map(|i| {
                let idx = clock_indices(sys.n, sys.m, i);
                let block = sys.q.select_rows(&idx).select_columns(&idx);
                (idx, linalg::covariance_factor(&block), rng::stream(seed, rng::clock_stream_label(i)))
            })
            .collect();
        NoiseSource {
            dim: sys.state_dim(),
            clocks,
            meas_sd: r.sqrt(),
            meas_dim: sys.n - 1,
            meas_rng: rng::stream(seed, rng::MEASUREMENT_STREAM),
        }
    }

    pub fn process(&mut self) -> DVector<T> {
        let mut v = DVector::zeros(self.dim);
        for (idx, factor, rng) in self.clocks.iter_mut() {
            let xi = DVector::from_iterator(idx.len(), (0..idx.len()).map(|_| rng::normal::<T>(rng)));
            let draw = &*factor * xi;
            for (k, &s) in idx.iter().enumerate() {
                v[s] = draw[k];
            }
        }
        v
    }

    pub fn measurement(&mut self) -> DVector<T> {
        let sd = self.meas_sd;
        let rng = &mut self.meas_rng;
        DVector::from_iterator(self.meas_dim, (0..self.meas_dim).map(|_| rng::normal::<T>(rng) * sd))
    }
}

/// Chooses the input `u[k]` from the measurement `y[k]`.
pub trait ControlPolicy<T: Scalar> {
    fn control(&mut self, k: usize, y: &DVector<T>) -> Result<DVector<T>>;
}

/// Free-running ensemble: `u ≡ 0`.
pub struct ZeroPolicy {
    pub n: usize,
}

impl<T: Scalar> ControlPolicy<T> for ZeroPolicy {
    fn control(&mut self, _k: usize, _y: &DVector<T>) -> Result<DVector<T>> {
        Ok(DVector::zeros(self.n))
    }
}

impl<T, F> ControlPolicy<T> for F
where
    T: Scalar,
    F: FnMut(usize, &DVector<T>) -> Result<DVector<T>>,
{
    fn control(&mut self, k: usize, y: &DVector<T>) -> Result<DVector<T>> {
        self(k, y)
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOptions<T: Scalar> {
    pub x0: Option<DVector<T>>,
    pub z0: Option<DVector<T>>,
    /// Keep the drawn `v[k]`, `w[k]` with each record.
    pub record_noise: bool,
}

impl<T: Scalar> Default for SimulationOptions<T> {
    fn default() -> Self {
        SimulationOptions {
            x0: None,
            z0: None,
            record_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T: Scalar> {
    pub x: DVector<T>,
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub u: DVector<T>,
    /// `(v[k], w[k])` when noise recording is on.
    pub noise: Option<(DVector<T>, DVector<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace<T: Scalar> {
    pub seed: u64,
    pub spec_hash: String,
    pub n: usize,
    pub m: usize,
    /// Records for `k = 0..=horizon`.
    pub records: Vec<StepRecord<T>>,
}

impl<T: Scalar> SimulationTrace<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Phase series of clock `i`.
    pub fn phase(&self, i: usize) -> Vec<T> {
        self.records.iter().map(|r| r.x[i]).collect()
    }

    /// Wide CSV: `k, p_1..p_N, f_1..f_N, z_.., y_1..y_{N-1}, u_1..u_N`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("p_{i}")));
        header.extend((1..=n).map(|i| format!("f_{i}")));
        header.extend((n - m + 1..=n).map(|i| format!("z_{i}")));
        header.extend((1..n).map(|i| format!("y_{i}")));
        header.extend((1..=n).map(|i| format!("u_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (k, r) in self.records.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(
                r.x.iter()
                    .chain(r.z.iter())
                    .chain(r.y.iter())
                    .chain(r.u.iter())
                    .map(|v| format!("{:e}", v.as_f64())),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Simulates the ensemble for `horizon` steps under `policy`.
///
/// At step `k` the measurement `y[k]` of the current state is drawn, the
/// policy maps it to `u[k]`, and the state advances with fresh process
/// noise. The returned trace holds `horizon + 1` records.
pub fn simulate<T: Scalar, P: ControlPolicy<T> + ?Sized>(
    sys: &SystemMatrices<T>,
    spec: &EnsembleSpec<T>,
    policy: &mut P,
    horizon: usize,
    seed: u64,
    options: &SimulationOptions<T>,
) -> Result<SimulationTrace<T>> {
    if horizon < 1 {
        return Err(Error::Domain {
            what: "horizon",
            rule: "at least 1",
            value: horizon as f64,
        });
    }
    let (n, m) = (sys.n, sys.m);
    let mut x = options.x0.clone().unwrap_or_else(|| DVector::zeros(2 * n));
    let mut z = options.z0.clone().unwrap_or_else(|| DVector::zeros(m));
    if x.len() != 2 * n {
        return Err(Error::dim("initial x", 2 * n, x.len()));
    }
    if z.len() != m {
        return Err(Error::dim("initial z", m, z.len()));
    }
    let mut noise = NoiseSource::new(sys, spec.r, seed);
    let c_x = sys.c.columns(0, 2 * n).into_owned();
    let a_xx = sys.a.view((0, 0), (2 * n, 2 * n)).into_owned();
    let a_xz = sys.a.view((0, 2 * n), (2 * n, m)).into_owned();
    let b_x = sys.b.rows(0, 2 * n).into_owned();

    let mut records = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let w = noise.measurement();
        let y = &c_x * &x + &w;
        let u = policy.control(k, &y)?;
        if u.len() != n {
            return Err(Error::dim("policy output", n, u.len()));
        }
        let v = noise.process();
        let x_next = &a_xx * &x + &a_xz * &z + &b_x * &u + v.rows(0, 2 * n);
        let z_next = &z + v.rows(2 * n, m);
        records.push(StepRecord {
            x: x.clone(),
            z: z.clone(),
            y,
            u,
            noise: options.record_noise.then_some((v, w)),
        });
        x = x_next;
        z = z_next;
    }
    Ok(SimulationTrace {
        seed,
        spec_hash: spec.fingerprint(),
        n,
        m,
        records,
    })
}

/// Cross-check helper: steps each clock with [`clock::step_clock`].
pub fn step_clocks<T: Scalar>(
    spec: &EnsembleSpec<T>,
    x: &DVector<T>,
    z: &DVector<T>,
    u: &DVector<T>,
    v: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let (n, m) = (spec.n(), spec.m());
    let base = BaseMatrices::new(spec.tau)?;
    let mut xn = DVector::zeros(2 * n);
    let mut zn = DVector::zeros(m);
    for (i, c) in spec.clocks.iter().enumerate() {
        let hm = c.kind == ClockKind::Hm;
        let state = clock::ClockState {
            kind: c.kind,
            p: x[i],
            f: x[n + i],
            z: if hm { z[i - (n - m)] } else { T::zero() },
        };
        let noise: Vec<T> = clock_indices(n, m, i).iter().map(|&s| v[s]).collect();
        let next = clock::step_clock(&state, u[i], &noise, &base)?;
        xn[i] = next.p;
        xn[n + i] = next.f;
        if hm {
            zn[i - (n - m)] = next.z;
        }
    }
    Ok((xn, zn))
}
