//! Scenario orchestration: free-running and controlled runs per seed, Ψ
//! reference series, HVAR tables and a manifest.
//!
//! Each seed writes into its own subdirectory of a staging directory; the
//! staging directory is renamed onto the output path only after every seed
//! succeeded, and removed otherwise.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{CkfInitial, FilterKind, ScenarioConfig};
use crate::control::{closed_loop_simulate, ClosedLoopRun};
use crate::decomposition::{build_transform, DecompositionBundle, WeightVector};
use crate::ensemble::{assemble_system, csv_err, simulate, SimulationOptions, SimulationTrace, SystemMatrices, ZeroPolicy};
use crate::error::{Error, Result};
use crate::filters::{steady_gains, CkfState, RiccatiOptions, SteadyGains, TkfState};
use crate::rng;
use crate::stability::{
    hvar_curve, octave_grid, psi_curve, weight_long_term, weight_short_term, write_hvar_csv, HvarCurve, HvarSeries,
    PsiModel,
};

/// Overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CLOCK_ENSEMBLE_OUTPUT_DIR";
pub const MANIFEST_FORMAT: &str = "clock-ensemble-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Seed-independent pieces of a scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sys: SystemMatrices<f64>,
    pub bundle: DecompositionBundle<f64>,
    pub gains: SteadyGains<f64>,
    pub q_short: WeightVector<f64>,
    pub q_long: WeightVector<f64>,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    let sys = assemble_system(&cfg.spec)?;
    let bundle = build_transform(&cfg.spec, &cfg.weights)?;
    let noise = bundle.reduced_noise(&sys.q);
    let gains = steady_gains(&bundle, &noise, cfg.spec.r, &RiccatiOptions::default())?;
    let sigmas = cfg.noise();
    let q_short = weight_short_term(&sigmas.sigma1)?;
    let q_long = weight_long_term(&sigmas.sigma2, cfg.spec.n(), cfg.spec.m())?;
    Ok(Prepared {
        sys,
        bundle,
        gains,
        q_short,
        q_long,
    })
}

/// Covariance size along the free-running measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterDiagnostics {
    /// Largest diagonal entry of the full-model covariance.
    pub ckf_max_diagonal: Option<Vec<f64>>,
    /// `‖P_oo‖_F` of the transformed filter.
    pub tkf_p_oo_norm: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub free: SimulationTrace<f64>,
    pub closed: ClosedLoopRun<f64>,
    /// Ψ phase series for the short- and long-term weights.
    pub psi_short: Vec<f64>,
    pub psi_long: Vec<f64>,
    pub filters: FilterDiagnostics,
}

pub fn run_seed(cfg: &ScenarioConfig, prep: &Prepared, seed: u64) -> Result<SeedRun> {
    let horizon = cfg.horizon();
    let free = simulate(
        &prep.sys,
        &cfg.spec,
        &mut ZeroPolicy { n: cfg.spec.n() },
        horizon,
        seed,
        &SimulationOptions::default(),
    )?;
    let closed = closed_loop_simulate(
        &cfg.spec,
        &prep.sys,
        &prep.bundle,
        &prep.gains,
        &cfg.controller,
        horizon,
        seed,
        &cfg.closed_loop_options(),
    )?;
    let tau = cfg.spec.tau;
    let psi_short = PsiModel::from_clocks(prep.q_short.clone(), &cfg.spec.clocks, tau)?.simulate(
        horizon,
        seed,
        rng::PSI_STREAM,
    );
    let psi_long = PsiModel::from_clocks(prep.q_long.clone(), &cfg.spec.clocks, tau)?.simulate(
        horizon,
        seed,
        rng::PSI_ALT_STREAM,
    );
    let filters = filter_diagnostics(cfg, prep, &free)?;
    Ok(SeedRun {
        seed,
        free,
        closed,
        psi_short,
        psi_long,
        filters,
    })
}

fn filter_diagnostics(cfg: &ScenarioConfig, prep: &Prepared, free: &SimulationTrace<f64>) -> Result<FilterDiagnostics> {
    let kinds = &cfg.file.filter.kinds;
    let scale = cfg.file.filter.p_oo_scale;
    let r = cfg.spec.r;
    let mut out = FilterDiagnostics::default();
    if kinds.contains(&FilterKind::Ckf) {
        let form = cfg.file.filter.ckf_update_form;
        let dim = prep.sys.state_dim();
        let mut ckf = match cfg.file.filter.ckf_initial {
            CkfInitial::ProcessNoise => CkfState::new(DVector::zeros(dim), prep.sys.q.clone())?,
            CkfInitial::Isotropic => CkfState::with_isotropic(dim, scale),
        };
        let mut series = Vec::with_capacity(free.len());
        for (k, rec) in free.records.iter().enumerate() {
            if k == 0 {
                ckf.correct(&rec.y, &prep.sys, r, form)?;
            } else {
                ckf.step(&rec.y, &free.records[k - 1].u, &prep.sys, r, form)?;
            }
            series.push(ckf.max_diagonal());
        }
        out.ckf_max_diagonal = Some(series);
    }
    if kinds.contains(&FilterKind::Tkf) {
        let noise = prep.bundle.reduced_noise(&prep.sys.q);
        let mut tkf = TkfState::new(&prep.bundle, scale);
        let mut series = Vec::with_capacity(free.len());
        for (k, rec) in free.records.iter().enumerate() {
            if k == 0 {
                tkf.correct(&rec.y, &prep.bundle, r)?;
            } else {
                tkf.step(&rec.y, &free.records[k - 1].u, &prep.bundle, &noise, r)?;
            }
            series.push(tkf.p_oo.norm());
        }
        out.tkf_p_oo_norm = Some(series);
    }
    Ok(out)
}

/// One labelled HVAR curve.
#[derive(Debug, Clone)]
pub struct LabelledCurve {
    pub series_id: String,
    pub clock_id: Option<usize>,
    pub curve: HvarCurve<f64>,
}

impl SeedRun {
    /// Curves for every free clock, every controlled clock, and both Ψ
    /// references (empirical and model), over the octave grid.
    pub fn hvar_curves(&self, cfg: &ScenarioConfig, prep: &Prepared) -> Result<Vec<LabelledCurve>> {
        let tau = cfg.spec.tau;
        let grid = octave_grid(cfg.horizon());
        let mut out = Vec::new();
        for i in 0..cfg.spec.n() {
            out.push(LabelledCurve {
                series_id: "free".into(),
                clock_id: Some(i + 1),
                curve: hvar_curve(&self.free.phase(i), tau, &grid)?,
            });
        }
        for i in 0..cfg.spec.n() {
            out.push(LabelledCurve {
                series_id: "controlled".into(),
                clock_id: Some(i + 1),
                curve: hvar_curve(&self.closed.trace.phase(i), tau, &grid)?,
            });
        }
        for (id, q, series) in [
            ("psi_short", &prep.q_short, &self.psi_short),
            ("psi_long", &prep.q_long, &self.psi_long),
        ] {
            out.push(LabelledCurve {
                series_id: id.into(),
                clock_id: None,
                curve: hvar_curve(series, tau, &grid)?,
            });
            let model = PsiModel::from_clocks(q.clone(), &cfg.spec.clocks, tau)?;
            out.push(LabelledCurve {
                series_id: format!("{id}_model"),
                clock_id: None,
                curve: psi_curve(&model, &grid)?,
            });
        }
        Ok(out)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Long format: `k, clock_id, p, f, z, u, p_hat, theta`.
///
/// `p_hat` is empty when no estimates are given; `z` is empty for cesium clocks.
pub fn write_trace_csv<W: Write>(
    out: W,
    trace: &SimulationTrace<f64>,
    bundle: &DecompositionBundle<f64>,
    estimates: Option<&[crate::filters::TkfMean<f64>]>,
) -> Result<()> {
    let (n, m) = (trace.n, trace.m);
    let q = bundle.q.as_vector();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "clock_id", "p", "f", "z", "u", "p_hat", "theta"])
        .map_err(csv_err)?;
    for (k, rec) in trace.records.iter().enumerate() {
        let theta = q.dot(&rec.x.rows(0, n));
        let x_hat: Option<DVector<f64>> = estimates.map(|e| bundle.join(&e[k].eta_o, &e[k].eta_obar));
        for i in 0..n {
            let z = if i >= n - m { fmt(rec.z[i - (n - m)]) } else { String::new() };
            let p_hat = x_hat.as_ref().map(|x| fmt(x[i])).unwrap_or_default();
            w.write_record([
                k.to_string(),
                (i + 1).to_string(),
                fmt(rec.x[i]),
                fmt(rec.x[n + i]),
                z,
                fmt(rec.u[i]),
                p_hat,
                fmt(theta),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_psi_csv<W: Write>(out: W, short: &[f64], long: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "psi_short", "psi_long"]).map_err(csv_err)?;
    for (k, (a, b)) in short.iter().zip(long).enumerate() {
        w.write_record([k.to_string(), fmt(*a), fmt(*b)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_filter_csv<W: Write>(out: W, diag: &FilterDiagnostics, len: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "ckf_max_diagonal", "tkf_p_oo_norm"]).map_err(csv_err)?;
    let cell = |s: &Option<Vec<f64>>, k: usize| s.as_ref().map(|v| fmt(v[k])).unwrap_or_default();
    for k in 0..len {
        w.write_record([k.to_string(), cell(&diag.ckf_max_diagonal, k), cell(&diag.tkf_p_oo_norm, k)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct InitialConditions {
    true_state: &'static str,
    estimate: &'static str,
    ckf_covariance: CkfInitial,
    p_oo_scale: f64,
    p_obar_o: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct GainSummary {
    closed_loop_spectral_radius: f64,
    riccati_residual: f64,
    cross_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    crate_version: &'static str,
    scenario: &'a str,
    config_hash: &'a str,
    horizon: usize,
    seeds: &'a [u64],
    weights: Vec<f64>,
    initial_conditions: InitialConditions,
    steady_gains: GainSummary,
    files: &'a [FileEntry],
}

/// Result of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub files: Vec<FileEntry>,
}

/// Output directory: explicit argument, then the environment override, then
/// the config, then `out/<scenario name>`.
pub fn resolve_output_dir(cfg: &ScenarioConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.file
        .outputs
        .dir
        .clone()
        .unwrap_or_else(|| Path::new("out").join(cfg.name()))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_seed(cfg: &ScenarioConfig, prep: &Prepared, seed: u64, staging: &Path) -> Result<Vec<FileEntry>> {
    let run = run_seed(cfg, prep, seed)?;
    let rel = format!("seed_{seed}");
    let dir = staging.join(&rel);
    fs::create_dir_all(&dir)?;
    let mut names = vec!["free_trace.csv", "closed_trace.csv", "psi.csv", "hvar.csv"];
    write_trace_csv(create(&dir.join(names[0]))?, &run.free, &prep.bundle, None)?;
    write_trace_csv(
        create(&dir.join(names[1]))?,
        &run.closed.trace,
        &prep.bundle,
        Some(&run.closed.estimates),
    )?;
    write_psi_csv(create(&dir.join(names[2]))?, &run.psi_short, &run.psi_long)?;
    let curves = run.hvar_curves(cfg, prep)?;
    let series: Vec<HvarSeries<'_, f64>> = curves
        .iter()
        .map(|c| HvarSeries {
            series_id: &c.series_id,
            clock_id: c.clock_id,
            curve: &c.curve,
        })
        .collect();
    write_hvar_csv(create(&dir.join(names[3]))?, &series)?;
    if run.filters != FilterDiagnostics::default() {
        names.push("filters.csv");
        write_filter_csv(create(&dir.join("filters.csv"))?, &run.filters, run.free.len())?;
    }
    names
        .into_iter()
        .map(|name| {
            Ok(FileEntry {
                path: format!("{rel}/{name}"),
                sha256: hash_file(&dir.join(name))?,
                seed: Some(seed),
            })
        })
        .collect()
}

fn write_all(cfg: &ScenarioConfig, staging: &Path) -> Result<Vec<FileEntry>> {
    let prep = prepare(cfg)?;
    let per_seed = cfg
        .seeds()
        .par_iter()
        .map(|&seed| write_seed(cfg, &prep, seed, staging))
        .collect::<Result<Vec<_>>>()?;
    let mut files: Vec<FileEntry> = per_seed.into_iter().flatten().collect();
    let config_path = staging.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?)?;
    files.push(FileEntry {
        path: "config.toml".into(),
        sha256: hash_file(&config_path)?,
        seed: None,
    });
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        version: MANIFEST_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        scenario: cfg.name(),
        config_hash: &cfg.hash,
        horizon: cfg.horizon(),
        seeds: cfg.seeds(),
        weights: cfg.weights.as_slice().to_vec(),
        initial_conditions: InitialConditions {
            true_state: "zero",
            estimate: "zero",
            ckf_covariance: cfg.file.filter.ckf_initial,
            p_oo_scale: cfg.file.filter.p_oo_scale,
            p_obar_o: "zero",
        },
        steady_gains: GainSummary {
            closed_loop_spectral_radius: prep.gains.closed_loop_spectral_radius,
            riccati_residual: prep.gains.riccati_residual,
            cross_residual: prep.gains.cross_residual,
        },
        files: &files,
    };
    let mut out = create(&staging.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut out, &manifest).map_err(|e| Error::Parse(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(files)
}

/// Runs every seed of the scenario and writes the artifact set to `dir`.
///
/// An existing `dir` is replaced only if it holds a previous manifest.
pub fn run_scenario(cfg: &ScenarioConfig, dir: &Path) -> Result<Artifacts> {
    if dir.exists() && !dir.join("manifest.json").is_file() {
        return Err(Error::InvalidSpec(format!(
            "output directory {} exists and is not a previous run",
            dir.display()
        )));
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let leaf = dir
        .file_name()
        .ok_or_else(|| Error::InvalidSpec(format!("output path {} has no final component", dir.display())))?;
    let staging = parent.join(format!(".{}.partial-{}", leaf.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let files = match write_all(cfg, &staging) {
        Ok(files) => files,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(Artifacts {
        dir: dir.to_path_buf(),
        files,
    })
}
