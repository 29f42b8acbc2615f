//! Scenario configuration: TOML ingestion, validation and serialisation.
//!
//! A scenario file is parsed into [`ScenarioFile`], which mirrors the on-disk
//! layout and serialises back losslessly. [`ScenarioConfig`] wraps it together
//! with the validated ensemble, weights and controller derived from it.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{ClockKind, ClockSpec};
use crate::control::{feedback_gains, ClosedLoopOptions, ControllerConfig, FilterChoice};
use crate::decomposition::WeightVector;
use crate::ensemble::{EnsembleSpec, NoiseDiagonals};
use crate::error::{Error, Result};
use crate::filters::ckf::CkfUpdateForm;
use crate::filters::tkf::DEFAULT_P_OO_SCALE;
use crate::stability;

/// Name under which the bundled ten-clock scenario can be loaded.
pub const BUNDLED_NAME: &str = "mixed10";
const BUNDLED_TOML: &str = include_str!("../configs/mixed10.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub ensemble: EnsembleSection,
    pub weights: WeightMode,
    pub controller: ControllerSection,
    #[serde(default)]
    pub filter: FilterSection,
    pub run: RunSection,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub tau: f64,
    pub r: f64,
    #[serde(default)]
    pub v: DifferenceChoice,
    #[serde(default)]
    pub scales: Scales,
    pub clocks: Vec<ClockRow>,
}

/// Either the named default `[I | −1]` or explicit rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DifferenceChoice {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

impl Default for DifferenceChoice {
    fn default() -> Self {
        DifferenceChoice::Named("default".into())
    }
}

/// Multipliers applied to the clock-table sigma columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scales {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Scales {
            sigma1: 1.0,
            sigma2: 1.0,
            sigma3: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockRow {
    pub kind: ClockKind,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub sigma3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    /// Proportional to `1/σ₁²`.
    ShortTerm,
    /// Cesium clocks proportional to `1/σ₂²`, masers zero.
    LongTerm,
    Custom { q: Vec<f64> },
    /// Optimal weights for averaging interval `tau_opt` seconds.
    General { tau_opt: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub allow_unstable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ckf,
    Tkf,
    Sstkf,
}

/// Initial covariance of the full-model filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkfInitial {
    /// One step of process noise from the known zero state.
    #[default]
    ProcessNoise,
    /// `p_oo_scale · I`.
    Isotropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// Filters to run; `ckf` and `tkf` add a covariance diagnostic output.
    pub kinds: Vec<FilterKind>,
    #[serde(default)]
    pub ckf_update_form: CkfUpdateForm,
    #[serde(default)]
    pub ckf_initial: CkfInitial,
    #[serde(default = "default_p_oo_scale")]
    pub p_oo_scale: f64,
    /// Filter driving the closed loop.
    #[serde(default)]
    pub closed_loop: FilterChoice,
}

fn default_p_oo_scale() -> f64 {
    DEFAULT_P_OO_SCALE
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            kinds: vec![FilterKind::Sstkf],
            ckf_update_form: CkfUpdateForm::default(),
            ckf_initial: CkfInitial::default(),
            p_oo_scale: DEFAULT_P_OO_SCALE,
            closed_loop: FilterChoice::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub file: ScenarioFile,
    pub spec: EnsembleSpec<f64>,
    pub weights: WeightVector<f64>,
    pub controller: ControllerConfig<f64>,
    /// sha256 of the canonical serialisation.
    pub hash: String,
}

impl ScenarioConfig {
    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let spec = build_spec(&file.ensemble)?;
        let weights = build_weights(&file.weights, &spec)?;
        let controller = build_controller(&file.controller, spec.tau)?;
        validate_filter(&file.filter)?;
        validate_run(&file.run)?;
        let hash = hex::encode(Sha256::digest(to_toml(&file)?.as_bytes()));
        Ok(ScenarioConfig {
            file,
            spec,
            weights,
            controller,
            hash,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_file(parse_toml(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(&self.file)
    }

    pub fn name(&self) -> &str {
        self.file.name.as_deref().unwrap_or("scenario")
    }

    pub fn horizon(&self) -> usize {
        self.file.run.horizon
    }

    pub fn seeds(&self) -> &[u64] {
        &self.file.run.seeds
    }

    pub fn closed_loop_options(&self) -> ClosedLoopOptions {
        ClosedLoopOptions {
            filter: self.file.filter.closed_loop,
            p_oo_scale: self.file.filter.p_oo_scale,
            allow_unstable: self.file.controller.allow_unstable,
        }
    }

    pub fn noise(&self) -> NoiseDiagonals<f64> {
        NoiseDiagonals::from_clocks(&self.spec.clocks)
    }

    /// Same scenario with another weight choice.
    pub fn with_weights(&self, mode: WeightMode) -> Result<Self> {
        let mut file = self.file.clone();
        file.weights = mode;
        Self::from_file(file)
    }

    pub fn with_run(&self, horizon: usize, seeds: Vec<u64>) -> Result<Self> {
        let mut file = self.file.clone();
        file.run = RunSection { horizon, seeds };
        Self::from_file(file)
    }
}

pub fn parse_toml(text: &str) -> Result<ScenarioFile> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn to_toml(file: &ScenarioFile) -> Result<String> {
    toml::to_string(file).map_err(|e| Error::Parse(e.to_string()))
}

/// Loads a scenario from a path, or the bundled scenario by name.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    if path.as_os_str() == BUNDLED_NAME {
        return bundled();
    }
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_toml(&text)
}

pub fn bundled() -> Result<ScenarioConfig> {
    ScenarioConfig::from_toml(BUNDLED_TOML)
}

fn positive_finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and positive, got {v}")))
    }
}

fn build_spec(e: &EnsembleSection) -> Result<EnsembleSpec<f64>> {
    positive_finite("ensemble.tau", e.tau)?;
    if !(e.r.is_finite() && e.r >= 0.0) {
        return Err(Error::config("ensemble.r", format!("must be finite and non-negative, got {}", e.r)));
    }
    positive_finite("ensemble.scales.sigma1", e.scales.sigma1)?;
    positive_finite("ensemble.scales.sigma2", e.scales.sigma2)?;
    positive_finite("ensemble.scales.sigma3", e.scales.sigma3)?;
    if e.clocks.len() < 2 {
        return Err(Error::config("ensemble.clocks", "needs at least two clocks"));
    }
    let mut seen_hm = false;
    let mut clocks = Vec::with_capacity(e.clocks.len());
    for (i, row) in e.clocks.iter().enumerate() {
        let field = |s: &str| format!("ensemble.clocks[{i}].{s}");
        match row.kind {
            ClockKind::Hm => seen_hm = true,
            ClockKind::Cs if seen_hm => {
                return Err(Error::config(field("kind"), "cesium clocks must precede all masers"));
            }
            ClockKind::Cs => {}
        }
        if row.kind == ClockKind::Cs && row.sigma3 != 0.0 {
            return Err(Error::config(field("sigma3"), "must be zero for a cs clock"));
        }
        for (name, v) in [("sigma1", row.sigma1), ("sigma2", row.sigma2), ("sigma3", row.sigma3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field(name), format!("must be finite and non-negative, got {v}")));
            }
        }
        let spec = ClockSpec::new(
            row.kind,
            row.sigma1 * e.scales.sigma1,
            row.sigma2 * e.scales.sigma2,
            row.sigma3 * e.scales.sigma3,
        )
        .map_err(|err| Error::config(field("kind"), err.to_string()))?;
        clocks.push(spec);
    }
    if clocks.iter().all(|c| c.kind == ClockKind::Hm) {
        return Err(Error::config("ensemble.clocks", "needs at least one cs clock"));
    }
    let n = clocks.len();
    let v = match &e.v {
        DifferenceChoice::Named(s) if s == "default" => crate::ensemble::default_difference_matrix(n)?,
        DifferenceChoice::Named(s) => {
            return Err(Error::config("ensemble.v", format!("unknown name `{s}`; use \"default\" or a list of rows")))
        }
        DifferenceChoice::Rows(rows) => {
            if rows.len() != n - 1 || rows.iter().any(|r| r.len() != n) {
                return Err(Error::config("ensemble.v", format!("must have {} rows of {n} entries", n - 1)));
            }
            DMatrix::from_row_iterator(n - 1, n, rows.iter().flatten().copied())
        }
    };
    EnsembleSpec::new(clocks, e.tau, e.r, v).map_err(|err| Error::config("ensemble", err.to_string()))
}

fn build_weights(mode: &WeightMode, spec: &EnsembleSpec<f64>) -> Result<WeightVector<f64>> {
    let noise = NoiseDiagonals::from_clocks(&spec.clocks);
    let wrap = |err: Error| Error::config("weights", err.to_string());
    match mode {
        WeightMode::ShortTerm => stability::weight_short_term(&noise.sigma1).map_err(wrap),
        WeightMode::LongTerm => stability::weight_long_term(&noise.sigma2, spec.n(), spec.m()).map_err(wrap),
        WeightMode::Custom { q } => {
            if q.len() != spec.n() {
                return Err(Error::config("weights.q", format!("needs {} entries, got {}", spec.n(), q.len())));
            }
            WeightVector::new(DVector::from_column_slice(q)).map_err(|err| Error::config("weights.q", err.to_string()))
        }
        WeightMode::General { tau_opt } => {
            positive_finite("weights.tau_opt", *tau_opt)?;
            stability::optimal_weight(*tau_opt, &noise).map_err(wrap)
        }
    }
}

fn build_controller(c: &ControllerSection, tau: f64) -> Result<ControllerConfig<f64>> {
    let gamma = c.gamma.ok_or_else(|| Error::config("controller.gamma", "is required"))?;
    if !gamma.is_finite() {
        return Err(Error::config("controller.gamma", "must be finite"));
    }
    let cfg = feedback_gains(gamma, tau)?;
    if !cfg.stable && !c.allow_unstable {
        return Err(Error::config(
            "controller.gamma",
            format!("{gamma} violates |1 - gamma| < 1; set controller.allow_unstable to override"),
        ));
    }
    Ok(cfg)
}

fn validate_filter(f: &FilterSection) -> Result<()> {
    if f.kinds.is_empty() {
        return Err(Error::config("filter.kinds", "must list at least one filter"));
    }
    positive_finite("filter.p_oo_scale", f.p_oo_scale)
}

fn validate_run(r: &RunSection) -> Result<()> {
    if r.horizon < 8 {
        return Err(Error::config("run.horizon", "must be at least 8 steps"));
    }
    if r.seeds.is_empty() {
        return Err(Error::config("run.seeds", "must list at least one seed"));
    }
    let mut sorted = r.seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != r.seeds.len() {
        return Err(Error::config("run.seeds", "must not repeat"));
    }
    Ok(())
}
