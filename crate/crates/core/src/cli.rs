//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::{load_config, ScenarioConfig};
use crate::error::{Error, Result};
use crate::filters::SteadyGains;
use crate::scenario::{prepare, resolve_output_dir, run_scenario};
use crate::stability::{hvar_estimate, optimal_weight, weight_long_term, weight_short_term};

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "clock-ensemble", version, about = "Clock-ensemble time-scale simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its artifact set.
    Simulate {
        /// Scenario file, or the name of the bundled scenario.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the environment and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Replace the configured horizon.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Hadamard variance of a phase series read from CSV.
    Hvar {
        /// CSV file with one numeric column, or several with --column.
        input: PathBuf,
        /// Averaging factors.
        #[arg(long, value_delimiter = ',', required = true)]
        m: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Header name of the phase column.
        #[arg(long)]
        column: Option<String>,
    },
    /// Print ensemble weights.
    Weights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = WeightChoice::All)]
        mode: WeightChoice,
        /// Averaging interval for the general weights, in seconds.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Compute steady-state filter gains, reusing a matching cache file.
    Gains {
        #[arg(long)]
        config: PathBuf,
        /// Cache file; written when absent or stale.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate a scenario without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightChoice {
    Short,
    Long,
    General,
    All,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate {
            config,
            out: dir,
            seeds,
            horizon,
        } => {
            let mut cfg = load_config(&config)?;
            if seeds.is_some() || horizon.is_some() {
                cfg = cfg.with_run(
                    horizon.unwrap_or(cfg.horizon()),
                    seeds.unwrap_or_else(|| cfg.seeds().to_vec()),
                )?;
            }
            let dir = resolve_output_dir(&cfg, dir.as_deref());
            let art = run_scenario(&cfg, &dir)?;
            writeln!(out, "wrote {} files to {}", art.files.len() + 1, art.dir.display())?;
        }
        Command::Hvar { input, m, tau, column } => {
            let series = read_phase_csv(&input, column.as_deref())?;
            writeln!(out, "m,interval_s,value")?;
            for m in m {
                let v = hvar_estimate(&series, tau, m)?;
                writeln!(out, "{m},{},{v:e}", m as f64 * tau)?;
            }
        }
        Command::Weights { config, mode, tau } => {
            let cfg = load_config(&config)?;
            let sigmas = cfg.noise();
            let mut rows = Vec::new();
            if matches!(mode, WeightChoice::Short | WeightChoice::All) {
                rows.push(("short_term", weight_short_term(&sigmas.sigma1)?));
            }
            if matches!(mode, WeightChoice::Long | WeightChoice::All) {
                rows.push(("long_term", weight_long_term(&sigmas.sigma2, cfg.spec.n(), cfg.spec.m())?));
            }
            if matches!(mode, WeightChoice::General | WeightChoice::All) {
                rows.push(("general", optimal_weight(tau, &sigmas)?));
            }
            for (name, q) in rows {
                let cells: Vec<String> = q.as_slice().iter().map(|v| v.to_string()).collect();
                writeln!(out, "{name},{}", cells.join(","))?;
            }
        }
        Command::Gains { config, out: path } => {
            let cfg = load_config(&config)?;
            let key = gains_key(&cfg);
            if let Ok(file) = fs::File::open(&path) {
                if let Ok((cached, _)) = SteadyGains::<f64>::read_csv(file) {
                    if cached == key {
                        writeln!(out, "cached {}", path.display())?;
                        return Ok(());
                    }
                }
            }
            let prep = prepare(&cfg)?;
            let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
            prep.gains.write_csv(&mut file, &key)?;
            file.flush()?;
            writeln!(
                out,
                "wrote {} (closed-loop spectral radius {})",
                path.display(),
                prep.gains.closed_loop_spectral_radius
            )?;
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            writeln!(
                out,
                "ok: {} clocks ({} masers), tau {} s, gamma {}, horizon {}, {} seed(s), config {}",
                cfg.spec.n(),
                cfg.spec.m(),
                cfg.spec.tau,
                cfg.controller.gamma,
                cfg.horizon(),
                cfg.seeds().len(),
                &cfg.hash[..12]
            )?;
        }
    }
    Ok(())
}

/// Cache key for the steady gains: the ensemble and the weights.
fn gains_key(cfg: &ScenarioConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.spec.fingerprint().as_bytes());
    for q in cfg.weights.as_slice() {
        h.update(q.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Reads a phase column. Without `column` the file must have exactly one
/// column; a non-numeric first row is treated as a header.
fn read_phase_csv(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(column.is_some())
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(crate::ensemble::csv_err)?;
    let index = match column {
        Some(name) => {
            let headers = rdr.headers().map_err(crate::ensemble::csv_err)?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("no column `{name}` in {}", path.display())))?
        }
        None => 0,
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(crate::ensemble::csv_err)?;
        if column.is_none() && rec.len() != 1 {
            return Err(Error::Parse(format!(
                "{}: expected one column, found {}; pass --column",
                path.display(),
                rec.len()
            )));
        }
        let cell = rec.get(index).unwrap_or("");
        match cell.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 && column.is_none() => continue,
            Err(_) => return Err(Error::Parse(format!("{}: row {}: `{cell}` is not a number", path.display(), i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("clock-ensemble").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(call(&["validate", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(call(&[]).0, EXIT_USAGE);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn long_term_weights_zero_the_masers() {
        let (code, out, _) = call(&["weights", "--config", "mixed10", "--mode", "long"]);
        assert_eq!(code, 0);
        let cells: Vec<&str> = out.trim().split(',').collect();
        assert_eq!(cells[0], "long_term");
        assert_eq!(&cells[8..], &["0", "0", "0"]);
    }

    #[test]
    fn hvar_of_constant_phase_is_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("p.csv");
        fs::write(&path, "phase\n".to_string() + &"3.5e-9\n".repeat(20)).unwrap();
        let (code, out, _) = call(&["hvar", path.to_str().unwrap(), "--m", "1"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().nth(1).unwrap(), "1,1,0e0");
    }

    #[test]
    fn missing_file_is_a_runtime_failure() {
        let (code, _, err) = call(&["validate", "--config", "/nonexistent/x.toml"]);
        assert_eq!(code, EXIT_FAILURE);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn gains_cache_is_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("g.csv");
        let p = path.to_str().unwrap();
        let (code, out, _) = call(&["gains", "--config", "mixed10", "--out", p]);
        assert_eq!(code, 0, "{out}");
        assert!(out.starts_with("wrote"));
        let (_, out, _) = call(&["gains", "--config", "mixed10", "--out", p]);
        assert!(out.starts_with("cached"));
    }
}
