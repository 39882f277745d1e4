//! The `calibrex` command line: run files, output directories and the three
//! subcommands.
//!
//! Run file (JSON):
//!
//! ```json
//! {
//!   "simulator": {"builtin": "synth9"},
//!   "observed": [ ... ],
//!   "calibration": {"trials": 30, "dr_mode": "as-static"}
//! }
//! ```
//!
//! or, for a separate executable,
//! `"simulator": {"external": {"command": "...", "args": [], "timeout_s": 60,
//! "bounds": {"lower": [...], "upper": [...]}}}`. `observed` is optional for
//! built-ins (their stored reference series is used) and required otherwise.
//! Every `calibration` field is optional.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use calibrex::orchestrator::{write_outputs, Reduction};
use calibrex::simulators::{BuiltinSimulator, SimulatorHandle};
use calibrex::{
    AcquisitionFamily, BoxDomain, Builtin, CalibrationConfig, CalibrationState, Calibrator, DrMode, ExternalSimulator,
    MeanMode, Simulator,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Abort(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Abort(_) => EXIT_ABORT,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Abort(m) => write!(f, "{m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<calibrex::Error> for CliError {
    fn from(e: calibrex::Error) -> Self {
        match e {
            calibrex::Error::Config(m) => CliError::Config(m),
            calibrex::Error::Aborted(_) => CliError::Abort(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SimulatorSpec {
    Builtin(String),
    External(ExternalSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    pub bounds: BoxDomain,
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub simulator: SimulatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<Vec<f64>>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn simulator(&self) -> Result<SimulatorHandle> {
        match &self.simulator {
            SimulatorSpec::Builtin(name) => {
                let b: Builtin = name.parse().map_err(|e: calibrex::SimulatorError| CliError::Config(e.to_string()))?;
                Ok(SimulatorHandle::Builtin(BuiltinSimulator::new(b)))
            }
            SimulatorSpec::External(x) => {
                if !(x.timeout_s > 0.0 && x.timeout_s.is_finite()) {
                    return Err(CliError::Config("timeout_s must be positive".into()));
                }
                Ok(SimulatorHandle::External(ExternalSimulator::new(
                    x.command.clone(),
                    x.args.clone(),
                    Duration::from_secs_f64(x.timeout_s),
                    x.bounds.clone(),
                )))
            }
        }
    }

    /// The observed series, defaulting to a built-in's stored reference.
    pub fn observed(&self) -> Result<Vec<f64>> {
        match (&self.observed, &self.simulator) {
            (Some(y), _) if !y.is_empty() && y.iter().all(|v| v.is_finite()) => Ok(y.clone()),
            (Some(_), _) => Err(CliError::Config("observed must be a non-empty list of finite numbers".into())),
            (None, SimulatorSpec::Builtin(name)) => Ok(name.parse::<Builtin>().map_err(|e| CliError::Config(e.to_string()))?.observed()),
            (None, SimulatorSpec::External(_)) => Err(CliError::Config("an external simulator needs an observed series".into())),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "calibrex", version, about = "Calibrate black-box simulators by batch Bayesian optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a calibration and write trace.csv, curve.csv, report.json and state.json.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Continue the interrupted run whose checkpoint is staged next to --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the initial design only and write the active-subspace spectrum.
    Subspace {
        #[command(flatten)]
        common: Common,
    },
    /// Run several configurations over a shared seed list.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Additional run files; each is one configuration.
        #[arg(long = "with", value_name = "PATH")]
        with: Vec<PathBuf>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_parser = parse_dr)]
    pub dr: Option<DrMode>,
    #[arg(long, value_parser = parse_mean)]
    pub mean: Option<MeanMode>,
    #[arg(long, value_parser = parse_acq)]
    pub acq: Option<AcquisitionFamily>,
    /// Active-subspace dimension, instead of the eigenvalue-gap rule.
    #[arg(long, value_name = "N")]
    pub active_dim: Option<usize>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_dr(s: &str) -> std::result::Result<DrMode, String> {
    s.parse().map_err(|_| "expected original, as-static, as-dynamic, dl-static or dl-dynamic".to_string())
}

fn parse_mean(s: &str) -> std::result::Result<MeanMode, String> {
    s.parse().map_err(|_| "expected zero, dl-static or dl-dynamic".to_string())
}

fn parse_acq(s: &str) -> std::result::Result<AcquisitionFamily, String> {
    match s {
        "pi" => Ok(AcquisitionFamily::Pi),
        "ei" => Ok(AcquisitionFamily::Ei),
        "ucb" => Ok(AcquisitionFamily::Ucb),
        _ => Err("expected pi, ei or ucb".to_string()),
    }
}

impl Common {
    fn apply(&self, cfg: &mut CalibrationConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = self.dr {
            cfg.dr_mode = v;
        }
        if let Some(v) = self.mean {
            cfg.mean_mode = v;
        }
        if let Some(v) = self.acq {
            cfg.acquisition.family = v;
        }
        if self.active_dim.is_some() {
            cfg.active_dim = self.active_dim;
        }
    }

    fn load(&self, path: &Path) -> Result<RunFile> {
        let mut run = RunFile::load(path)?;
        self.apply(&mut run.calibration);
        Ok(run)
    }
}

/// An output directory that only appears under its final name once complete.
pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
}

impl Staging {
    /// Staging directory `.<name>.partial` beside `out`. Refuses to touch a
    /// non-empty `out` unless `force`; keeps an existing staging directory
    /// only when `keep`.
    pub fn new(out: &Path, force: bool, keep: bool) -> Result<Self> {
        let name = out
            .file_name()
            .ok_or_else(|| CliError::Config(format!("invalid output directory {}", out.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        if out.exists() && !force && fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(true) {
            return Err(CliError::Config(format!("{} already exists; pass --force to replace it", out.display())));
        }
        fs::create_dir_all(&parent)?;
        let dir = parent.join(format!(".{name}.partial"));
        if dir.exists() && !keep {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Staging { out: out.to_path_buf(), dir })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn commit(self) -> Result<()> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out)?;
        }
        fs::rename(&self.dir, &self.out)?;
        Ok(())
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cmd_calibrate(common: &Common, resume: bool) -> Result<()> {
    let run = common.load(&common.config)?;
    let sim = run.simulator()?;
    let observed = run.observed()?;
    run.calibration.validate(sim.domain().dim())?;
    let staging = Staging::new(&common.out, common.force, resume)?;
    let checkpoint = staging.path().join("state.json");

    let mut cal = if resume && checkpoint.exists() {
        let text = fs::read_to_string(&checkpoint)?;
        let state = CalibrationState::from_json(&text)?;
        if state.config != run.calibration {
            return Err(CliError::Config("checkpoint was written with a different configuration".into()));
        }
        log::info!("resuming after iteration {}", state.iteration);
        Calibrator::resume(state, &sim, &observed)?
    } else {
        Calibrator::start(run.calibration.clone(), &sim, &observed)?
    };
    write_atomic(&staging.path().join("config.json"), &serde_json::to_string_pretty(&run).map_err(|e| CliError::Other(e.to_string()))?)?;
    write_atomic(&checkpoint, &cal.state().to_json()?)?;
    while cal.step()? {
        write_atomic(&checkpoint, &cal.state().to_json()?)?;
    }
    let report = cal.report();
    write_outputs(staging.path(), cal.state(), &report)?;
    staging.commit()?;
    match &report.best {
        Some(b) => println!("best loss {:.6e} at {:?} ({} evaluations, {} failures)", b.loss, b.theta, report.evaluations, report.failures.len()),
        None => println!("no successful evaluations"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SubspaceSummary {
    active_dim: usize,
    /// "gap" when chosen by the eigenvalue-gap rule, "fixed" when set by hand.
    chosen_by: &'static str,
    eigenvalues: Vec<f64>,
    /// Columns are eigenvectors, stored row by row.
    eigenvectors: Vec<Vec<f64>>,
    evaluations: usize,
    failures: usize,
}

pub fn cmd_subspace(common: &Common) -> Result<()> {
    let mut run = common.load(&common.config)?;
    run.calibration.dr_mode = DrMode::AsStatic;
    run.calibration.mean_mode = MeanMode::Zero;
    let sim = run.simulator()?;
    let observed = run.observed()?;
    run.calibration.validate(sim.domain().dim())?;
    let staging = Staging::new(&common.out, common.force, false)?;
    let cal = Calibrator::start(run.calibration.clone(), &sim, &observed)?;
    let state = cal.state();
    let Reduction::Subspace { subspace } = &state.reduction else {
        return Err(CliError::Other("no subspace was built".into()));
    };
    let mut w = csv::Writer::from_path(staging.path().join("eigvals.csv")).map_err(|e| CliError::Other(e.to_string()))?;
    w.write_record(["index", "eigenvalue"]).map_err(|e| CliError::Other(e.to_string()))?;
    for (i, v) in subspace.eigenvalues().iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()]).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush()?;
    let vecs = subspace.eigenvectors();
    let summary = SubspaceSummary {
        active_dim: subspace.active_dim(),
        chosen_by: if run.calibration.active_dim.is_some() { "fixed" } else { "gap" },
        eigenvalues: subspace.eigenvalues().to_vec(),
        eigenvectors: (0..vecs.nrows()).map(|r| vecs.row(r).iter().copied().collect()).collect(),
        evaluations: state.evaluated.len(),
        failures: state.failures.len(),
    };
    write_atomic(&staging.path().join("subspace.json"), &serde_json::to_string_pretty(&summary).map_err(|e| CliError::Other(e.to_string()))?)?;
    staging.commit()?;
    println!("active dimension {} (eigenvalues {:?})", summary.active_dim, summary.eigenvalues);
    Ok(())
}

/// Median, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_compare(common: &Common, with: &[PathBuf], seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let mut paths = vec![common.config.clone()];
    paths.extend(with.iter().cloned());
    let mut runs = Vec::new();
    for p in &paths {
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        if runs.iter().any(|(l, _): &(String, RunFile)| *l == label) {
            return Err(CliError::Config(format!("two configurations are named {label:?}")));
        }
        let run = common.load(p)?;
        run.calibration.validate(run.simulator()?.domain().dim())?;
        run.observed()?;
        runs.push((label, run));
    }
    let staging = Staging::new(&common.out, common.force, false)?;
    let err = |e: csv::Error| CliError::Other(e.to_string());
    let mut long = csv::Writer::from_path(staging.path().join("compare.csv")).map_err(err)?;
    long.write_record(["config", "seed", "iteration", "min_loss"]).map_err(err)?;
    let mut summary = csv::Writer::from_path(staging.path().join("summary.csv")).map_err(err)?;
    summary.write_record(["config", "runs", "iterations", "median_final_min_loss"]).map_err(err)?;
    for (label, run) in &runs {
        let sim = run.simulator()?;
        let observed = run.observed()?;
        let mut finals = Vec::new();
        for &seed in seeds {
            let cfg = CalibrationConfig { seed, ..run.calibration.clone() };
            let (state, _) = calibrex::run(cfg, &sim, &observed)?;
            for (i, v) in state.curve.iter().enumerate() {
                long.write_record([label.clone(), seed.to_string(), i.to_string(), v.to_string()]).map_err(err)?;
            }
            finals.push(*state.curve.last().expect("curve has the design entry"));
        }
        let med = median(&finals);
        summary
            .write_record([label.clone(), seeds.len().to_string(), run.calibration.trials.to_string(), med.to_string()])
            .map_err(err)?;
        println!("{label}: median final min loss {med:.6e} over {} seeds", seeds.len());
    }
    long.flush()?;
    summary.flush()?;
    drop(long);
    drop(summary);
    staging.commit()
}

pub fn init_logging() {
    let level = std::env::var("CALIBREX_LOG").unwrap_or_else(|_| "warn".into());
    let _ = env_logger::Builder::new().parse_filters(&level).format_timestamp(None).try_init();
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    let result = match &cli.command {
        Command::Calibrate { common, resume } => cmd_calibrate(common, *resume),
        Command::Subspace { common } => cmd_subspace(common),
        Command::Compare { common, with, seeds } => cmd_compare(common, with, seeds),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("calibrex: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn builtin_observed_defaults_to_reference() {
        let run: RunFile = serde_json::from_str(r#"{"simulator": {"builtin": "synth9"}}"#).unwrap();
        assert_eq!(run.observed().unwrap(), Builtin::Synth9.observed());
        assert_eq!(run.calibration, CalibrationConfig::default());
        let ext: RunFile = serde_json::from_str(
            r#"{"simulator": {"external": {"command": "x", "bounds": {"lower": [0], "upper": [1]}}}}"#,
        )
        .unwrap();
        assert!(matches!(ext.observed(), Err(CliError::Config(_))));
        assert!(serde_json::from_str::<RunFile>(r#"{"simulator": {"builtin": "synth9"}, "observed": [], "x": 1}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cli = Cli::try_parse_from([
            "calibrex", "calibrate", "--config", "c.json", "--out", "o", "--seed", "7", "--dr", "dl-dynamic", "--mean",
            "dl-static", "--acq", "pi", "--batch", "2", "--trials", "9", "--parallelism", "3",
        ])
        .unwrap();
        let Command::Calibrate { common, resume } = cli.command else { panic!() };
        assert!(!resume);
        let mut cfg = CalibrationConfig::default();
        common.apply(&mut cfg);
        assert_eq!((cfg.seed, cfg.trials, cfg.batch_size, cfg.parallelism), (7, 9, 2, 3));
        assert_eq!((cfg.dr_mode, cfg.mean_mode, cfg.acquisition.family), (DrMode::DlDynamic, MeanMode::DlStatic, AcquisitionFamily::Pi));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(calibrex::Error::Config("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::from(calibrex::Error::Aborted("x".into())).exit_code(), EXIT_ABORT);
        assert_eq!(main_with_args(["calibrex", "--help"]), EXIT_OK);
        assert_eq!(main_with_args(["calibrex", "frobnicate"]), EXIT_CONFIG);
    }
}
