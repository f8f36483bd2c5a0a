//! Batch front-end: argument parsing, experiment commands and CSV output.

use crate::config::{parse_pairs, Estimator, ExperimentConfig};
use crate::engine::{combined_z, GradEstimate, RunPlan};
use crate::error::{Error, Result};
use crate::flow::{grad_bel, grad_reflected_intermediate, grad_reflected_psi};
use crate::functions::{registry_function, ScalarField};
use crate::killed::{bridge_probability, weight_means_mc, StepMode, WeightMode};
use crate::model::{covariance, validate_hypothesis1, ModelSpec, ProbeBox};
use crate::normal::upper_tail;
use crate::oracles::{
    bridge_discreteness_allowance, crossing_prob_bruteforce, finite_difference_gradient,
    images_gradient, reflected_identity_check, BumpStreams, QuadratureConfig,
};
use crate::pushforward::{grad_killed_pushforward, PushforwardOptions};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CSV_HEADER: [&str; 11] = [
    "experiment",
    "model",
    "estimator",
    "component",
    "n",
    "N",
    "seed",
    "estimate",
    "stderr",
    "reference",
    "wall_time_ms",
];

pub const VALIDATE_HEADER: [&str; 5] = ["check", "value", "reference", "stderr", "pass"];

/// Agreement threshold in combined standard errors.
pub const Z_LIMIT: f64 = 3.0;

const HYPOTHESIS_PROBES: usize = 256;
const BRIDGE_SUBSTEPS: usize = 1000;
const BRIDGE_MAX_PATHS: u64 = 200_000;
/// Endpoint pairs for the bridge check, in units of `sqrt(a11 dt)` above the boundary.
const BRIDGE_ENDPOINTS: [(f64, f64); 5] =
    [(0.2, 0.2), (0.5, 1.0), (1.0, 0.5), (1.5, 1.5), (0.1, 2.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    CheckFailure = 1,
    Usage = 2,
    Numeric = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn for_error(err: &Error) -> Self {
        match err.root() {
            Error::Config(_) | Error::Contract(_) | Error::Io(_) | Error::Csv(_) => {
                ExitStatus::Usage
            }
            _ => ExitStatus::Numeric,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "halfgrad",
    version,
    about = "Monte Carlo gradients of killed diffusions on a half-space"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Validate,
    Gradient,
    Convergence,
    Compare,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the runtime self-checks for a model
    Validate(Overrides),
    /// Estimate the gradient with every requested estimator
    Gradient(Overrides),
    /// Repeat the gradient estimate over a list of step counts
    Convergence(Overrides),
    /// Compare every estimator with the finite-difference oracle
    Compare(Overrides),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Validate(_) => CommandKind::Validate,
            Command::Gradient(_) => CommandKind::Gradient,
            Command::Convergence(_) => CommandKind::Convergence,
            Command::Compare(_) => CommandKind::Compare,
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Validate(o)
            | Command::Gradient(o)
            | Command::Convergence(o)
            | Command::Compare(o) => o,
        }
    }
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Validate => "validate",
            CommandKind::Gradient => "gradient",
            CommandKind::Convergence => "convergence",
            CommandKind::Compare => "compare",
        }
    }
}

#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// Flat key = value configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<String>,
    /// Number of Monte Carlo paths
    #[arg(long, value_name = "INT")]
    pub paths: Option<String>,
    /// Number of time steps
    #[arg(long, value_name = "INT")]
    pub steps: Option<String>,
    /// CSV output file
    #[arg(long, value_name = "PATH")]
    pub out: Option<String>,
    /// Worker threads, or "auto"
    #[arg(long, value_name = "INT")]
    pub workers: Option<String>,
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
    /// Payoff name
    #[arg(long = "f", value_name = "NAME")]
    pub function: Option<String>,
    /// Comma-separated estimator names
    #[arg(long, value_name = "LIST")]
    pub estimators: Option<String>,
    /// Comma-separated start point
    #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
    pub x0: Option<String>,
    #[arg(long, value_name = "FLOAT")]
    pub horizon: Option<String>,
    /// Constant drift of the one-dimensional model
    #[arg(long, value_name = "FLOAT", allow_hyphen_values = true)]
    pub drift: Option<String>,
    /// Comma-separated ascending step counts for `convergence`
    #[arg(long, value_name = "LIST")]
    pub n_list: Option<String>,
    /// Finite-difference bump size
    #[arg(long, value_name = "FLOAT")]
    pub bump: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> BTreeMap<String, String> {
        [
            ("seed", &self.seed),
            ("N", &self.paths),
            ("n", &self.steps),
            ("output", &self.out),
            ("workers", &self.workers),
            ("model", &self.model),
            ("f", &self.function),
            ("estimators", &self.estimators),
            ("x0", &self.x0),
            ("T", &self.horizon),
            ("drift", &self.drift),
            ("n_list", &self.n_list),
            ("bump", &self.bump),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect()
    }

    /// Reads the config file, if any, and layers the flags over it.
    pub fn resolve(&self, kind: CommandKind) -> Result<ExperimentConfig> {
        let mut experiment = BTreeMap::new();
        experiment.insert("experiment".to_string(), kind.name().to_string());
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                parse_pairs(&text)?
            }
            None => BTreeMap::new(),
        };
        ExperimentConfig::from_layers(&[experiment, file, self.pairs()])
    }
}

/// One line of the gradient CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRow {
    pub experiment: String,
    pub model: String,
    pub estimator: Estimator,
    /// One-based coordinate index.
    pub component: usize,
    pub steps: usize,
    pub paths: u64,
    pub seed: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: Option<f64>,
    pub wall_time_ms: u128,
}

impl GradientRow {
    fn record(&self) -> [String; 11] {
        [
            self.experiment.clone(),
            self.model.clone(),
            self.estimator.to_string(),
            self.component.to_string(),
            self.steps.to_string(),
            self.paths.to_string(),
            self.seed.to_string(),
            self.estimate.to_string(),
            self.stderr.to_string(),
            self.reference.map(|r| r.to_string()).unwrap_or_default(),
            self.wall_time_ms.to_string(),
        ]
    }

    /// `|estimate - reference| / stderr`, if a reference is known.
    pub fn z(&self) -> Option<f64> {
        self.reference
            .map(|r| combined_z(self.estimate - r, self.stderr))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub reference: Option<f64>,
    pub stderr: Option<f64>,
    pub pass: bool,
}

impl CheckRow {
    fn record(&self) -> [String; 5] {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            self.check.clone(),
            self.value.to_string(),
            opt(self.reference),
            opt(self.stderr),
            self.pass.to_string(),
        ]
    }
}

pub fn write_gradient_csv<W: Write>(sink: W, rows: &[GradientRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_check_csv<W: Write>(sink: W, rows: &[CheckRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(VALIDATE_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

fn plan_for(cfg: &ExperimentConfig, steps: usize, tag: &str) -> RunPlan {
    RunPlan::new(cfg.seed, cfg.paths, steps)
        .with_workers(cfg.workers)
        .with_tag(tag)
}

/// Runs one estimator at `steps` time steps.
pub fn run_estimator(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    f: &dyn ScalarField,
    estimator: Estimator,
    steps: usize,
) -> Result<GradEstimate> {
    let plan = plan_for(cfg, steps, estimator.name());
    let x = &cfg.x0;
    match estimator {
        Estimator::Pushforward => grad_killed_pushforward(
            spec,
            f,
            x,
            &plan,
            PushforwardOptions {
                include_rho_tilde: cfg.include_rho_tilde,
            },
        ),
        Estimator::Psi => grad_reflected_psi(spec, f, x, &plan),
        Estimator::Intermediate => grad_reflected_intermediate(spec, f, x, &plan),
        Estimator::Bel => grad_bel(spec, f, x, &plan),
        Estimator::Fd => {
            finite_difference_gradient(spec, f, x, &plan, cfg.bump, BumpStreams::Common)
        }
    }
}

/// The exact gradient when the model is a driftless one-dimensional Brownian motion.
pub fn reference_gradient(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    f: &dyn ScalarField,
) -> Result<Option<Vec<f64>>> {
    if cfg.model != "bm1d" || cfg.drift != 0.0 {
        return Ok(None);
    }
    let a11 = covariance(spec, &cfg.x0)[(0, 0)];
    let g = images_gradient(
        a11,
        spec.level(),
        cfg.x0[0],
        spec.horizon(),
        &|y| f.value(&[y]),
        &QuadratureConfig::default(),
    )?;
    Ok(Some(vec![g.value]))
}

fn rows_for(
    cfg: &ExperimentConfig,
    estimator: Estimator,
    steps: usize,
    est: &GradEstimate,
    reference: Option<&[f64]>,
    wall_time_ms: u128,
) -> Vec<GradientRow> {
    (0..est.estimate.len())
        .map(|j| GradientRow {
            experiment: cfg.experiment.clone(),
            model: cfg.model.clone(),
            estimator,
            component: j + 1,
            steps,
            paths: est.paths,
            seed: est.seed,
            estimate: est.estimate[j],
            stderr: est.stderr[j],
            reference: reference.map(|r| r[j]),
            wall_time_ms,
        })
        .collect()
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, u128)> {
    let start = Instant::now();
    let value = f()?;
    Ok((value, start.elapsed().as_millis()))
}

fn setup(cfg: &ExperimentConfig) -> Result<(ModelSpec, Box<dyn ScalarField>)> {
    let spec = cfg.spec()?;
    let f = registry_function(&cfg.function, spec.level(), spec.dim())?;
    Ok((spec, f))
}

/// Gradient rows for every requested estimator at `cfg.steps`.
pub fn gradient_rows(cfg: &ExperimentConfig) -> Result<Vec<GradientRow>> {
    let (spec, f) = setup(cfg)?;
    let reference = reference_gradient(cfg, &spec, f.as_ref())?;
    let mut rows = Vec::new();
    for &estimator in &cfg.estimators {
        let (est, ms) = timed(|| run_estimator(cfg, &spec, f.as_ref(), estimator, cfg.steps))?;
        rows.extend(rows_for(
            cfg,
            estimator,
            cfg.steps,
            &est,
            reference.as_deref(),
            ms,
        ));
    }
    Ok(rows)
}

/// Gradient rows for every estimator and every step count in `cfg.n_list`.
pub fn convergence_rows(cfg: &ExperimentConfig) -> Result<Vec<GradientRow>> {
    let (spec, f) = setup(cfg)?;
    let reference = reference_gradient(cfg, &spec, f.as_ref())?;
    let mut rows = Vec::new();
    for &steps in &cfg.n_list {
        for &estimator in &cfg.estimators {
            let (est, ms) = timed(|| run_estimator(cfg, &spec, f.as_ref(), estimator, steps))?;
            rows.extend(rows_for(
                cfg,
                estimator,
                steps,
                &est,
                reference.as_deref(),
                ms,
            ));
        }
    }
    Ok(rows)
}

/// Rows for the finite-difference oracle followed by every other estimator,
/// each referenced against the oracle. Returns the rows and whether every
/// estimator agrees with it within [`Z_LIMIT`] combined standard errors.
pub fn compare_rows(cfg: &ExperimentConfig) -> Result<(Vec<GradientRow>, bool)> {
    let (spec, f) = setup(cfg)?;
    let (oracle, ms) = timed(|| run_estimator(cfg, &spec, f.as_ref(), Estimator::Fd, cfg.steps))?;
    let mut rows = rows_for(cfg, Estimator::Fd, cfg.steps, &oracle, None, ms);
    let mut agree = true;
    for &estimator in cfg.estimators.iter().filter(|&&e| e != Estimator::Fd) {
        let (est, ms) = timed(|| run_estimator(cfg, &spec, f.as_ref(), estimator, cfg.steps))?;
        agree &= est.z_scores(&oracle).iter().all(|&z| z <= Z_LIMIT);
        let mut r = rows_for(cfg, estimator, cfg.steps, &est, Some(&oracle.estimate), ms);
        for (row, se) in r.iter_mut().zip(&oracle.stderr) {
            row.stderr = row.stderr.hypot(*se);
        }
        rows.extend(r);
    }
    Ok((rows, agree))
}

fn within(value: f64, reference: f64, stderr: f64, allowance: f64) -> bool {
    (value - reference).abs() <= Z_LIMIT * stderr + allowance
}

/// The runtime self-checks.
pub fn validation_checks(cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let spec = cfg.spec()?;
    let level = spec.level();
    let dt = cfg.horizon / cfg.steps as f64;
    let a11 = covariance(&spec, &cfg.x0)[(0, 0)];
    let mut rows = Vec::new();

    let report = validate_hypothesis1(&spec, &ProbeBox::around_boundary(&spec), HYPOTHESIS_PROBES)?;
    rows.push(CheckRow {
        check: "ellipticity_floor".into(),
        value: report.ellipticity_floor,
        reference: None,
        stderr: None,
        pass: report.ellipticity_floor > 0.0 && report.invertible,
    });
    rows.push(CheckRow {
        check: "boundary_orthogonality".into(),
        value: report.max_boundary_violation,
        reference: Some(0.0),
        stderr: None,
        pass: report.pass,
    });

    let plan = plan_for(cfg, cfg.steps, "weight_martingale");
    let means = weight_means_mc(
        &spec,
        &cfg.x0,
        &plan,
        WeightMode::Smoothed,
        StepMode::Driftless,
    )?;
    let mbar = means.reflecting;
    rows.push(CheckRow {
        check: "weight_martingale".into(),
        value: mbar.value,
        reference: Some(1.0),
        stderr: Some(mbar.stderr),
        pass: within(mbar.value, 1.0, mbar.stderr, 0.0),
    });

    let one_step = spec.with_horizon(dt)?;
    for (k, u) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let mut y = cfg.x0.clone();
        y[0] = level + u * (a11 * dt).sqrt();
        let local_a11 = covariance(&spec, &y)[(0, 0)];
        let u_local = (y[0] - level) / (local_a11 * dt).sqrt();
        let plan = RunPlan::new(cfg.seed.wrapping_add(1 + k as u64), cfg.paths, 1)
            .with_workers(cfg.workers);
        let m = weight_means_mc(
            &one_step,
            &y,
            &plan,
            WeightMode::Bernoulli,
            StepMode::Driftless,
        )?
        .killing;
        let reference = upper_tail(-u_local) - upper_tail(u_local);
        rows.push(CheckRow {
            check: format!("killing_identity_u{u}"),
            value: m.value,
            reference: Some(reference),
            stderr: Some(m.stderr),
            pass: within(m.value, reference, m.stderr, 0.0),
        });
    }

    let s = (a11 * dt).sqrt();
    let bridge_paths = cfg.paths.min(BRIDGE_MAX_PATHS);
    for (k, (a, b)) in BRIDGE_ENDPOINTS.into_iter().enumerate() {
        let (prev, next) = (level + a * s, level + b * s);
        let p = bridge_probability(level, a11, prev, next, dt);
        let plan = RunPlan::new(cfg.seed.wrapping_add(10 + k as u64), bridge_paths, 1)
            .with_workers(cfg.workers);
        let brute = crossing_prob_bruteforce(a11, level, prev, next, dt, BRIDGE_SUBSTEPS, &plan)?;
        let allowance = bridge_discreteness_allowance(a11, level, prev, next, dt, BRIDGE_SUBSTEPS);
        rows.push(CheckRow {
            check: format!("bridge_{a}_{b}"),
            value: p,
            reference: Some(brute.prob),
            stderr: Some(brute.stderr),
            pass: within(p, brute.prob, brute.stderr, allowance),
        });
    }

    let plan = RunPlan::new(cfg.seed.wrapping_add(20), cfg.paths, 1).with_workers(cfg.workers);
    let check = reflected_identity_check(
        a11,
        level,
        cfg.x0[0],
        cfg.horizon,
        &|y| (y - level).powi(2),
        &plan,
    )?;
    rows.push(CheckRow {
        check: "reflected_identity".into(),
        value: check.lhs,
        reference: Some(check.rhs),
        stderr: Some(check.combined_stderr()),
        pass: within(check.lhs, check.rhs, check.combined_stderr(), 0.0),
    });
    Ok(rows)
}

fn output_path(cfg: &ExperimentConfig, kind: CommandKind) -> PathBuf {
    cfg.output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("halfgrad_{}.csv", kind.name())))
}

fn create_output(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn summarize_gradient(out: &mut dyn Write, rows: &[GradientRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<13} {:>4} {:>5} {:>12} {:>10} {:>12} {:>7} {:>8}",
        "estimator", "comp", "n", "estimate", "stderr", "reference", "z", "ms"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<13} {:>4} {:>5} {:>12.6} {:>10.6} {:>12} {:>7} {:>8}",
            r.estimator.name(),
            r.component,
            r.steps,
            r.estimate,
            r.stderr,
            fmt_opt(r.reference),
            r.z().map_or_else(|| "-".to_string(), |z| format!("{z:.2}")),
            r.wall_time_ms
        )?;
    }
    Ok(())
}

fn summarize_checks(out: &mut dyn Write, rows: &[CheckRow]) -> std::io::Result<()> {
    for r in rows {
        writeln!(
            out,
            "{:<4} {:<24} value {:>12.6}  reference {:>10}  stderr {:>10}",
            if r.pass { "ok" } else { "FAIL" },
            r.check,
            r.value,
            fmt_opt(r.reference),
            fmt_opt(r.stderr)
        )?;
    }
    Ok(())
}

/// Executes a command, writing the CSV and a summary to `out`.
pub fn execute(
    kind: CommandKind,
    cfg: &ExperimentConfig,
    out: &mut dyn Write,
) -> Result<ExitStatus> {
    let path = output_path(cfg, kind);
    let file = create_output(&path)?;
    let status = match kind {
        CommandKind::Validate => {
            let rows = validation_checks(cfg)?;
            write_check_csv(file, &rows)?;
            summarize_checks(out, &rows)?;
            if rows.iter().all(|r| r.pass) {
                ExitStatus::Success
            } else {
                ExitStatus::CheckFailure
            }
        }
        CommandKind::Gradient | CommandKind::Convergence => {
            let rows = if kind == CommandKind::Gradient {
                gradient_rows(cfg)?
            } else {
                convergence_rows(cfg)?
            };
            write_gradient_csv(file, &rows)?;
            summarize_gradient(out, &rows)?;
            ExitStatus::Success
        }
        CommandKind::Compare => {
            let (rows, agree) = compare_rows(cfg)?;
            write_gradient_csv(file, &rows)?;
            summarize_gradient(out, &rows)?;
            if agree {
                ExitStatus::Success
            } else {
                writeln!(
                    out,
                    "some estimators disagree with the finite-difference oracle"
                )?;
                ExitStatus::CheckFailure
            }
        }
    };
    writeln!(out, "wrote {}", path.display())?;
    Ok(status)
}

/// Parses the configuration for `command`, runs it and reports errors on stderr.
pub fn run(command: &Command) -> ExitStatus {
    let kind = command.kind();
    let result = command
        .overrides()
        .resolve(kind)
        .and_then(|cfg| execute(kind, &cfg, &mut std::io::stdout().lock()));
    match result {
        Ok(status) => status,
        Err(err) => {
            eprintln!("halfgrad {}: {err}", kind.name());
            ExitStatus::for_error(&err)
        }
    }
}
