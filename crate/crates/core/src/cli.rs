//! Config-driven experiment runner behind the `kktrain` binary.
//!
//! A run reads a TOML [`ExperimentConfig`], validates all of it before
//! touching the filesystem, and writes into its output directory:
//!
//! - `metrics.csv`, one row for the starting point (`iter = 0`) and one per
//!   iteration (paired sphere runs write `hard/` and `soft/` subdirectories);
//! - `resolved_config.toml`, the config with every default and override filled in;
//! - `summary.json` with end-state metrics;
//! - `params.ckpt`, the final (or last good) parameters.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when training hit
//! a numerical failure, 1 for anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint};
use crate::benchmarks::pose::{self, PoseConfig, ToyPoseProblem};
use crate::benchmarks::solve_check::{run_solve_check, SolveCheckRow};
use crate::benchmarks::spheres::{self, gen_spheres, SOFT_LR_GRID};
use crate::error::Error;
use crate::trainers::{self, Metrics, Problem, TrainConfig, TrainReport};

/// Output root used when neither the command line nor the config names a directory.
pub const OUT_ENV: &str = "KKTRAIN_OUT";

pub const METRICS_HEADER: &str = "iter,risk,pred_error,median_violation,active_delta,solver_iters,solver_status,step_norm";

/// Sphere dimension selected by `full_scale`.
pub const FULL_SCALE_DIM: usize = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Run(Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Spheres,
    ToyPose,
    SolveCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpheresSection {
    pub dim: usize,
    pub n_constraints: usize,
    /// Run Hard-SGD and Soft-SGD side by side with the settings below instead
    /// of a single run driven by `[train]`.
    pub paired: bool,
    pub iters: usize,
    pub n_active: usize,
    pub hard_lr: f64,
    /// Tuned over a fixed grid on `tuning_seed` when absent.
    pub soft_lr: Option<f64>,
    /// Defaults to `seed + 1000`.
    pub tuning_seed: Option<u64>,
}

impl Default for SpheresSection {
    fn default() -> Self {
        SpheresSection {
            dim: 10_000,
            n_constraints: spheres::DEFAULT_CONSTRAINTS,
            paired: true,
            iters: 500,
            n_active: 20,
            hard_lr: 1.0,
            soft_lr: None,
            tuning_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseSection {
    /// Epochs of unconstrained Adam fitted before `[train]` runs; 0 starts
    /// from the initializer (or `init_checkpoint`).
    pub pretrain_epochs: usize,
    pub init_checkpoint: Option<PathBuf>,
    /// The problem seed is always the experiment seed.
    pub problem: PoseConfig,
}

impl Default for PoseSection {
    fn default() -> Self {
        PoseSection { pretrain_epochs: pose::BASELINE_EPOCHS, init_checkpoint: None, problem: PoseConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveCheckSection {
    pub count: usize,
    pub max_n: usize,
}

impl Default for SolveCheckSection {
    fn default() -> Self {
        SolveCheckSection { count: 200, max_n: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub full_scale: bool,
    /// The training seed is always the experiment seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub spheres: SpheresSection,
    #[serde(default)]
    pub pose: PoseSection,
    #[serde(default)]
    pub solve_check: SolveCheckSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub full_scale: bool,
}

impl ExperimentConfig {
    /// Parses and validates. Seeds nested in `[train]` or `[pose.problem]`
    /// must match the top-level seed.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let nested = |path: &[&str]| -> Option<toml::Value> {
            let mut t = &raw;
            for key in &path[..path.len() - 1] {
                t = t.get(*key)?.as_table()?;
            }
            t.get(path[path.len() - 1]).cloned()
        };
        for path in [&["train", "seed"][..], &["pose", "problem", "seed"][..]] {
            if let Some(v) = nested(path) {
                if v.as_integer() != Some(cfg.seed as i64) {
                    return Err(CliError::Config(format!("{} = {v} differs from the top-level seed {}", path.join("."), cfg.seed)));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.pose.problem.seed = self.seed;
        if self.full_scale {
            self.spheres.dim = FULL_SCALE_DIM;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed {} does not fit a TOML integer", self.seed));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match self.kind {
            ExperimentKind::Spheres => {
                let s = &self.spheres;
                if s.dim < 2 || s.n_constraints == 0 {
                    return fail("spheres need dim >= 2 and n_constraints >= 1".into());
                }
                if s.n_active == 0 || s.n_active > s.n_constraints {
                    return fail(format!("spheres.n_active must lie in 1..={}", s.n_constraints));
                }
                let lrs = [Some(s.hard_lr), s.soft_lr];
                if lrs.iter().flatten().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
                    return fail("sphere learning rates must be positive and finite".into());
                }
            }
            ExperimentKind::ToyPose => {
                let p = &self.pose.problem;
                if p.n_samples < 5 || p.pool_size == 0 || p.feature_dim == 0 {
                    return fail("pose.problem needs n_samples >= 5, pool_size >= 1, feature_dim >= 1".into());
                }
                if !(p.input_noise >= 0.0 && p.label_noise >= 0.0) {
                    return fail("pose noise levels must be non-negative".into());
                }
            }
            ExperimentKind::SolveCheck => {
                if self.solve_check.max_n < 2 {
                    return fail("solve_check.max_n must be at least 2".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }
}

/// Loads the config named in `opts` and applies the command-line overrides.
pub fn load_config(opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    let text =
        std::fs::read_to_string(&opts.config).map_err(|e| CliError::Config(format!("cannot read {}: {e}", opts.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    cfg.full_scale |= opts.full_scale;
    cfg.validate()?;
    let mut cfg = cfg.resolved();
    if cfg.out_dir.is_none() {
        let stem = opts.config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        cfg.out_dir = Some(root.join(stem));
    }
    Ok(cfg)
}

/// Summary of one training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub method: String,
    pub iterations: usize,
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
    pub best_epoch: usize,
    pub best_pred_error: f64,
    pub total_solver_iters: usize,
    pub degradation_fraction: f64,
    pub failure: Option<String>,
}

impl RunRecord {
    fn new(name: &str, report: &TrainReport) -> Self {
        RunRecord {
            name: name.into(),
            method: report.method.to_string(),
            iterations: report.rows.len(),
            initial: report.initial,
            final_metrics: report.final_metrics(),
            best_epoch: report.best_epoch,
            best_pred_error: report.best_pred_error,
            total_solver_iters: report.rows.iter().map(|r| r.solver_iters).sum(),
            degradation_fraction: degradation_fraction(report.rows.iter().map(|r| r.active_delta)),
            failure: report.failure.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub runs: Vec<RunRecord>,
    /// Learning rate of the soft sphere arm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_lr_tuned: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_check: Option<SolveCheckSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveCheckSummary {
    pub systems: usize,
    pub max_rel_error: f64,
    pub max_rel_error_cond_le_1e6: f64,
}

/// Renders the per-iteration trace, starting with the initial point.
pub fn metrics_csv(report: &TrainReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let m = report.initial;
    let _ = writeln!(out, "0,{},{},{},0,0,none,0", m.risk, m.pred_error, m.median_violation);
    for r in &report.rows {
        let m = r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iter, m.risk, m.pred_error, m.median_violation, r.active_delta, r.solver_iters, r.solver_status, r.step_norm
        );
    }
    out
}

fn solve_check_csv(rows: &[SolveCheckRow]) -> String {
    let mut out = String::from("system,n,nullity,cond,iters,status,rel_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.system, r.n, r.nullity, r.cond, r.iters, r.status, r.rel_error);
    }
    out
}

fn write_run(dir: &Path, name: &str, report: &TrainReport, layout_hash: u64) -> Result<RunRecord, CliError> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(report)).map_err(Error::from)?;
    write_checkpoint(&dir.join("params.ckpt"), &report.final_params, layout_hash)?;
    Ok(RunRecord::new(name, report))
}

/// Executes a fully resolved config and writes its outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone().ok_or_else(|| CliError::Config("no output directory".into()))?;
    let mut resolved = cfg.clone();
    let mut summary =
        Summary { kind: cfg.kind, seed: cfg.seed, runs: Vec::new(), soft_lr: None, soft_lr_tuned: None, baseline: None, solve_check: None };

    match cfg.kind {
        ExperimentKind::Spheres => {
            let s = &cfg.spheres;
            let problem = gen_spheres(s.dim, s.n_constraints, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
            let hash = problem.model().layout_hash();
            if s.paired {
                let (soft_lr, tuned) = match s.soft_lr {
                    Some(lr) => (lr, false),
                    None => {
                        let tuning_seed = s.tuning_seed.unwrap_or(cfg.seed.wrapping_add(1000));
                        let lr = spheres::tune_soft_lr(s.dim, s.n_constraints, s.iters, s.n_active, tuning_seed, &SOFT_LR_GRID)?;
                        resolved.spheres.tuning_seed = Some(tuning_seed);
                        (lr, true)
                    }
                };
                resolved.spheres.soft_lr = Some(soft_lr);
                summary.soft_lr = Some(soft_lr);
                summary.soft_lr_tuned = Some(tuned);
                let cmp = spheres::run_sphere_comparison(&problem, s.iters, s.n_active, cfg.seed, s.hard_lr, soft_lr)?;
                summary.runs.push(write_run(&out.join("hard"), "hard", &cmp.hard, hash)?);
                summary.runs.push(write_run(&out.join("soft"), "soft", &cmp.soft, hash)?);
            } else {
                let report = trainers::train(&cfg.train, &problem)?;
                summary.runs.push(write_run(&out, cfg.train.method.as_str(), &report, hash)?);
            }
        }
        ExperimentKind::ToyPose => {
            let problem = ToyPoseProblem::generate(&cfg.pose.problem).map_err(|e| CliError::Config(e.to_string()))?;
            let hash = problem.model().layout_hash();
            let start = match &cfg.pose.init_checkpoint {
                Some(path) => read_checkpoint(path, Some(hash)).map_err(|e| CliError::Config(e.to_string()))?.0,
                None if cfg.pose.pretrain_epochs > 0 => {
                    let base_cfg = TrainConfig { epochs: cfg.pose.pretrain_epochs, ..pose::baseline_config(cfg.seed) };
                    let base = trainers::train(&base_cfg, &problem)?;
                    if let Some(f) = &base.failure {
                        return Err(CliError::Numerical(format!("baseline training: {f}")));
                    }
                    std::fs::create_dir_all(&out).map_err(Error::from)?;
                    write_checkpoint(&out.join("baseline.ckpt"), &base.best_params, hash)?;
                    summary.baseline = Some(problem.evaluate(&base.best_params)?);
                    base.best_params
                }
                None => problem.initial_params(),
            };
            let report = trainers::train_from(&cfg.train, &problem, start)?;
            summary.runs.push(write_run(&out, cfg.train.method.as_str(), &report, hash)?);
        }
        ExperimentKind::SolveCheck => {
            let sc = &cfg.solve_check;
            let rows = run_solve_check(sc.count, sc.max_n, cfg.seed, &cfg.train.solver)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            std::fs::write(out.join("solve_check.csv"), solve_check_csv(&rows)).map_err(Error::from)?;
            let max = |f: &dyn Fn(&&SolveCheckRow) -> bool| rows.iter().filter(f).map(|r| r.rel_error).fold(0.0, f64::max);
            summary.solve_check = Some(SolveCheckSummary {
                systems: rows.len(),
                max_rel_error: max(&|_| true),
                max_rel_error_cond_le_1e6: max(&|r| r.cond <= 1e6),
            });
        }
    }

    std::fs::create_dir_all(&out).map_err(Error::from)?;
    std::fs::write(out.join("resolved_config.toml"), resolved.to_toml()).map_err(Error::from)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes to JSON");
    std::fs::write(out.join("summary.json"), json + "\n").map_err(Error::from)?;
    if let Some(failed) = summary.runs.iter().find(|r| r.failure.is_some()) {
        return Err(CliError::Numerical(format!("{}: {}", failed.name, failed.failure.as_deref().unwrap_or_default())));
    }
    Ok(summary)
}

/// `kktrain run`: load, resolve and execute.
pub fn run(opts: &RunOptions) -> Result<Summary, CliError> {
    run_experiment(&load_config(opts)?)
}

/// Columns of a `metrics.csv` that [`compare`] needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub iters: Vec<usize>,
    pub median_violation: Vec<f64>,
    pub active_delta: Vec<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Trace, CliError> {
    let bad = |line: usize, what: &str| CliError::Config(format!("metrics line {line}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut trace = Trace { iters: Vec::new(), median_violation: Vec::new(), active_delta: Vec::new() };
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad(i + 2, "expected 8 columns"));
        }
        trace.iters.push(cells[0].parse().map_err(|_| bad(i + 2, "bad iter"))?);
        trace.median_violation.push(cells[3].parse().map_err(|_| bad(i + 2, "bad median_violation"))?);
        trace.active_delta.push(cells[4].parse().map_err(|_| bad(i + 2, "bad active_delta"))?);
    }
    Ok(trace)
}

/// Population standard deviation of consecutive differences of `values`.
pub fn delta_std(values: &[f64]) -> f64 {
    let d: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.len() as f64).sqrt()
}

/// Fraction of steps whose active-set median violation went up.
pub fn degradation_fraction(deltas: impl IntoIterator<Item = f64>) -> f64 {
    let (mut n, mut pos) = (0usize, 0usize);
    for d in deltas {
        n += 1;
        pos += usize::from(d > 0.0);
    }
    if n == 0 {
        0.0
    } else {
        pos as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: usize,
    pub from_iter: usize,
    pub final_median_violation_a: f64,
    pub final_median_violation_b: f64,
    /// `b - a`.
    pub final_median_violation_diff: f64,
    pub delta_std_a: f64,
    pub delta_std_b: f64,
    /// `delta_std_a / delta_std_b`, 1 when both are zero.
    pub delta_std_ratio: f64,
    pub degradation_fraction_a: f64,
    pub degradation_fraction_b: f64,
    /// `a`, `b` or `tie`: whose median violation moves more smoothly.
    pub smoother: String,
}

/// Paired statistics of two traces with the same iteration numbers.
/// Smoothness only looks at rows with `iter >= from_iter`.
pub fn compare(a: &Trace, b: &Trace, from_iter: usize) -> Result<Comparison, CliError> {
    if a.iters != b.iters {
        return Err(CliError::Config(format!(
            "traces differ in length or iteration numbers ({} vs {} rows)",
            a.iters.len(),
            b.iters.len()
        )));
    }
    let (Some(&fa), Some(&fb)) = (a.median_violation.last(), b.median_violation.last()) else {
        return Err(CliError::Config("empty trace".into()));
    };
    let tail =
        |t: &Trace| -> Vec<f64> { t.iters.iter().zip(&t.median_violation).filter(|(i, _)| **i >= from_iter).map(|(_, v)| *v).collect() };
    let (sa, sb) = (delta_std(&tail(a)), delta_std(&tail(b)));
    let ratio = if sa == 0.0 && sb == 0.0 { 1.0 } else { sa / sb };
    // Row 0 is the starting point and carries no step.
    let steps = |t: &Trace| degradation_fraction(t.iters.iter().zip(&t.active_delta).filter(|(i, _)| **i > 0).map(|(_, d)| *d));
    let smoother = match sa.partial_cmp(&sb) {
        Some(std::cmp::Ordering::Less) => "a",
        Some(std::cmp::Ordering::Greater) => "b",
        _ => "tie",
    };
    Ok(Comparison {
        rows: a.iters.len(),
        from_iter,
        final_median_violation_a: fa,
        final_median_violation_b: fb,
        final_median_violation_diff: fb - fa,
        delta_std_a: sa,
        delta_std_b: sb,
        delta_std_ratio: ratio,
        degradation_fraction_a: steps(a),
        degradation_fraction_b: steps(b),
        smoother: smoother.into(),
    })
}

/// `kktrain compare`: reads two metrics files.
pub fn compare_files(a: &Path, b: &Path, from_iter: usize) -> Result<Comparison, CliError> {
    let read = |p: &Path| -> Result<Trace, CliError> {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        parse_metrics_csv(&text)
    };
    compare(&read(a)?, &read(b)?, from_iter)
}
