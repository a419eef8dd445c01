//! Outer training loops for soft-penalty and hard-constraint methods.
//!
//! Soft methods take SGD or Adam steps on `R(w) + sum_j lambda_j sum_k C_jk(w)^2`.
//! Hard methods solve a KKT system per iteration (see [`crate::kkt`]).
//! All methods draw data batches and active constraint sets from two seeded
//! streams that do not depend on `w`, so runs with a shared seed see the
//! same batches.

mod adam;

pub use adam::{adam_update, AdamState, BETA1, BETA2, EPSILON};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffFunction, Linearization, Model};
use crate::constraints::{self, median_abs, ActiveSet, ConstraintPool};
use crate::error::{Error, Result};
use crate::kkt::{solve_step, KktState, StepOutcome};
use crate::krylov::SolverConfig;
use crate::linops::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SoftSgd,
    SoftAdam,
    HardSgd,
    HardGn,
    HardAdam,
}

impl Method {
    pub fn is_hard(self) -> bool {
        matches!(self, Method::HardSgd | Method::HardGn | Method::HardAdam)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SoftSgd => "soft_sgd",
            Method::SoftAdam => "soft_adam",
            Method::HardSgd => "hard_sgd",
            Method::HardGn => "hard_gn",
            Method::HardAdam => "hard_adam",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Step size for soft methods; hard methods use damping `1 / lr`.
    pub lr: f64,
    /// Penalty weight shared by all constraints unless `lambdas` is set.
    pub lambda: f64,
    /// Per-constraint penalty weights, indexed like the pool's constraints.
    pub lambdas: Option<Vec<f64>>,
    pub epochs: usize,
    /// Defaults to `ceil(n_train / data_batch)`.
    pub iters_per_epoch: Option<usize>,
    pub data_batch: usize,
    pub constraint_batch: usize,
    /// Keep only the most violated `mined_keep` samples of each constraint batch.
    pub mining: bool,
    pub mined_keep: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SoftAdam,
            lr: 1e-3,
            lambda: 1.0,
            lambdas: None,
            epochs: 1,
            iters_per_epoch: None,
            data_batch: 128,
            constraint_batch: 128,
            mining: false,
            mined_keep: 16,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if let Some(l) = &self.lambdas {
            if l.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return fail("lambdas must be non-negative and finite".into());
            }
        }
        if self.data_batch == 0 || self.constraint_batch == 0 || self.iters_per_epoch == Some(0) {
            return fail("batch sizes and iters_per_epoch must be at least 1".into());
        }
        if self.mining && (self.mined_keep == 0 || self.mined_keep > self.constraint_batch) {
            return fail(format!("mined_keep must lie in 1..={}", self.constraint_batch));
        }
        self.solver.validate()
    }

    pub fn iters_per_epoch_for(&self, n_train: usize) -> usize {
        self.iters_per_epoch.unwrap_or_else(|| n_train.div_ceil(self.data_batch).max(1))
    }

    /// `lambda_j` for each constraint index.
    pub fn soft_weights(&self, n_constraints: usize) -> Result<Vec<f64>> {
        match &self.lambdas {
            Some(l) => {
                if l.len() != n_constraints {
                    return Err(Error::Config(format!("lambdas has {} entries, the pool has {n_constraints} constraints", l.len())));
                }
                Ok(l.clone())
            }
            None => Ok(vec![self.lambda; n_constraints]),
        }
    }
}

/// End-state quality measures of a parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub risk: f64,
    pub pred_error: f64,
    pub median_violation: f64,
}

/// A learning problem whose risk is `1/2 |r(w)|^2` for a batch residual `r`.
pub trait Problem: Send + Sync {
    fn model(&self) -> &dyn Model;
    fn pool(&self) -> &ConstraintPool;
    fn n_train(&self) -> usize;
    fn initial_params(&self) -> Vector;

    /// Residual over the listed training samples. Batch means are folded
    /// into the scaling so that `1/2 |r|^2` is the batch risk.
    fn risk_residual(&self, batch: &[usize]) -> Result<DiffFunction>;

    fn evaluate(&self, w: &Vector) -> Result<Metrics>;

    fn n_params(&self) -> usize {
        self.model().n_params()
    }
}

/// One row per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub iter: usize,
    pub metrics: Metrics,
    /// Median `|C|` over the active pairs after the step minus before it.
    pub active_delta: f64,
    pub active_before: f64,
    pub active_after: f64,
    pub n_active: usize,
    pub active_fingerprint: u64,
    pub solver_iters: usize,
    /// `none` for soft methods.
    pub solver_status: String,
    pub step_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub initial: Metrics,
    pub rows: Vec<IterRow>,
    pub final_params: Vector,
    /// Parameters with the lowest prediction error seen at an epoch boundary.
    pub best_params: Vector,
    pub best_epoch: usize,
    pub best_pred_error: f64,
    /// Set when training stopped early on a numerical failure.
    pub failure: Option<String>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Metrics {
        self.rows.last().map_or(self.initial, |r| r.metrics)
    }
}

/// Optimizer state carried between iterations.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub w: Vector,
    pub adam: Option<AdamState>,
}

impl TrainerState {
    pub fn new(w: Vector, method: Method) -> Self {
        let adam = matches!(method, Method::SoftAdam | Method::HardAdam).then(|| AdamState::new(w.len()));
        TrainerState { w, adam }
    }
}

/// What a single step did.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub dw: Vector,
    pub multipliers: Vector,
    pub solver_iters: usize,
    pub solver_status: String,
    pub outcome: Option<StepOutcome>,
}

fn linearize_constraints(problem: &dyn Problem, w: &Vector, active: &ActiveSet) -> Result<Option<Linearization>> {
    if active.is_empty() {
        return Ok(None);
    }
    let f = problem.pool().constraint_function(problem.model(), active)?;
    Ok(Some(f.linearize(w)?))
}

fn penalty_weights(active: &ActiveSet, lambdas: &[f64]) -> Vec<f64> {
    active.pairs().map(|(_, j)| lambdas[j]).collect()
}

/// `R(w) + sum_j lambda_j sum_k C_jk(w)^2` on one data batch and active set.
pub fn soft_objective(problem: &dyn Problem, w: &Vector, batch: &[usize], active: &ActiveSet, lambdas: &[f64]) -> Result<f64> {
    let r = problem.risk_residual(batch)?.value(w)?;
    let risk = 0.5 * r.as_slice().iter().map(|x| x * x).sum::<f64>();
    let c = constraints::evaluate(problem.pool(), problem.model(), w, active)?;
    let penalty: f64 = c.as_slice().iter().zip(penalty_weights(active, lambdas)).map(|(c, l)| l * c * c).sum();
    Ok(risk + penalty)
}

/// Gradient of [`soft_objective`].
pub fn soft_gradient(problem: &dyn Problem, w: &Vector, batch: &[usize], active: &ActiveSet, lambdas: &[f64]) -> Result<Vector> {
    let r = problem.risk_residual(batch)?.linearize(w)?;
    let mut g = r.vjp(&Vector::new(r.value().to_vec())?)?;
    if let Some(c) = linearize_constraints(problem, w, active)? {
        let seed: Vec<f64> = c.value().iter().zip(penalty_weights(active, lambdas)).map(|(c, l)| 2.0 * l * c).collect();
        g.axpy(1.0, &c.vjp(&Vector::new(seed)?)?)?;
    }
    Ok(g)
}

fn risk_gradient(r: &Linearization) -> Result<Vector> {
    r.vjp(&Vector::new(r.value().to_vec())?)
}

/// One soft step; updates `state` in place.
pub fn step_soft(
    problem: &dyn Problem,
    state: &mut TrainerState,
    batch: &[usize],
    active: &ActiveSet,
    cfg: &TrainConfig,
) -> Result<StepInfo> {
    let lambdas = cfg.soft_weights(problem.pool().n_constraints())?;
    let g = soft_gradient(problem, &state.w, batch, active, &lambdas)?;
    let dw = match cfg.method {
        Method::SoftSgd => g.scale(-cfg.lr)?,
        Method::SoftAdam => {
            let moments = state.adam.get_or_insert_with(|| AdamState::new(g.len()));
            let (next, dw) = adam_update(moments, &g, cfg.lr)?;
            *moments = next;
            dw
        }
        m => return Err(Error::InvalidArgument(format!("{m} is not a soft method"))),
    };
    state.w = state.w.add(&dw)?;
    Ok(StepInfo { dw, multipliers: Vector::zeros(0), solver_iters: 0, solver_status: "none".into(), outcome: None })
}

/// One hard step: builds the method's KKT system, solves it and applies `dw`.
pub fn step_hard(
    problem: &dyn Problem,
    state: &mut TrainerState,
    batch: &[usize],
    active: &ActiveSet,
    cfg: &TrainConfig,
) -> Result<StepInfo> {
    let damping = 1.0 / cfg.lr;
    let c = linearize_constraints(problem, &state.w, active)?;
    let r = problem.risk_residual(batch)?.linearize(&state.w)?;
    let mut advanced = None;
    let kkt = match cfg.method {
        Method::HardSgd => KktState::sgd(risk_gradient(&r)?, c, damping)?,
        Method::HardGn => KktState::gauss_newton(r, c, damping)?,
        Method::HardAdam => {
            let g = risk_gradient(&r)?;
            let moments = state.adam.clone().unwrap_or_else(|| AdamState::new(g.len())).advance(&g)?;
            advanced = Some(moments.clone());
            KktState::adam(moments, c, damping)?
        }
        m => return Err(Error::InvalidArgument(format!("{m} is not a hard method"))),
    };
    let step = solve_step(&kkt, &cfg.solver)?;
    if advanced.is_some() {
        state.adam = advanced;
    }
    state.w = state.w.add(&step.dw)?;
    Ok(StepInfo {
        dw: step.dw,
        multipliers: step.multipliers,
        solver_iters: step.total_iters,
        solver_status: step.solve.status.as_str().to_string(),
        outcome: Some(step.outcome),
    })
}

/// The two independent random streams of a training run.
pub struct BatchStreams {
    data: ChaCha8Rng,
    constraints: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    data_batch: usize,
}

impl BatchStreams {
    pub fn new(seed: u64, n_train: usize, data_batch: usize) -> Self {
        BatchStreams {
            data: ChaCha8Rng::seed_from_u64(seed ^ 0x6461_7461),
            constraints: ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e73),
            order: (0..n_train).collect(),
            cursor: n_train,
            data_batch: data_batch.min(n_train.max(1)),
        }
    }

    /// Next data batch; reshuffles whenever the current pass is used up.
    pub fn next_data(&mut self) -> Vec<usize> {
        if self.cursor + self.data_batch > self.order.len() {
            self.order.shuffle(&mut self.data);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.data_batch].to_vec();
        self.cursor += self.data_batch;
        b
    }

    pub fn next_constraints(&mut self, pool: &ConstraintPool, batch: usize) -> Result<ActiveSet> {
        constraints::select_random_with(pool, batch.min(pool.len()), &mut self.constraints)
    }
}

fn active_median(problem: &dyn Problem, w: &Vector, active: &ActiveSet) -> Result<f64> {
    if active.is_empty() {
        return Ok(0.0);
    }
    let c = constraints::evaluate(problem.pool(), problem.model(), w, active)?;
    median_abs(c.as_slice())
}

/// Runs the configured method for `epochs * iters_per_epoch` iterations.
///
/// Configuration problems are reported before any work. A numerical failure
/// mid-run ends training early and is recorded in [`TrainReport::failure`].
pub fn train(cfg: &TrainConfig, problem: &dyn Problem) -> Result<TrainReport> {
    train_from(cfg, problem, problem.initial_params())
}

/// [`train`] starting from `w0` instead of the problem's initial parameters.
pub fn train_from(cfg: &TrainConfig, problem: &dyn Problem, w0: Vector) -> Result<TrainReport> {
    cfg.validate()?;
    let pool = problem.pool();
    cfg.soft_weights(pool.n_constraints())?;
    Error::check_len(problem.n_params(), w0.len()).map_err(|e| Error::Config(e.to_string()))?;
    let n_train = problem.n_train();
    if n_train == 0 {
        return Err(Error::Config("problem has no training samples".into()));
    }
    let iters_per_epoch = cfg.iters_per_epoch_for(n_train);

    let mut streams = BatchStreams::new(cfg.seed, n_train, cfg.data_batch);
    let mut state = TrainerState::new(w0, cfg.method);
    let initial = problem.evaluate(&state.w)?;
    let mut report = TrainReport {
        method: cfg.method,
        initial,
        rows: Vec::new(),
        final_params: state.w.clone(),
        best_params: state.w.clone(),
        best_epoch: 0,
        best_pred_error: initial.pred_error,
        failure: None,
    };

    let mut iter = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        for _ in 0..iters_per_epoch {
            iter += 1;
            let last_good = state.clone();
            match run_iteration(problem, &mut state, &mut streams, cfg, iter) {
                Ok(row) => report.rows.push(row),
                Err(e) => {
                    state = last_good;
                    log::error!("iteration {iter} failed: {e}");
                    report.failure = Some(e.to_string());
                    break 'epochs;
                }
            }
        }
        let err = report.rows.last().map_or(initial.pred_error, |r| r.metrics.pred_error);
        if err < report.best_pred_error {
            report.best_pred_error = err;
            report.best_epoch = epoch;
            report.best_params = state.w.clone();
        }
    }
    report.final_params = state.w;
    Ok(report)
}

fn run_iteration(
    problem: &dyn Problem,
    state: &mut TrainerState,
    streams: &mut BatchStreams,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<IterRow> {
    let pool = problem.pool();
    let batch = streams.next_data();
    let drawn = streams.next_constraints(pool, cfg.constraint_batch)?;
    let active = if cfg.mining {
        let keep = cfg.mined_keep.min(drawn.samples().len());
        constraints::select_mined_from(pool, problem.model(), &state.w, drawn.samples(), keep)?
    } else {
        drawn
    };
    let active = constraints::filter_inequalities(pool, problem.model(), &state.w, &active)?;
    let before = active_median(problem, &state.w, &active)?;
    let info = if cfg.method.is_hard() {
        step_hard(problem, state, &batch, &active, cfg)?
    } else {
        step_soft(problem, state, &batch, &active, cfg)?
    };
    let after = active_median(problem, &state.w, &active)?;
    let metrics = problem.evaluate(&state.w)?;
    let finite = [metrics.risk, metrics.pred_error, metrics.median_violation, after].iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("training metrics"));
    }
    Ok(IterRow {
        iter,
        metrics,
        active_delta: after - before,
        active_before: before,
        active_after: after,
        n_active: active.len(),
        active_fingerprint: active.fingerprint(),
        solver_iters: info.solver_iters,
        solver_status: info.solver_status,
        step_norm: info.dw.norm(),
    })
}
