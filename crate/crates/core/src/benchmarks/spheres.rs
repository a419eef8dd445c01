//! Closest point to an anchor `x0` on the intersection of hyperspheres
//! `|w - c_i| = radius` whose centers are tiny Gaussian perturbations of the
//! origin, so the constraints are nearly identical but mutually incompatible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffFunction, Graph, Model, ShiftModel};
use crate::constraints::{median_abs, ConstraintFamily, ConstraintPool};
use crate::error::{Error, Result};
use crate::linops::{DenseMatrix, Vector};
use crate::trainers::{self, Method, Metrics, Problem, TrainConfig, TrainReport};

pub const DEFAULT_RADIUS: f64 = 10.0;
pub const DEFAULT_CENTER_STD: f64 = 0.1;
pub const DEFAULT_CONSTRAINTS: usize = 200;
pub const DEFAULT_SOFT_LAMBDA: f64 = 100.0;
pub const ANCHOR_NORM: f64 = 20.0;

/// Learning rates tried when picking the soft baseline's step size.
pub const SOFT_LR_GRID: [f64; 5] = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3];

/// Everything needed to regenerate a problem; raw vectors are never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub dim: usize,
    pub n_constraints: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SphereProblem {
    x0: Vector,
    start: Vector,
    radius: f64,
    model: ShiftModel,
    pool: ConstraintPool,
}

/// Centers drawn i.i.d. from `N(0, 0.01 I)`; `x0` is a random direction
/// scaled to norm 20, which lies outside every sphere.
pub fn gen_spheres(dim: usize, n_constraints: usize, seed: u64) -> Result<SphereProblem> {
    if dim < 2 || n_constraints == 0 {
        return Err(Error::InvalidArgument(format!("need dim >= 2 and at least one constraint, got {dim} and {n_constraints}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n_constraints * dim);
    for _ in 0..n_constraints * dim {
        let z: f64 = StandardNormal.sample(&mut rng);
        centers.push(DEFAULT_CENTER_STD * z);
    }
    let mut anchor_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut anchor_rng)).collect();
    let x0 = Vector::new(dir)?;
    let x0 = x0.scale(ANCHOR_NORM / x0.norm())?;
    SphereProblem::with_centers(x0, DenseMatrix::from_row_major(n_constraints, dim, centers)?, DEFAULT_RADIUS)
}

impl SphereProblem {
    /// Starts at the anchor; use [`SphereProblem::with_start`] to change that.
    pub fn with_centers(x0: Vector, centers: DenseMatrix, radius: f64) -> Result<Self> {
        Error::check_len(x0.len(), centers.cols())?;
        let pool = ConstraintPool::equalities(centers, ConstraintFamily::SphereRadius { radius })?;
        Ok(SphereProblem { start: x0.clone(), x0, radius, model: ShiftModel { dim: pool.samples().cols() }, pool })
    }

    pub fn with_start(mut self, start: Vector) -> Result<Self> {
        Error::check_len(self.x0.len(), start.len())?;
        self.start = start;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.pool.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn anchor(&self) -> &Vector {
        &self.x0
    }

    pub fn center(&self, i: usize) -> &[f64] {
        self.pool.sample(i)
    }

    /// `|w - c_i| - radius` for every center.
    pub fn residuals(&self, w: &Vector) -> Result<Vec<f64>> {
        Error::check_len(self.dim(), w.len())?;
        let w = w.as_slice();
        Ok((0..self.n_constraints())
            .map(|i| {
                let d: f64 = self.center(i).iter().zip(w).map(|(c, x)| (x - c) * (x - c)).sum();
                d.sqrt() - self.radius
            })
            .collect())
    }
}

impl Problem for SphereProblem {
    fn model(&self) -> &dyn Model {
        &self.model
    }

    fn pool(&self) -> &ConstraintPool {
        &self.pool
    }

    fn n_train(&self) -> usize {
        1
    }

    fn initial_params(&self) -> Vector {
        self.start.clone()
    }

    /// `r(w) = w - x0`.
    fn risk_residual(&self, _batch: &[usize]) -> Result<DiffFunction> {
        let d = self.dim();
        let mut g = Graph::new(d);
        let p = g.param(0, d, 1)?;
        let shift = DenseMatrix::from_row_major(d, 1, self.x0.as_slice().iter().map(|x| -x).collect())?;
        let r = g.add_const(p, shift)?;
        DiffFunction::new(g, r)
    }

    /// Risk, distance to the anchor, and median `|C|` over all spheres.
    fn evaluate(&self, w: &Vector) -> Result<Metrics> {
        let dist = w.sub(&self.x0)?.norm();
        Ok(Metrics { risk: 0.5 * dist * dist, pred_error: dist, median_violation: median_abs(&self.residuals(w)?)? })
    }
}

/// Training configuration shared by both arms of a comparison.
pub fn sphere_config(method: Method, lr: f64, iters: usize, n_active: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        lr,
        lambda: DEFAULT_SOFT_LAMBDA,
        epochs: iters,
        iters_per_epoch: Some(1),
        data_batch: 1,
        constraint_batch: n_active,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct SphereComparison {
    pub hard: TrainReport,
    pub soft: TrainReport,
    pub hard_config: TrainConfig,
    pub soft_config: TrainConfig,
}

/// Hard projected-gradient steps against plain SGD on the penalized objective,
/// with identical active-set streams.
pub fn run_sphere_comparison(
    problem: &SphereProblem,
    iters: usize,
    n_active: usize,
    seed: u64,
    hard_lr: f64,
    soft_lr: f64,
) -> Result<SphereComparison> {
    let hard_config = sphere_config(Method::HardSgd, hard_lr, iters, n_active, seed);
    let soft_config = sphere_config(Method::SoftSgd, soft_lr, iters, n_active, seed);
    let hard = trainers::train(&hard_config, problem)?;
    let soft = trainers::train(&soft_config, problem)?;
    Ok(SphereComparison { hard, soft, hard_config, soft_config })
}

/// Picks the grid learning rate with the lowest final median violation on a
/// problem generated from `tuning_seed`. Diverging candidates are skipped.
pub fn tune_soft_lr(dim: usize, n_constraints: usize, iters: usize, n_active: usize, tuning_seed: u64, grid: &[f64]) -> Result<f64> {
    let problem = gen_spheres(dim, n_constraints, tuning_seed)?;
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let report = trainers::train(&sphere_config(Method::SoftSgd, lr, iters, n_active, tuning_seed), &problem)?;
        if report.failure.is_some() {
            continue;
        }
        let score = report.final_metrics().median_violation;
        log::info!("soft lr {lr:e}: final median violation {score:.4e}");
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((lr, score));
        }
    }
    best.map(|(lr, _)| lr).ok_or_else(|| Error::InvalidArgument("every soft learning rate diverged".into()))
}
