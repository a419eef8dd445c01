//! `min 1/2 |M w - t|^2` subject to `a_k . w = b_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DiffFunction, LinearReadout, Model};
use crate::constraints::{median_abs, ConstraintFamily, ConstraintPool};
use crate::error::{Error, Result};
use crate::linops::{DenseMatrix, Vector};
use crate::trainers::{Metrics, Problem};

#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    m: DenseMatrix,
    t: Vec<f64>,
    model: LinearReadout,
    pool: ConstraintPool,
    start: Vector,
}

impl QuadraticProblem {
    pub fn new(m: DenseMatrix, t: Vec<f64>, a: &DenseMatrix, b: &[f64], start: Vector) -> Result<Self> {
        let n = m.cols();
        Error::check_len(m.rows(), t.len())?;
        Error::check_len(n, a.cols())?;
        Error::check_len(a.rows(), b.len())?;
        Error::check_len(n, start.len())?;
        let rows: Vec<Vec<f64>> = (0..a.rows()).map(|k| a.row(k).iter().copied().chain([b[k]]).collect()).collect();
        let pool = ConstraintPool::equalities(DenseMatrix::from_rows(&rows)?, ConstraintFamily::Identity { n: 1 })?;
        Ok(QuadraticProblem { m, t, model: LinearReadout { dim: n }, pool, start })
    }

    /// Gaussian `M`, `t`, `A` and a start point; `b = A w*` for a random `w*`,
    /// so the constraints are feasible.
    pub fn random(n: usize, n_residuals: usize, n_constraints: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let m = DenseMatrix::from_row_major(n_residuals, n, gauss(n_residuals * n))?;
        let t = gauss(n_residuals);
        let a = DenseMatrix::from_row_major(n_constraints, n, gauss(n_constraints * n))?;
        let w_star = gauss(n);
        let start = Vector::new(gauss(n))?;
        let mut b = vec![0.0; n_constraints];
        a.matvec(&w_star, &mut b);
        Self::new(m, t, &a, &b, start)
    }

    /// `A w - b`.
    pub fn constraint_residuals(&self, w: &Vector) -> Result<Vec<f64>> {
        let x = self.pool.samples();
        Error::check_len(self.m.cols(), w.len())?;
        Ok((0..x.rows())
            .map(|k| {
                let row = x.row(k);
                let (a, b) = row.split_at(w.len());
                a.iter().zip(w.as_slice()).map(|(p, q)| p * q).sum::<f64>() - b[0]
            })
            .collect())
    }
}

impl Problem for QuadraticProblem {
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

    fn risk_residual(&self, _batch: &[usize]) -> Result<DiffFunction> {
        DiffFunction::affine_residual(self.m.clone(), &self.t)
    }

    fn evaluate(&self, w: &Vector) -> Result<Metrics> {
        let r = self.risk_residual(&[])?.value(w)?.norm();
        Ok(Metrics { risk: 0.5 * r * r, pred_error: r, median_violation: median_abs(&self.constraint_residuals(w)?)? })
    }
}
