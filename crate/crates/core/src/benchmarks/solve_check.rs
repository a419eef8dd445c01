//! Random symmetric systems `Q diag(lambda) Q^T` with a closed-form
//! pseudoinverse solution. `Q` is a product of Householder reflections, so
//! the operator stays matrix-free.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::krylov::{minres_qlp, SolverConfig};
use crate::linops::{LinearOperator, Vector};

#[derive(Clone, Debug)]
pub struct SpectralSystem {
    reflectors: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

impl SpectralSystem {
    /// `eigenvalues` may contain exact zeros; `n_reflectors` unit vectors build `Q`.
    pub fn new(eigenvalues: Vec<f64>, n_reflectors: usize, seed: u64) -> Result<Self> {
        let n = eigenvalues.len();
        if n == 0 {
            return Err(Error::Empty("spectral system"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reflectors = (0..n_reflectors)
            .map(|_| {
                let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                u.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(SpectralSystem { reflectors, eigenvalues })
    }

    /// Indefinite spectrum: a bulk with magnitudes in `[0.1, 1]` plus up to
    /// four small outliers spaced geometrically from `1/cond` towards the bulk,
    /// random signs, `nullity` exact zeros, and a dense random `Q` built from
    /// `n` reflections.
    pub fn random(n: usize, cond: f64, nullity: usize, seed: u64) -> Result<Self> {
        if nullity >= n || cond < 1.0 {
            return Err(Error::InvalidArgument(format!("need nullity < n and cond >= 1, got {nullity}, {n}, {cond}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let rank = n - nullity;
        let floor = 1.0 / cond;
        let bulk_low = floor.max(0.1);
        let outliers = if rank > 1 && floor < 0.1 { rng.gen_range(1..=4.min(rank - 1)) } else { 0 };
        let step = (bulk_low / floor).powf(1.0 / outliers.max(1) as f64);
        let mut mags = Vec::with_capacity(rank);
        mags.push(1.0);
        mags.extend((0..outliers).map(|j| floor * step.powi(j as i32)));
        while mags.len() < rank {
            mags.push(if mags.len() == 1 { bulk_low } else { rng.gen_range(bulk_low..=1.0) });
        }
        let mut eig: Vec<f64> = mags.into_iter().map(|m| if rng.gen_bool(0.5) { m } else { -m }).collect();
        eig.extend(std::iter::repeat_n(0.0, nullity));
        Self::new(eig, n, seed)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn reflect_all(&self, x: &mut [f64], reverse: bool) {
        let mut apply = |u: &[f64]| {
            let d: f64 = u.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi -= 2.0 * d * ui;
            }
        };
        if reverse {
            self.reflectors.iter().rev().for_each(|u| apply(u));
        } else {
            self.reflectors.iter().for_each(|u| apply(u));
        }
    }

    /// `Q diag(f(lambda)) Q^T x`.
    fn spectral_apply(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut y = x.to_vec();
        self.reflect_all(&mut y, true);
        for (yi, &l) in y.iter_mut().zip(&self.eigenvalues) {
            *yi *= f(l);
        }
        self.reflect_all(&mut y, false);
        y
    }

    /// Minimum-length least-squares solution of `A x = b`.
    pub fn pinv_solve(&self, b: &[f64]) -> Vec<f64> {
        self.spectral_apply(b, |l| if l == 0.0 { 0.0 } else { 1.0 / l })
    }

    pub fn cond(&self) -> f64 {
        let nz: Vec<f64> = self.eigenvalues.iter().filter(|l| **l != 0.0).map(|l| l.abs()).collect();
        nz.iter().cloned().fold(0.0, f64::max) / nz.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

impl LinearOperator for SpectralSystem {
    fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.spectral_apply(x, |l| l));
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveCheckRow {
    pub system: usize,
    pub n: usize,
    pub nullity: usize,
    pub cond: f64,
    pub iters: usize,
    pub status: String,
    pub rel_error: f64,
}

/// Solves `count` random systems and compares each against its pseudoinverse solution.
pub fn run_solve_check(count: usize, max_n: usize, seed: u64, cfg: &SolverConfig) -> Result<Vec<SolveCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count);
    for system in 0..count {
        let n = rng.gen_range(2..=max_n.max(2));
        let nullity = if rng.gen_bool(0.3) { rng.gen_range(1..n) } else { 0 };
        let cond = 10f64.powf(rng.gen_range(0.0..10.0));
        let sys = SpectralSystem::random(n, cond, nullity, rng.gen())?;
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let exact = sys.pinv_solve(&b);
        let sol = minres_qlp(&sys, &Vector::new(b)?, cfg)?;
        let err = sol.x.as_slice().iter().zip(&exact).map(|(a, e)| (a - e) * (a - e)).sum::<f64>().sqrt();
        let scale = exact.iter().map(|e| e * e).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        rows.push(SolveCheckRow {
            system,
            n,
            nullity,
            cond: sys.cond(),
            iters: sol.iters,
            status: sol.status.to_string(),
            rel_error: err / scale,
        });
    }
    Ok(rows)
}
