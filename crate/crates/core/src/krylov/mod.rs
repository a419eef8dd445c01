//! Krylov solvers for symmetric, possibly indefinite or singular systems.
//!
//! Both solvers run the same three-term Lanczos recurrence and only need
//! `B v` products. [`minres`] is the classic Paige–Saunders method;
//! [`minres_qlp`] switches from MINRES updates to QLP updates once the
//! estimated condition number crosses [`SolverConfig::transfer_cond`], which
//! lets it return the minimum-length solution of singular systems.

mod minres;
mod qlp;

pub use minres::minres;
pub use qlp::minres_qlp;

use serde::{Deserialize, Serialize};

use crate::linops::{dot, norm2, LinearOperator, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Relative residual target: stop once `|b - Bx| <= rtol |b|`, or once
    /// `|B r| <= rtol |B| |r|` for incompatible systems.
    pub rtol: f64,
    /// Iteration cap. `None` means `4 * dim`, capped at 2000.
    pub max_iters: Option<usize>,
    /// Lanczos `beta` below `breakdown_tol * |T_k|` means the Krylov space is exhausted.
    pub breakdown_tol: f64,
    /// Estimated condition number above which MINRES-QLP switches to QLP updates.
    pub transfer_cond: f64,
    /// Diagonal entries of the QLP factor below `rank_tol * |B|` are treated
    /// as zero, which is what makes the returned solution minimum-length.
    pub rank_tol: f64,
    /// Orthogonalize every Lanczos vector against all earlier ones. Costs
    /// `O(n k)` memory and time but keeps the basis orthogonal to working
    /// precision, which small ill-conditioned or incompatible systems need.
    pub reorthogonalize: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { rtol: 1e-8, max_iters: None, breakdown_tol: 1e-14, transfer_cond: 1e7, rank_tol: 1e-12, reorthogonalize: false }
    }
}

impl SolverConfig {
    pub fn max_iters_for(&self, dim: usize) -> usize {
        self.max_iters.unwrap_or_else(|| (4 * dim).min(2000)).max(1)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.rtol > 0.0
            && self.rtol.is_finite()
            && self.max_iters != Some(0)
            && self.breakdown_tol > 0.0
            && self.transfer_cond >= 1.0
            && self.rank_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid solver configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    SingularMinLength,
    Breakdown,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::SingularMinLength => "singular_min_length",
            SolveStatus::Breakdown => "breakdown",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct KrylovSolution {
    pub x: Vector,
    /// `|b - Bx|`, recomputed with one extra product after the solve.
    pub residual_norm: f64,
    /// The solver's own running estimate of `|b - Bx|`.
    pub residual_estimate: f64,
    pub iters: usize,
    pub status: SolveStatus,
    /// Residual estimate after each iteration.
    pub history: Vec<f64>,
    /// Iterations that used QLP updates (always 0 for plain MINRES).
    pub qlp_iters: usize,
    pub op_norm_estimate: f64,
    pub cond_estimate: f64,
}

/// Stable Givens reflection: returns `(c, s, r)` with `[c s; s -c] [a; b] = [r; 0]`.
pub(crate) fn sym_ortho(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        let c = if a == 0.0 { 1.0 } else { a.signum() };
        (c, 0.0, a.abs())
    } else if a == 0.0 {
        (0.0, b.signum(), b.abs())
    } else if b.abs() > a.abs() {
        let t = a / b;
        let s = b.signum() / (1.0 + t * t).sqrt();
        let c = s * t;
        (c, s, b / s)
    } else {
        let t = b / a;
        let c = a.signum() / (1.0 + t * t).sqrt();
        let s = c * t;
        (c, s, a / c)
    }
}

/// One step of the symmetric Lanczos process, shared by both solvers.
///
/// Holds the two most recent unnormalized Lanczos vectors. `step` produces
/// `v_k`, `alpha_k` and `beta_{k+1}`.
pub(crate) struct Lanczos<'a> {
    op: &'a dyn LinearOperator,
    r1: Vec<f64>,
    r2: Vec<f64>,
    r3: Vec<f64>,
    pub beta: f64,
    pub beta_next: f64,
    iter: usize,
    /// Normalized Lanczos vectors so far, kept only when reorthogonalizing.
    basis: Option<Vec<Vec<f64>>>,
}

pub(crate) struct LanczosStep {
    pub alpha: f64,
    pub beta_prev: f64,
    pub beta_next: f64,
}

impl<'a> Lanczos<'a> {
    pub fn new(op: &'a dyn LinearOperator, b: &[f64], beta1: f64, reorthogonalize: bool) -> Self {
        Lanczos {
            op,
            r1: vec![0.0; b.len()],
            r2: b.to_vec(),
            r3: b.to_vec(),
            beta: 0.0,
            beta_next: beta1,
            iter: 0,
            basis: reorthogonalize.then(Vec::new),
        }
    }

    /// Writes the normalized Lanczos vector into `v`.
    pub fn step(&mut self, v: &mut [f64]) -> LanczosStep {
        self.iter += 1;
        let prev_norm = self.beta;
        self.beta = self.beta_next;
        // beta_1 = |b| normalizes v_1 but is not an entry of T_k
        let beta_prev = if self.iter > 1 { self.beta } else { 0.0 };
        let inv = 1.0 / self.beta;
        for (vi, ri) in v.iter_mut().zip(&self.r3) {
            *vi = ri * inv;
        }
        self.op.matvec(v, &mut self.r3);
        if self.iter > 1 {
            let c = self.beta / prev_norm;
            for (ri, r1) in self.r3.iter_mut().zip(&self.r1) {
                *ri -= c * r1;
            }
        }
        let alpha = dot(&self.r3, v);
        let c = alpha / self.beta;
        for (ri, r2) in self.r3.iter_mut().zip(&self.r2) {
            *ri -= c * r2;
        }
        if let Some(basis) = &mut self.basis {
            basis.push(v.to_vec());
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for q in basis.iter() {
                    let d = dot(q, &self.r3);
                    for (ri, qi) in self.r3.iter_mut().zip(q) {
                        *ri -= d * qi;
                    }
                }
            }
        }
        std::mem::swap(&mut self.r1, &mut self.r2);
        self.r2.copy_from_slice(&self.r3);
        self.beta_next = norm2(&self.r3);
        LanczosStep { alpha, beta_prev, beta_next: self.beta_next }
    }
}

/// `b - Bx` and its norm.
pub(crate) fn true_residual(op: &dyn LinearOperator, b: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let mut r = vec![0.0; b.len()];
    op.matvec(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let n = norm2(&r);
    (r, n)
}

/// `|B r| / (|B| |r|)`; the least-squares stationarity test compares it with `rtol`.
pub(crate) fn least_squares_ratio(op: &dyn LinearOperator, r: &[f64], rnorm: f64, op_norm: f64) -> f64 {
    let mut br = vec![0.0; r.len()];
    op.matvec(r, &mut br);
    let denom = op_norm * rnorm;
    if denom > 0.0 {
        norm2(&br) / denom
    } else {
        f64::INFINITY
    }
}

pub(crate) fn least_squares_ok(op: &dyn LinearOperator, r: &[f64], rnorm: f64, op_norm: f64, rtol: f64) -> bool {
    least_squares_ratio(op, r, rnorm, op_norm) <= rtol
}
