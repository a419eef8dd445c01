//! Linearized KKT saddle-point systems, applied matrix-free.
//!
//! Every variant solves
//!
//! ```text
//! [ H   J_c^T ] [ dw ]   [ -g    ]
//! [ J_c   0   ] [ L  ] = [ -C(w) ]
//! ```
//!
//! where `J_c` is the Jacobian of the active constraints and `(H, g)` is
//! `(eta I, dR/dw)` for the projected-gradient step, `(J^T J + eta I, J^T r)`
//! for Gauss-Newton and `(eta f diag(sqrt(v) + eps), m)` for Adam.

use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::krylov::{minres_qlp, KrylovSolution, SolveStatus, SolverConfig};
use crate::linops::{LinearOperator, Vector};
use crate::trainers::AdamState;

/// Relative residual below which a non-converged inner solve is still used.
pub const ACCEPT_RESIDUAL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KktVariant {
    Sgd,
    GaussNewton,
    Adam,
}

#[derive(Clone, Debug)]
enum TopBlock {
    Sgd {
        grad: Vector,
    },
    GaussNewton {
        residual: Linearization,
        jtr: Vector,
    },
    /// Moments after the current gradient has been folded in.
    Adam {
        moments: AdamState,
        diag: Vec<f64>,
    },
}

/// Everything one KKT matvec and right-hand side needs at the current point.
#[derive(Clone, Debug)]
pub struct KktState {
    n_params: usize,
    damping: f64,
    top: TopBlock,
    constraints: Option<Linearization>,
    constraint_values: Vector,
}

impl KktState {
    /// Projected-gradient system around the risk gradient `grad`.
    pub fn sgd(grad: Vector, constraints: Option<Linearization>, damping: f64) -> Result<Self> {
        let n = grad.len();
        Self::build(n, damping, TopBlock::Sgd { grad }, constraints)
    }

    /// Gauss-Newton system for the risk `1/2 |r(w)|^2`, linearized in `residual`.
    pub fn gauss_newton(residual: Linearization, constraints: Option<Linearization>, damping: f64) -> Result<Self> {
        let n = residual.n_params();
        let jtr = Vector::checked(residual.vjp_slice(residual.value()), "J^T r")?;
        Self::build(n, damping, TopBlock::GaussNewton { residual, jtr }, constraints)
    }

    /// Adam system. `moments` must already include the current gradient, so `moments.t >= 1`.
    pub fn adam(moments: AdamState, constraints: Option<Linearization>, damping: f64) -> Result<Self> {
        if moments.t == 0 {
            return Err(Error::MissingState("advanced Adam moments"));
        }
        let n = moments.len();
        let scale = damping * moments.bias_factor();
        let diag = moments.denominators().into_iter().map(|d| scale * d).collect();
        Self::build(n, damping, TopBlock::Adam { moments, diag }, constraints)
    }

    fn build(n_params: usize, damping: f64, top: TopBlock, constraints: Option<Linearization>) -> Result<Self> {
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(Error::InvalidArgument(format!("damping must be positive and finite, got {damping}")));
        }
        let constraint_values = match &constraints {
            Some(c) => {
                Error::check_len(n_params, c.n_params())?;
                Vector::checked(c.value().to_vec(), "constraint values")?
            }
            None => Vector::zeros(0),
        };
        Ok(KktState { n_params, damping, top, constraints, constraint_values })
    }

    pub fn variant(&self) -> KktVariant {
        match self.top {
            TopBlock::Sgd { .. } => KktVariant::Sgd,
            TopBlock::GaussNewton { .. } => KktVariant::GaussNewton,
            TopBlock::Adam { .. } => KktVariant::Adam,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_active(&self) -> usize {
        self.constraint_values.len()
    }

    pub fn dim(&self) -> usize {
        self.n_params + self.n_active()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn constraint_values(&self) -> &Vector {
        &self.constraint_values
    }

    pub fn adam_moments(&self) -> Option<&AdamState> {
        match &self.top {
            TopBlock::Adam { moments, .. } => Some(moments),
            _ => None,
        }
    }

    /// Same system with a different damping.
    pub fn with_damping(&self, damping: f64) -> Result<Self> {
        match &self.top {
            TopBlock::Adam { moments, .. } => Self::adam(moments.clone(), self.constraints.clone(), damping),
            top => Self::build(self.n_params, damping, top.clone(), self.constraints.clone()),
        }
    }

    pub fn operator(&self) -> KktOperator<'_> {
        KktOperator { state: self }
    }

    /// `(-g, -C(w))` for the variant's gradient surrogate `g`.
    pub fn rhs(&self) -> Vector {
        let g = match &self.top {
            TopBlock::Sgd { grad } => grad,
            TopBlock::GaussNewton { jtr, .. } => jtr,
            TopBlock::Adam { moments, .. } => &moments.m,
        };
        let mut out: Vec<f64> = g.as_slice().iter().map(|x| -x).collect();
        out.extend(self.constraint_values.as_slice().iter().map(|c| -c));
        Vector::new(out).expect("finite inputs")
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n_params;
        let (x1, x2) = x.split_at(n);
        let (y1, y2) = y.split_at_mut(n);
        match &self.top {
            TopBlock::Sgd { .. } => {
                for (yi, xi) in y1.iter_mut().zip(x1) {
                    *yi = self.damping * xi;
                }
            }
            TopBlock::GaussNewton { residual, .. } => {
                let jv = residual.jvp_slice(x1);
                let jjv = residual.vjp_slice(&jv);
                for ((yi, xi), gi) in y1.iter_mut().zip(x1).zip(&jjv) {
                    *yi = gi + self.damping * xi;
                }
            }
            TopBlock::Adam { diag, .. } => {
                for ((yi, xi), di) in y1.iter_mut().zip(x1).zip(diag) {
                    *yi = di * xi;
                }
            }
        }
        if let Some(c) = &self.constraints {
            if !x2.is_empty() {
                for (yi, gi) in y1.iter_mut().zip(c.vjp_slice(x2)) {
                    *yi += gi;
                }
                y2.copy_from_slice(&c.jvp_slice(x1));
            }
        }
    }
}

/// The KKT matrix of a [`KktState`] as a [`LinearOperator`].
pub struct KktOperator<'a> {
    state: &'a KktState,
}

impl LinearOperator for KktOperator<'_> {
    fn dim(&self) -> usize {
        self.state.dim()
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        self.state.matvec_into(x, y)
    }
}

fn matvec_checked(state: &KktState, expected: KktVariant, v: &Vector) -> Result<Vector> {
    if state.variant() != expected {
        return Err(Error::InvalidArgument(format!("{expected:?} matvec on a {:?} state", state.variant())));
    }
    Error::check_len(state.dim(), v.len())?;
    let mut y = vec![0.0; state.dim()];
    state.matvec_into(v.as_slice(), &mut y);
    Vector::checked(y, "KKT matvec")
}

/// `(eta v1 + J_c^T v2, J_c v1)`.
pub fn kkt_matvec_sgd(state: &KktState, v: &Vector) -> Result<Vector> {
    matvec_checked(state, KktVariant::Sgd, v)
}

/// `(J^T J v1 + eta v1 + J_c^T v2, J_c v1)`.
pub fn kkt_matvec_gn(state: &KktState, v: &Vector) -> Result<Vector> {
    matvec_checked(state, KktVariant::GaussNewton, v)
}

/// `(eta f (sqrt(v) + eps) * v1 + J_c^T v2, J_c v1)`.
pub fn kkt_matvec_adam(state: &KktState, v: &Vector) -> Result<Vector> {
    matvec_checked(state, KktVariant::Adam, v)
}

pub fn kkt_rhs(state: &KktState) -> Vector {
    state.rhs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Accepted,
    /// First solve was rejected; the second, with doubled damping, was used.
    Retried,
    /// Both solves were rejected and `dw` is zero.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct KktStep {
    pub dw: Vector,
    pub multipliers: Vector,
    pub outcome: StepOutcome,
    /// Diagnostics of the last inner solve.
    pub solve: KrylovSolution,
    /// Inner iterations summed over attempts.
    pub total_iters: usize,
}

fn acceptable(sol: &KrylovSolution, bnorm: f64) -> bool {
    matches!(sol.status, SolveStatus::Converged | SolveStatus::SingularMinLength) || sol.residual_norm <= ACCEPT_RESIDUAL * bnorm
}

/// Solves the state's system with MINRES-QLP and splits the solution at `N_P`.
///
/// A rejected solve is retried once with twice the damping, which halves the
/// gradient part of the step. If that is rejected too the update is skipped.
/// Only a non-finite solve is an error.
pub fn solve_step(state: &KktState, cfg: &SolverConfig) -> Result<KktStep> {
    let b = state.rhs();
    let bnorm = b.norm();
    let mut total_iters = 0;
    let mut current = None;
    for attempt in 0..2 {
        let retry;
        let s = if attempt == 0 {
            state
        } else {
            retry = state.with_damping(2.0 * state.damping)?;
            &retry
        };
        let sol = minres_qlp(&s.operator(), &b, cfg)?;
        total_iters += sol.iters;
        if !sol.residual_norm.is_finite() {
            return Err(Error::SolverFailure { status: sol.status, iters: total_iters, residual_norm: sol.residual_norm });
        }
        if acceptable(&sol, bnorm) {
            let outcome = if attempt == 0 { StepOutcome::Accepted } else { StepOutcome::Retried };
            let (dw, multipliers) = sol.x.split_at(state.n_params)?;
            return Ok(KktStep { dw, multipliers, outcome, solve: sol, total_iters });
        }
        current = Some(sol);
    }
    let sol = current.expect("two attempts ran");
    log::warn!("KKT solve rejected twice ({}, residual {:.3e} vs |b| {:.3e}); skipping the update", sol.status, sol.residual_norm, bnorm);
    Ok(KktStep {
        dw: Vector::zeros(state.n_params),
        multipliers: Vector::zeros(state.n_active()),
        outcome: StepOutcome::Skipped,
        solve: sol,
        total_iters,
    })
}
