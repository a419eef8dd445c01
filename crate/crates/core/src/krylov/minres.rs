use super::{least_squares_ok, sym_ortho, true_residual, KrylovSolution, Lanczos, SolveStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::linops::{norm2, LinearOperator, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StopReason {
    Estimate,
    Exhausted,
    IterationCap,
    NonFinite,
}

/// Classic MINRES (Paige & Saunders) with `x_0 = 0`.
///
/// Returns the iterate minimizing `|b - Bx|` over the current Krylov
/// subspace. On singular incompatible systems the iterates may drift along
/// the null space; use [`super::minres_qlp`] there.
pub fn minres(op: &dyn LinearOperator, b: &Vector, cfg: &SolverConfig) -> Result<KrylovSolution> {
    cfg.validate()?;
    let n = op.dim();
    Error::check_len(n, b.len())?;
    let b = b.as_slice();
    let beta1 = norm2(b);
    if beta1 == 0.0 {
        return Ok(trivial_zero(n));
    }
    let max_iters = cfg.max_iters_for(n);

    let mut lanczos = Lanczos::new(op, b, beta1, cfg.reorthogonalize);
    let mut v = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let (mut dbar, mut epsln) = (0.0f64, 0.0f64);
    let mut phibar = beta1;
    let mut anorm = 0.0f64;
    let (mut gmax, mut gmin) = (0.0f64, f64::INFINITY);
    let mut history = Vec::new();
    let mut iters = 0;
    let mut last_good = x.clone();

    let reason = loop {
        iters += 1;
        let step = lanczos.step(&mut v);
        if !step.alpha.is_finite() || !step.beta_next.is_finite() {
            break StopReason::NonFinite;
        }
        let pnorm = (step.beta_prev.powi(2) + step.alpha.powi(2) + step.beta_next.powi(2)).sqrt();
        anorm = anorm.max(pnorm);

        // previous rotation applied to the new column of T_k
        let oldeps = epsln;
        let delta = cs * dbar + sn * step.alpha;
        let gbar = sn * dbar - cs * step.alpha;
        epsln = sn * step.beta_next;
        dbar = -cs * step.beta_next;
        let root = gbar.hypot(dbar);

        let (c, s, gamma) = sym_ortho(gbar, step.beta_next);
        cs = c;
        sn = s;
        if gamma <= cfg.rank_tol * anorm || gamma == 0.0 {
            // T_k is singular and the Krylov space is exhausted; x is final.
            history.push(phibar);
            break StopReason::Exhausted;
        }
        gmax = gmax.max(gamma);
        gmin = gmin.min(gamma);
        let phi = cs * phibar;
        let prev_phibar = phibar;
        phibar *= sn;

        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        let inv = 1.0 / gamma;
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * inv;
            x[i] += phi * w[i];
        }
        history.push(phibar);

        if x.iter().any(|xi| !xi.is_finite()) {
            break StopReason::NonFinite;
        }
        last_good.copy_from_slice(&x);

        if phibar <= cfg.rtol * beta1 || root <= cfg.rtol * anorm.max(gmax) && prev_phibar > 0.0 {
            let (r, rn) = true_residual(op, b, &x);
            if rn <= cfg.rtol * beta1 || least_squares_ok(op, &r, rn, anorm, cfg.rtol) {
                break StopReason::Estimate;
            }
        }
        if step.beta_next <= cfg.breakdown_tol * anorm.max(pnorm) {
            break StopReason::Exhausted;
        }
        if iters >= max_iters {
            break StopReason::IterationCap;
        }
    };

    if reason == StopReason::NonFinite {
        x = last_good;
    }
    let cond = if gmin.is_finite() && gmin > 0.0 { gmax / gmin } else { f64::INFINITY };
    Ok(finish(op, b, beta1, x, phibar, iters, reason, cfg, cfg.rtol, anorm, history, 0, cond))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish(
    op: &dyn LinearOperator,
    b: &[f64],
    beta1: f64,
    x: Vec<f64>,
    estimate: f64,
    iters: usize,
    reason: StopReason,
    cfg: &SolverConfig,
    ls_tol: f64,
    op_norm: f64,
    history: Vec<f64>,
    qlp_iters: usize,
    cond: f64,
) -> KrylovSolution {
    let (r, rnorm) = true_residual(op, b, &x);
    let status = if reason == StopReason::NonFinite || !rnorm.is_finite() {
        SolveStatus::Breakdown
    } else if rnorm <= cfg.rtol * beta1 {
        SolveStatus::Converged
    } else if least_squares_ok(op, &r, rnorm, op_norm, ls_tol) {
        SolveStatus::SingularMinLength
    } else if reason == StopReason::IterationCap {
        SolveStatus::MaxIters
    } else {
        SolveStatus::Breakdown
    };
    let x = if x.iter().all(|v| v.is_finite()) { Vector::checked(x, "krylov").unwrap_or_default() } else { Vector::zeros(b.len()) };
    KrylovSolution {
        x,
        residual_norm: rnorm,
        residual_estimate: estimate,
        iters,
        status,
        history,
        qlp_iters,
        op_norm_estimate: op_norm,
        cond_estimate: cond,
    }
}

pub(crate) fn trivial_zero(n: usize) -> KrylovSolution {
    KrylovSolution {
        x: Vector::zeros(n),
        residual_norm: 0.0,
        residual_estimate: 0.0,
        iters: 0,
        status: SolveStatus::Converged,
        history: Vec::new(),
        qlp_iters: 0,
        op_norm_estimate: 0.0,
        cond_estimate: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{DenseMatrix, DenseOperator, DiagonalOperator, IdentityOperator};

    #[test]
    fn identity_solves_in_one_iteration() {
        let b = Vector::from_slice(&[5.0, -2.0, 0.0]).unwrap();
        let sol = minres(&IdentityOperator(3), &b, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.iters <= 1);
        assert!(sol.x.sub(&b).unwrap().norm() < 1e-14);
    }

    #[test]
    fn diagonal_solve() {
        let b = Vector::from_slice(&[2.0, 3.0]).unwrap();
        let sol = minres(&DiagonalOperator(vec![2.0, 3.0]), &b, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_system() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = Vector::from_slice(&[1.0, 2.0]).unwrap();
        let sol = minres(&DenseOperator::new(a).unwrap(), &b, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.x[0] - 2.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_and_length_check() {
        let sol = minres(&IdentityOperator(2), &Vector::zeros(2), &SolverConfig::default()).unwrap();
        assert_eq!(sol.iters, 0);
        assert_eq!(sol.x, Vector::zeros(2));
        assert!(minres(&IdentityOperator(2), &Vector::zeros(3), &SolverConfig::default()).is_err());
    }

    #[test]
    fn non_finite_operator_reports_breakdown() {
        let op = crate::linops::FnOperator::new(2, |_x: &[f64], y: &mut [f64]| y.fill(f64::NAN));
        let sol = minres(&op, &Vector::from_slice(&[1.0, 1.0]).unwrap(), &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Breakdown);
    }
}
