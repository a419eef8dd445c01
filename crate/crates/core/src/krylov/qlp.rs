//! MINRES-QLP (Choi, Paige & Saunders).
//!
//! Each iteration extends the QR factorization of the Lanczos tridiagonal
//! with a left reflection, then applies two right reflections so the
//! triangular factor becomes lower triangular (`T = Q L P`). The solution is
//! `x_k = W_k u_k` with `L_k u_k = t_k`. While the estimated condition stays
//! below `transfer_cond` the cheaper MINRES direction updates are used; after
//! the switch, the last three `W` columns are rebuilt and updated by the
//! right reflections, and any `L` diagonal entry below the rank cutoff gets a
//! zero coefficient.

use super::minres::{finish, trivial_zero, StopReason};
use super::{least_squares_ratio, sym_ortho, true_residual, KrylovSolution, Lanczos, SolveStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::linops::{norm2, LinearOperator, Vector};

/// Minimum-length solution of `B x = b`, or the minimum-length
/// least-squares solution when the system is incompatible.
///
/// In floating point the Lanczos process rarely terminates exactly, so an
/// incompatible right-hand side leaves a null-space component in the first
/// pass, sometimes a large one. When that pass ends on the least-squares
/// test (or stops without meeting either test) the solution is rebuilt from
/// consistent solves only: the range part of `b` is `e = B^+ (B b)` and the
/// answer is `B^+ e`. Both solves are iteratively refined on their own
/// residuals. Every right-hand side lies in the range of `B`, so no
/// null-space component is introduced.
pub fn minres_qlp(op: &dyn LinearOperator, b: &Vector, cfg: &SolverConfig) -> Result<KrylovSolution> {
    cfg.validate()?;
    let n = op.dim();
    Error::check_len(n, b.len())?;
    let (first, ls_tol) = qlp_pass(op, b.as_slice(), cfg)?;
    if !matches!(first.status, SolveStatus::SingularMinLength | SolveStatus::Breakdown) {
        return Ok(first);
    }
    let b = b.as_slice();
    let mut counts = (first.iters, first.qlp_iters);
    let mut bb = vec![0.0; n];
    op.matvec(b, &mut bb);
    let Some(e) = refined_solve(op, &bb, cfg, &mut counts)? else { return Ok(first) };
    let Some(x) = refined_solve(op, &e, cfg, &mut counts)? else { return Ok(first) };
    let sol = finish(
        op,
        b,
        norm2(b),
        x,
        first.residual_estimate,
        counts.0,
        StopReason::Estimate,
        cfg,
        ls_tol,
        first.op_norm_estimate,
        first.history.clone(),
        counts.1,
        first.cond_estimate,
    );
    if matches!(sol.status, SolveStatus::Converged | SolveStatus::SingularMinLength) {
        return Ok(sol);
    }
    // neither passes the least-squares test; the rebuilt x carries no
    // null-space component, so keep it unless its residual is clearly worse
    let ratio = |s: &KrylovSolution| {
        let (r, rn) = true_residual(op, b, s.x.as_slice());
        least_squares_ratio(op, &r, rn, first.op_norm_estimate)
    };
    if sol.residual_norm <= first.residual_norm * (1.0 + 1e-6) && ratio(&sol) <= 10.0 * ratio(&first) {
        Ok(sol)
    } else {
        Ok(first)
    }
}

/// Upper bound on refinement rounds within one consistent solve.
const REFINE_ROUNDS: usize = 4;

/// `B^+ rhs` for a right-hand side in the range of `B`, refined by
/// re-solving for the residual while that keeps halving. The least-squares
/// test on the final `x` needs a residual well below `rtol |rhs|`.
fn refined_solve(op: &dyn LinearOperator, rhs: &[f64], cfg: &SolverConfig, counts: &mut (usize, usize)) -> Result<Option<Vec<f64>>> {
    let Some(mut x) = sub_solve(op, rhs, cfg, counts)? else { return Ok(None) };
    let (mut r, mut rn) = true_residual(op, rhs, &x);
    for _ in 1..REFINE_ROUNDS {
        let Some(d) = sub_solve(op, &r, cfg, counts)? else { break };
        let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let (tr, trn) = true_residual(op, rhs, &trial);
        if trn >= 0.5 * rn {
            break;
        }
        (x, r, rn) = (trial, tr, trn);
    }
    Ok(Some(x))
}

/// One pass whose right-hand side lies in the range of `B`; `None` when it fails.
fn sub_solve(op: &dyn LinearOperator, rhs: &[f64], cfg: &SolverConfig, counts: &mut (usize, usize)) -> Result<Option<Vec<f64>>> {
    let (sol, _) = qlp_pass(op, rhs, cfg)?;
    counts.0 += sol.iters;
    counts.1 += sol.qlp_iters;
    let rhs_norm = norm2(rhs);
    // normwise backward error: rtol * |b| alone is out of reach once |B| |x| is huge
    let backward_ok = sol.residual_norm <= cfg.rtol * (sol.op_norm_estimate * sol.x.norm() + rhs_norm);
    Ok(match sol.status {
        SolveStatus::Converged | SolveStatus::SingularMinLength => Some(sol.x.into_inner()),
        _ if backward_ok && sol.x.as_slice().iter().all(|v| v.is_finite()) => Some(sol.x.into_inner()),
        // stalled consistent solves still make useful corrections
        SolveStatus::MaxIters if sol.residual_norm <= cfg.rtol.sqrt() * rhs_norm => Some(sol.x.into_inner()),
        _ => None,
    })
}

/// Growth of the `|B r|` estimate over its minimum that ends an incompatible solve.
///
/// Loss of orthogonality in the Lanczos vectors limits how small `|B r|`
/// can get on incompatible systems, often above a tight `rtol`. Once the
/// estimate has passed its minimum by this factor with the residual flat,
/// the best iterate is accepted if it meets `sqrt(rtol)`.
const STAGNATION: f64 = 100.0;

struct LsCandidate {
    est: f64,
    x: Vec<f64>,
    rnorm: f64,
    checked: bool,
}

#[allow(unused_assignments)]
fn qlp_pass(op: &dyn LinearOperator, b: &[f64], cfg: &SolverConfig) -> Result<(KrylovSolution, f64)> {
    let n = op.dim();
    let beta1 = norm2(b);
    if beta1 == 0.0 {
        return Ok((trivial_zero(n), cfg.rtol));
    }
    let max_iters = cfg.max_iters_for(n);

    let mut lanczos = Lanczos::new(op, b, beta1, cfg.reorthogonalize);
    let mut v = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut xl2 = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut wl = vec![0.0; n];
    let mut wl2 = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut prev_x = vec![0.0; n];
    // best least-squares candidate seen so far, ranked by the |B r| estimate
    let mut best = LsCandidate { est: f64::INFINITY, x: Vec::new(), rnorm: beta1, checked: false };
    let mut prev_rnorm = beta1;
    let mut relaxed = false;

    // left reflection Q_k
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    // right reflections P_{k-2,k} and P_{k-1,k}
    let (mut cr1, mut sr1, mut cr2, mut sr2) = (-1.0f64, 0.0f64, -1.0f64, 0.0f64);

    let (mut dltan, mut eplnn) = (0.0f64, 0.0f64);
    let (mut gama, mut gamal, mut gamal2, mut gamal3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut eta, mut etal, mut etal2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut vepln, mut veplnl, mut veplnl2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut tau, mut taul, mut taul2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut u, mut ul, mut ul2, mut ul3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut phi = beta1;
    let mut rnorm = beta1;

    let mut anorm = 0.0f64;
    let mut acond = 1.0f64;
    let (mut gmin, mut gminl) = (0.0f64, 0.0f64);

    // values carried across the MINRES -> QLP transfer
    let (mut gamal_qlp, mut vepln_qlp, mut gama_qlp, mut ul_qlp, mut u_qlp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut qlp_iters = 0usize;

    let mut history = Vec::new();
    let mut iters = 0usize;
    let mut last_good = x.clone();

    let reason = loop {
        iters += 1;
        let step = lanczos.step(&mut v);
        if !step.alpha.is_finite() || !step.beta_next.is_finite() {
            break StopReason::NonFinite;
        }
        let (betal, alfa, betan) = (step.beta_prev, step.alpha, step.beta_next);
        let pnorm = (betal * betal + alfa * alfa + betan * betan).sqrt();
        let exhausted = betan <= cfg.breakdown_tol * anorm.max(pnorm);
        prev_x.copy_from_slice(&x);

        // apply Q_{k-1}
        let dbar = dltan;
        let mut dlta = cs * dbar + sn * alfa;
        let epln = eplnn;
        let gbar = sn * dbar - cs * alfa;
        eplnn = sn * betan;
        dltan = -cs * betan;
        let dlta_qlp = dlta;

        // compute Q_k
        gamal3 = gamal2;
        gamal2 = gamal;
        gamal = gama;
        let (c, s, g) = sym_ortho(gbar, betan);
        cs = c;
        sn = s;
        gama = g;
        let gama_tmp = gama;
        taul2 = taul;
        taul = tau;
        tau = cs * phi;
        phi *= sn;

        // apply P_{k-2,k}
        if iters > 2 {
            veplnl2 = veplnl;
            etal2 = etal;
            etal = eta;
            let dlta_tmp = sr2 * vepln - cr2 * dlta;
            veplnl = cr2 * vepln + sr2 * dlta;
            dlta = dlta_tmp;
            eta = sr2 * gama;
            gama *= -cr2;
        }
        // compute and apply P_{k-1,k}
        if iters > 1 {
            let (c1, s1, g1) = sym_ortho(gamal, dlta);
            cr1 = c1;
            sr1 = s1;
            gamal = g1;
            vepln = sr1 * gama;
            gama *= -cr1;
        }

        // forward substitution for the trailing three entries of u
        let cutoff = cfg.rank_tol * anorm.max(pnorm);

        // a coefficient beyond |b| / cutoff can only come from a ghost Ritz
        // value once the Krylov space is numerically exhausted
        let xmax = beta1 / cutoff;
        let solve = |num: f64, den: f64| if den.abs() > cutoff && (num / den).abs() <= xmax { num / den } else { 0.0 };
        let ul4 = ul3;
        ul3 = ul2;
        if iters > 2 {
            ul2 = solve(taul2 - etal2 * ul4 - veplnl2 * ul3, gamal2);
        }
        if iters > 1 {
            ul = solve(taul - etal * ul3 - veplnl * ul2, gamal);
        }
        let num = tau - eta * ul2 - vepln * ul;
        let truncated = !(gama.abs() > cutoff && (num / gama).abs() <= xmax);
        u = if truncated { 0.0 } else { num / gama };

        if acond < cfg.transfer_cond && !truncated && qlp_iters == 0 {
            // MINRES direction update
            std::mem::swap(&mut wl2, &mut wl);
            std::mem::swap(&mut wl, &mut w);
            let inv = 1.0 / gama_tmp;
            for i in 0..n {
                w[i] = (v[i] - epln * wl2[i] - dlta_qlp * wl[i]) * inv;
                x[i] += tau * w[i];
            }
        } else {
            qlp_iters += 1;
            if qlp_iters == 1 {
                xl2.fill(0.0);
                if iters > 1 {
                    // rebuild w_{k-3}, w_{k-2}, w_{k-1} from the MINRES directions
                    if iters > 3 {
                        for i in 0..n {
                            wl2[i] = gamal3 * wl2[i] + veplnl2 * wl[i] + etal * w[i];
                        }
                    }
                    if iters > 2 {
                        for i in 0..n {
                            wl[i] = gamal_qlp * wl[i] + vepln_qlp * w[i];
                        }
                    }
                    for wi in w.iter_mut() {
                        *wi *= gama_qlp;
                    }
                    for i in 0..n {
                        xl2[i] = x[i] - wl[i] * ul_qlp - w[i] * u_qlp;
                    }
                }
            }
            if iters == 1 {
                std::mem::swap(&mut wl2, &mut wl);
                for i in 0..n {
                    wl[i] = v[i] * sr1;
                    w[i] = -v[i] * cr1;
                }
            } else if iters == 2 {
                std::mem::swap(&mut wl2, &mut wl);
                for i in 0..n {
                    let wi = w[i];
                    wl[i] = wi * cr1 + v[i] * sr1;
                    w[i] = wi * sr1 - v[i] * cr1;
                }
            } else {
                // wl2 <- wl; wl <- w; then rotate (wl2, v) by P_{k-2,k} and (wl, w) by P_{k-1,k}
                std::mem::swap(&mut wl2, &mut wl);
                std::mem::swap(&mut wl, &mut w);
                for i in 0..n {
                    let a = wl2[i];
                    w[i] = a * sr2 - v[i] * cr2;
                    wl2[i] = a * cr2 + v[i] * sr2;
                    let (p, q) = (wl[i], w[i]);
                    scratch[i] = p * cr1 + q * sr1;
                    w[i] = p * sr1 - q * cr1;
                }
                std::mem::swap(&mut wl, &mut scratch);
            }
            for i in 0..n {
                xl2[i] += wl2[i] * ul2;
                x[i] = xl2[i] + wl[i] * ul + w[i] * u;
            }
        }

        // P_{k-1,k+1}, needed next iteration
        let gamal_tmp = gamal;
        let (c2, s2, g2) = sym_ortho(gamal, eplnn);
        cr2 = c2;
        sr2 = s2;
        gamal = g2;

        gamal_qlp = gamal_tmp;
        vepln_qlp = vepln;
        gama_qlp = gama;
        ul_qlp = ul;
        u_qlp = u;

        let abs_gama = gama.abs();
        anorm = anorm.max(pnorm).max(gamal).max(abs_gama);
        if iters == 1 {
            gmin = abs_gama;
            gminl = gmin;
        } else {
            let gminl2 = gminl;
            gminl = gmin;
            gmin = gminl2.min(gamal).min(abs_gama);
        }
        acond = if gmin > 0.0 { anorm / gmin } else { f64::INFINITY };
        if !truncated {
            rnorm = phi;
        }
        let rootl = gbar.hypot(dltan);
        let rel_ares = if anorm > 0.0 { rootl / anorm } else { 0.0 };
        history.push(rnorm);

        if x.iter().any(|xi| !xi.is_finite()) {
            break StopReason::NonFinite;
        }
        last_good.copy_from_slice(&x);

        if rnorm <= cfg.rtol * beta1 || rel_ares <= cfg.rtol {
            let (r, rn) = true_residual(op, b, &x);
            if rn <= cfg.rtol * beta1 {
                break StopReason::Estimate;
            }
            let mut ratio = least_squares_ratio(op, &r, rn, anorm);
            // rootl measures |B r| for the previous iterate, which is the
            // better least-squares candidate when the newest u came from a tiny gamma
            if rel_ares <= cfg.rtol && iters > 1 {
                let (rp, rnp) = true_residual(op, b, &prev_x);
                let ratio_prev = least_squares_ratio(op, &rp, rnp, anorm);
                if ratio_prev < ratio {
                    x.copy_from_slice(&prev_x);
                    ratio = ratio_prev;
                }
            }
            if ratio <= cfg.rtol {
                break StopReason::Estimate;
            }
        }
        if iters > 1 && rel_ares < best.est {
            best.est = rel_ares;
            best.x.clear();
            best.x.extend_from_slice(&prev_x);
            best.rnorm = prev_rnorm;
            best.checked = false;
        }
        // incompatible systems: the residual has levelled off and the estimate
        // has climbed well past its minimum, so later iterates only add noise
        if !best.checked && rel_ares > STAGNATION * best.est && rnorm >= best.rnorm * (1.0 - 1e-6) {
            best.checked = true;
            let (r, rn) = true_residual(op, b, &best.x);
            if least_squares_ratio(op, &r, rn, anorm) <= cfg.rtol.sqrt() {
                x.copy_from_slice(&best.x);
                relaxed = true;
                break StopReason::Estimate;
            }
        }
        if exhausted {
            break StopReason::Exhausted;
        }
        if iters >= max_iters {
            break StopReason::IterationCap;
        }
        prev_rnorm = rnorm;
    };

    if reason == StopReason::NonFinite {
        x = last_good;
    }
    if reason == StopReason::IterationCap && !best.x.is_empty() {
        let (r, rn) = true_residual(op, b, &x);
        let (rb, rnb) = true_residual(op, b, &best.x);
        if rn > cfg.rtol * beta1
            && rnb <= rn * (1.0 + 1e-6)
            && least_squares_ratio(op, &rb, rnb, anorm) < least_squares_ratio(op, &r, rn, anorm)
        {
            x.copy_from_slice(&best.x);
            relaxed = true;
        }
    }
    let tol = if relaxed { cfg.rtol.sqrt() } else { cfg.rtol };
    Ok((finish(op, b, beta1, x, rnorm, iters, reason, cfg, tol, anorm, history, qlp_iters, acond), tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::{minres, SolveStatus};
    use crate::linops::{DenseMatrix, DenseOperator, IdentityOperator};

    fn dense(rows: &[Vec<f64>]) -> DenseOperator {
        DenseOperator::new(DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn vec(x: &[f64]) -> Vector {
        Vector::from_slice(x).unwrap()
    }

    #[test]
    fn identity_returns_rhs() {
        let b = vec(&[0.3, -7.0, 2.5, 1.0]);
        let sol = minres_qlp(&IdentityOperator(4), &b, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.x.sub(&b).unwrap().norm() < 1e-14);
    }

    #[test]
    fn singular_consistent_gives_min_norm() {
        let op = dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let sol = minres_qlp(&op, &vec(&[2.0, 2.0]), &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12, "{:?}", sol.x);
    }

    #[test]
    fn singular_inconsistent_gives_min_length_least_squares() {
        let op = dense(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let sol = minres_qlp(&op, &vec(&[1.0, 1.0]), &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::SingularMinLength);
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && sol.x[1].abs() < 1e-12, "{:?}", sol.x);
        assert!((sol.residual_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_qlp_matches_minres_path() {
        // Same system solved with QLP updates from the first iteration, after a
        // mid-run transfer, and with MINRES updates only.
        let n = 12;
        let rows: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| if i == j { (i as f64) - 5.5 } else { 0.1 / (1.0 + (i + j) as f64) }).collect()).collect();
        let op = dense(&rows);
        let b = Vector::new((0..n).map(|i| (i as f64).sin() + 0.5).collect()).unwrap();
        let base = SolverConfig { rtol: 1e-12, ..SolverConfig::default() };
        let plain = minres(&op, &b, &base).unwrap();
        let minres_only = minres_qlp(&op, &b, &SolverConfig { transfer_cond: 1e300, ..base }).unwrap();
        let from_start = minres_qlp(&op, &b, &SolverConfig { transfer_cond: 1.0, ..base }).unwrap();
        assert_eq!(minres_only.qlp_iters, 0);
        assert_eq!(from_start.qlp_iters, from_start.iters);
        for sol in [&minres_only, &from_start] {
            assert_eq!(sol.status, SolveStatus::Converged);
            assert!(sol.x.sub(&plain.x).unwrap().norm() <= 1e-9 * plain.x.norm());
        }
        for switch in [2.0, 5.0, 20.0, 100.0] {
            let mid = minres_qlp(&op, &b, &SolverConfig { transfer_cond: switch, ..base }).unwrap();
            assert_eq!(mid.status, SolveStatus::Converged);
            assert!(mid.x.sub(&plain.x).unwrap().norm() <= 1e-9 * plain.x.norm(), "switch {switch}");
        }
    }

    #[test]
    fn residual_estimate_is_monotone() {
        let op = dense(&[vec![4.0, 1.0, 0.0], vec![1.0, -2.0, 1.0], vec![0.0, 1.0, 0.5]]);
        let sol = minres_qlp(&op, &vec(&[1.0, 2.0, 3.0]), &SolverConfig::default()).unwrap();
        for pair in sol.history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-15));
        }
    }
}
