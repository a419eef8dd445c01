mod common;

use common::*;
use kktrain::benchmarks::solve_check::SpectralSystem;
use kktrain::krylov::{minres, minres_qlp, SolveStatus, SolverConfig};
use kktrain::linops::{DenseOperator, FnOperator, LinearOperator, Vector};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn dense_op(a: &DMatrix<f64>) -> DenseOperator {
    DenseOperator::new(from_na(a)).unwrap()
}

fn residual(op: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let mut y = vec![0.0; b.len()];
    op.matvec(x, &mut y);
    y.iter().zip(b).map(|(a, c)| (c - a) * (c - a)).sum::<f64>().sqrt()
}

#[test]
fn minres_matches_dense_lu_on_well_conditioned_system() {
    let mut r = rng(11);
    let eig: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.0 + i as f64 / 10.0 } else { -1.0 - i as f64 / 20.0 }).collect();
    let a = symmetric_with_spectrum(&mut r, &eig);
    let b = gauss_vec(&mut r, 50);
    let exact: Vec<f64> = a.clone().lu().solve(&nalgebra::DVector::from_row_slice(&b)).unwrap().iter().copied().collect();
    let sol = minres(&dense_op(&a), &vector(&b), &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(rel_err(sol.x.as_slice(), &exact) < 1e-7);
}

#[test]
fn minres_and_qlp_agree_on_nonsingular_systems() {
    let mut r = rng(12);
    for _ in 0..20 {
        let n = r.gen_range(2..40);
        let eig: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..3.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let a = symmetric_with_spectrum(&mut r, &eig);
        let b = vector(&gauss_vec(&mut r, n));
        let cfg = SolverConfig { rtol: 1e-12, ..SolverConfig::default() };
        let x1 = minres(&dense_op(&a), &b, &cfg).unwrap().x;
        let x2 = minres_qlp(&dense_op(&a), &b, &cfg).unwrap().x;
        assert!(rel_err(x1.as_slice(), x2.as_slice()) < 1e-8);
    }
}

#[test]
fn dense_and_matrix_free_give_the_same_solution() {
    let mut r = rng(13);
    let a = symmetric_with_spectrum(&mut r, &[4.0, -2.0, 1.0, 0.5, -0.25, 0.0]);
    let b = vector(&gauss_vec(&mut r, 6));
    let m = from_na(&a);
    let free = FnOperator::new(6, |x: &[f64], y: &mut [f64]| m.matvec(x, y));
    let cfg = SolverConfig::default();
    let xd = minres_qlp(&dense_op(&a), &b, &cfg).unwrap().x;
    let xf = minres_qlp(&free, &b, &cfg).unwrap().x;
    assert!(rel_err(xd.as_slice(), xf.as_slice()) < 1e-12);
}

#[test]
fn reported_residual_matches_recomputation() {
    let mut r = rng(14);
    for _ in 0..30 {
        let n = r.gen_range(2..30);
        let nullity = r.gen_range(0..n);
        let mut eig: Vec<f64> = (0..n - nullity).map(|_| r.gen_range(-2.0..2.0)).collect();
        eig.extend(std::iter::repeat_n(0.0, nullity));
        let a = symmetric_with_spectrum(&mut r, &eig);
        let b = gauss_vec(&mut r, n);
        let op = dense_op(&a);
        let sol = minres_qlp(&op, &vector(&b), &SolverConfig::default()).unwrap();
        let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((residual(&op, sol.x.as_slice(), &b) - sol.residual_norm).abs() <= 1e-12 * bnorm.max(1.0));
        assert!((sol.residual_estimate - sol.residual_norm).abs() <= 1e-8 * bnorm);
        if sol.status == SolveStatus::Converged {
            assert!(sol.residual_norm <= 1e-8 * bnorm * (1.0 + 1e-6));
        }
    }
}

#[test]
fn singular_systems_return_pseudoinverse_solution() {
    let mut r = rng(15);
    for trial in 0..40 {
        let n = r.gen_range(3..60);
        let nullity = r.gen_range(1..n);
        let mut eig: Vec<f64> = (0..n - nullity).map(|_| r.gen_range(0.1..5.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        eig.extend(std::iter::repeat_n(0.0, nullity));
        let a = symmetric_with_spectrum(&mut r, &eig);
        let b = gauss_vec(&mut r, n);
        let exact = pinv_solve(&a, &b, 1e-10);
        let sol = minres_qlp(&dense_op(&a), &vector(&b), &SolverConfig::default()).unwrap();
        let err = rel_err(sol.x.as_slice(), &exact);
        assert!(err < 1e-8, "trial {trial}: n={n} nullity={nullity} err={err:e} status={}", sol.status);
    }
}

#[test]
fn residual_estimate_is_nonincreasing() {
    let mut r = rng(16);
    let eig: Vec<f64> = (0..80).map(|i| (-1f64).powi(i) * 10f64.powf(-(i as f64) / 16.0)).collect();
    let a = symmetric_with_spectrum(&mut r, &eig);
    let sol = minres_qlp(&dense_op(&a), &vector(&gauss_vec(&mut r, 80)), &SolverConfig::default()).unwrap();
    for w in sol.history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let op = dense_op(&DMatrix::identity(3, 3));
    assert!(minres_qlp(&op, &Vector::zeros(2), &SolverConfig::default()).is_err());
    assert!(minres(&op, &Vector::zeros(4), &SolverConfig::default()).is_err());
}

#[test]
fn reorthogonalized_lanczos_stops_once_the_krylov_space_is_exhausted() {
    // 12 distinct nonzero eigenvalues plus a null space: b spans at most 13 Krylov directions
    let mut eig: Vec<f64> = (0..12).map(|i| (-1f64).powi(i) * (0.2 + 0.1 * i as f64)).collect();
    eig.extend(std::iter::repeat_n(0.0, 28));
    let sys = SpectralSystem::new(eig, 40, 21).unwrap();
    let b = gauss_vec(&mut rng(21), 40);
    let cfg = SolverConfig { rtol: 1e-12, reorthogonalize: true, transfer_cond: 1.0, max_iters: Some(14), ..SolverConfig::default() };
    let sol = minres_qlp(&sys, &vector(&b), &cfg).unwrap();
    assert_eq!(sol.status, SolveStatus::SingularMinLength);
    assert!(rel_err(sol.x.as_slice(), &sys.pinv_solve(&b)) < 1e-10);
}

#[test]
fn reorthogonalized_qlp_meets_pinv_on_ill_conditioned_incompatible_systems() {
    let mut r = rng(22);
    for trial in 0..40 {
        let n = r.gen_range(20..120);
        let nullity = r.gen_range(1..n / 2);
        let cond = 10f64.powf(r.gen_range(3.0..5.0));
        let sys = SpectralSystem::random(n, cond, nullity, r.gen()).unwrap();
        let b = gauss_vec(&mut r, n);
        let cfg = SolverConfig { rtol: 1e-12, reorthogonalize: true, transfer_cond: 1.0, ..SolverConfig::default() };
        let sol = minres_qlp(&sys, &vector(&b), &cfg).unwrap();
        let err = rel_err(sol.x.as_slice(), &sys.pinv_solve(&b));
        assert!(err < 1e-8, "trial {trial}: n={n} nullity={nullity} cond={cond:e} err={err:e} status={}", sol.status);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_qlp_matches_pinv(seed in any::<u64>(), n in 2usize..25, nullity_frac in 0.0f64..0.8, log_cond in 0.0f64..4.0) {
        let nullity = ((n as f64) * nullity_frac) as usize;
        let sys = SpectralSystem::random(n, 10f64.powf(log_cond), nullity, seed).unwrap();
        let b = gauss_vec(&mut rng(seed), n);
        let cfg = SolverConfig { rtol: 1e-10, ..SolverConfig::default() };
        let sol = minres_qlp(&sys, &vector(&b), &cfg).unwrap();
        let err = rel_err(sol.x.as_slice(), &sys.pinv_solve(&b));
        prop_assert!(err < 1e-7, "err {:e} status {}", err, sol.status);
    }

    #[test]
    fn prop_solution_is_linear_in_rhs(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        prop_assume!(alpha.abs() > 1e-3);
        let mut r = rng(seed);
        let a = symmetric_with_spectrum(&mut r, &[3.0, -1.0, 0.5, 2.0]);
        let b = gauss_vec(&mut r, 4);
        let cfg = SolverConfig { rtol: 1e-13, ..SolverConfig::default() };
        let x = minres_qlp(&dense_op(&a), &vector(&b), &cfg).unwrap().x;
        let bs: Vec<f64> = b.iter().map(|v| alpha * v).collect();
        let xs = minres_qlp(&dense_op(&a), &vector(&bs), &cfg).unwrap().x;
        let scaled: Vec<f64> = x.as_slice().iter().map(|v| alpha * v).collect();
        prop_assert!(rel_err(xs.as_slice(), &scaled) < 1e-10);
    }
}
