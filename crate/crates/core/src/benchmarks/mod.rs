//! Synthetic problems and evaluation metrics.
//!
//! - [`spheres`]: a point closest to an anchor on the intersection of many
//!   nearly identical hyperspheres, in hard and soft form.
//! - [`pose`]: a toy 3D pose regressor with bone-length symmetry constraints.
//! - [`quadratic`]: least squares under linear equality constraints.
//! - [`solve_check`]: random symmetric systems with a known pseudoinverse solution.

pub mod pose;
pub mod quadratic;
pub mod solve_check;
pub mod spheres;

pub use pose::{run_pose_comparison, PoseComparison, PoseConfig, ToyPoseProblem};
pub use quadratic::QuadraticProblem;
pub use solve_check::SpectralSystem;
pub use spheres::{gen_spheres, run_sphere_comparison, SphereComparison, SphereProblem};

use crate::constraints::{joints, median_abs};
use crate::error::{Error, Result};
use crate::linops::DenseMatrix;

/// Mean over samples of the mean per-joint Euclidean distance.
pub fn prediction_error(preds: &DenseMatrix, truths: &DenseMatrix) -> Result<f64> {
    Error::check_len(joints::POSE_LEN, preds.cols())?;
    Error::check_len(joints::POSE_LEN, truths.cols())?;
    Error::check_len(truths.rows(), preds.rows())?;
    if preds.rows() == 0 {
        return Err(Error::Empty("prediction_error"));
    }
    let mut total = 0.0;
    for i in 0..preds.rows() {
        let (p, t) = (preds.row(i), truths.row(i));
        let per_joint: f64 = p
            .chunks_exact(3)
            .zip(t.chunks_exact(3))
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum();
        total += per_joint / joints::COUNT as f64;
    }
    Ok(total / preds.rows() as f64)
}

/// Median of the absolute residuals.
pub fn median_violation(residuals: &[f64]) -> Result<f64> {
    median_abs(residuals)
}

/// `|pred - truth|^2 / 51`.
pub fn squared_joint_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    Error::check_len(joints::POSE_LEN, pred.len())?;
    Error::check_len(joints::POSE_LEN, truth.len())?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / joints::POSE_LEN as f64)
}
