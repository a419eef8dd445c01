//! Data-dependent output constraints `C_j(phi(x'_k; w))` and active-set selection.
//!
//! A [`ConstraintPool`] pairs unlabeled samples with a [`ConstraintFamily`].
//! Stacked residual vectors are always ordered sample-major: all constraints
//! of the first active sample, then all of the second, and so on.
//!
//! Mining picks the samples with the largest per-sample median violation.
//! Its objective is a sum of per-sample terms, so the best subset of a given
//! size is simply the top entries of that list.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffFunction, Graph, Model, Node};
use crate::error::{Error, Result};
use crate::linops::{DenseMatrix, Vector};

/// Joint order of the 17-joint skeleton.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const RIGHT_HIP: usize = 1;
    pub const RIGHT_KNEE: usize = 2;
    pub const RIGHT_HEEL: usize = 3;
    pub const LEFT_HIP: usize = 4;
    pub const LEFT_KNEE: usize = 5;
    pub const LEFT_HEEL: usize = 6;
    pub const SPINE: usize = 7;
    pub const CHEST: usize = 8;
    pub const NECK: usize = 9;
    pub const HEAD: usize = 10;
    pub const LEFT_SHOULDER: usize = 11;
    pub const LEFT_ELBOW: usize = 12;
    pub const LEFT_HAND: usize = 13;
    pub const RIGHT_SHOULDER: usize = 14;
    pub const RIGHT_ELBOW: usize = 15;
    pub const RIGHT_HAND: usize = 16;

    pub const COUNT: usize = 17;
    pub const POSE_LEN: usize = 3 * COUNT;

    /// Left/right counterparts, used to mirror a pose.
    pub const MIRROR: [usize; COUNT] = [0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13];
}

/// Row `j` compares the length of segment `(t[j][0], t[j][1])` against
/// segment `(t[j][2], t[j][3])`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointIndexTable {
    pub rows: Vec<[usize; 4]>,
}

impl JointIndexTable {
    /// Upper arms, forearms, thighs, shins, collarbones and hip bones.
    pub fn bone_symmetry() -> Self {
        use joints::*;
        JointIndexTable {
            rows: vec![
                [LEFT_SHOULDER, LEFT_ELBOW, RIGHT_SHOULDER, RIGHT_ELBOW],
                [LEFT_ELBOW, LEFT_HAND, RIGHT_ELBOW, RIGHT_HAND],
                [LEFT_HIP, LEFT_KNEE, RIGHT_HIP, RIGHT_KNEE],
                [LEFT_KNEE, LEFT_HEEL, RIGHT_KNEE, RIGHT_HEEL],
                [CHEST, LEFT_SHOULDER, CHEST, RIGHT_SHOULDER],
                [PELVIS, LEFT_HIP, PELVIS, RIGHT_HIP],
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn coord_cols(&self, m: usize) -> Vec<usize> {
        self.rows.iter().flat_map(|r| (0..3).map(move |c| 3 * r[m] + c)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Equality,
    /// Satisfied when `C <= 0`.
    Inequality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    /// Six bone-length differences of a 17x3 pose output.
    Symmetry(JointIndexTable),
    /// `|y| - radius` of the whole output vector.
    SphereRadius { radius: f64 },
    /// Every output coordinate is its own constraint.
    Identity { n: usize },
}

impl ConstraintFamily {
    pub fn n_constraints(&self) -> usize {
        match self {
            ConstraintFamily::Symmetry(t) => t.len(),
            ConstraintFamily::SphereRadius { .. } => 1,
            ConstraintFamily::Identity { n } => *n,
        }
    }

    /// Output width the family expects from the model, if fixed.
    fn output_dim(&self) -> Option<usize> {
        match self {
            ConstraintFamily::Symmetry(_) => Some(joints::POSE_LEN),
            ConstraintFamily::SphereRadius { .. } => None,
            ConstraintFamily::Identity { n } => Some(*n),
        }
    }

    /// Appends `C(y)` for a `batch x out` node, giving `batch x n_constraints`.
    fn build(&self, g: &mut Graph, y: Node) -> Result<Node> {
        match self {
            ConstraintFamily::Symmetry(table) => {
                let mut lengths = Vec::with_capacity(2);
                for m in [0, 2] {
                    let a = g.select_cols(y, table.coord_cols(m))?;
                    let b = g.select_cols(y, table.coord_cols(m + 1))?;
                    let d = g.sub(a, b)?;
                    lengths.push(g.group_norm(d, 3)?);
                }
                g.sub(lengths[0], lengths[1])
            }
            ConstraintFamily::SphereRadius { radius } => {
                let (_, cols) = g.shape(y);
                let n = g.group_norm(y, cols)?;
                g.add_scalar(n, -radius)
            }
            ConstraintFamily::Identity { .. } => Ok(y),
        }
    }
}

/// Unlabeled samples plus the constraints every model output must satisfy.
#[derive(Clone, Debug)]
pub struct ConstraintPool {
    samples: DenseMatrix,
    family: ConstraintFamily,
    kinds: Vec<ConstraintKind>,
}

impl ConstraintPool {
    pub fn new(samples: DenseMatrix, family: ConstraintFamily, kinds: Vec<ConstraintKind>) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Empty("constraint pool"));
        }
        Error::check_len(family.n_constraints(), kinds.len())?;
        if let ConstraintFamily::SphereRadius { radius } = family {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(Error::InvalidArgument(format!("sphere radius must be positive, got {radius}")));
            }
        }
        Ok(ConstraintPool { samples, family, kinds })
    }

    pub fn equalities(samples: DenseMatrix, family: ConstraintFamily) -> Result<Self> {
        let kinds = vec![ConstraintKind::Equality; family.n_constraints()];
        Self::new(samples, family, kinds)
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn n_constraints(&self) -> usize {
        self.family.n_constraints()
    }

    pub fn family(&self) -> &ConstraintFamily {
        &self.family
    }

    pub fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    pub fn samples(&self) -> &DenseMatrix {
        &self.samples
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        self.samples.row(k)
    }

    fn check_model(&self, model: &dyn Model) -> Result<()> {
        Error::check_len(model.input_dim(), self.samples.cols())?;
        if let Some(out) = self.family.output_dim() {
            Error::check_len(out, model.output_dim())?;
        }
        Ok(())
    }

    fn batch(&self, rows: &[usize]) -> Result<DenseMatrix> {
        let cols = self.samples.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &k in rows {
            if k >= self.len() {
                return Err(Error::IndexOutOfRange { what: "constraint pool", index: k, len: self.len() });
            }
            data.extend_from_slice(self.samples.row(k));
        }
        DenseMatrix::from_row_major(rows.len(), cols, data)
    }

    /// The stacked active residuals as a differentiable function of `w`.
    pub fn constraint_function(&self, model: &dyn Model, active: &ActiveSet) -> Result<DiffFunction> {
        self.check_model(model)?;
        active.validate(self)?;
        let mut g = Graph::new(model.n_params());
        let x = g.input(self.batch(&active.samples)?);
        let y = model.build(&mut g, x)?;
        let c = self.family.build(&mut g, y)?;
        let out = if active.is_complete() {
            g.reshape(c, active.len(), 1)?
        } else {
            let nc = self.n_constraints();
            let flat = active.pairs.iter().map(|&(pos, j)| pos * nc + j).collect();
            let gathered = g.gather(c, flat)?;
            g.reshape(gathered, active.len(), 1)?
        };
        DiffFunction::new(g, out)
    }

    /// All `n_constraints` residuals of each listed sample, one row per sample.
    pub fn residual_matrix(&self, model: &dyn Model, w: &Vector, samples: &[usize]) -> Result<DenseMatrix> {
        let active = ActiveSet::full(samples.to_vec(), self.n_constraints());
        let values = evaluate(self, model, w, &active)?;
        DenseMatrix::from_row_major(samples.len(), self.n_constraints(), values.into_inner())
    }
}

/// Reads numeric sample rows from a comma-separated file. A first line that
/// does not parse as numbers is treated as a header.
pub fn samples_from_csv(path: &Path) -> Result<DenseMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("sample CSV"));
    }
    DenseMatrix::from_rows(&rows)
}

/// Active samples and, for each, the constraint indices kept.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    samples: Vec<usize>,
    /// `(position in samples, constraint index)`, sample-major.
    pairs: Vec<(usize, usize)>,
    n_constraints: usize,
}

impl ActiveSet {
    /// Every constraint of every listed sample.
    pub fn full(samples: Vec<usize>, n_constraints: usize) -> Self {
        let pairs = (0..samples.len()).flat_map(|p| (0..n_constraints).map(move |j| (p, j))).collect();
        ActiveSet { samples, pairs, n_constraints }
    }

    pub fn empty(n_constraints: usize) -> Self {
        ActiveSet { samples: Vec::new(), pairs: Vec::new(), n_constraints }
    }

    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    /// `(sample index, constraint index)` of each stacked residual.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|&(p, j)| (self.samples[p], j))
    }

    /// Number of stacked residuals.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn is_complete(&self) -> bool {
        self.pairs.len() == self.samples.len() * self.n_constraints
    }

    fn validate(&self, pool: &ConstraintPool) -> Result<()> {
        Error::check_len(pool.n_constraints(), self.n_constraints)?;
        if let Some(&k) = self.samples.iter().find(|&&k| k >= pool.len()) {
            return Err(Error::IndexOutOfRange { what: "constraint pool", index: k, len: pool.len() });
        }
        Ok(())
    }

    /// Short stable hash of the selection, for logs.
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for (k, j) in self.pairs() {
            text.push_str(&format!("{k}:{j};"));
        }
        crate::autodiff::layout_hash(&text)
    }
}

/// Stacked `C_jk(w)` over the active pairs.
pub fn evaluate(pool: &ConstraintPool, model: &dyn Model, w: &Vector, active: &ActiveSet) -> Result<Vector> {
    if active.samples.is_empty() {
        active.validate(pool)?;
        return Ok(Vector::zeros(0));
    }
    pool.constraint_function(model, active)?.value(w)
}

/// `batch` distinct samples drawn uniformly from `rng`, returned in ascending order.
pub fn select_random_with<R: Rng + ?Sized>(pool: &ConstraintPool, batch: usize, rng: &mut R) -> Result<ActiveSet> {
    if batch == 0 || batch > pool.len() {
        return Err(Error::OutOfRange { what: "constraint batch", value: batch, min: 1, max: pool.len() });
    }
    let mut picked = index::sample(rng, pool.len(), batch).into_vec();
    picked.sort_unstable();
    Ok(ActiveSet::full(picked, pool.n_constraints()))
}

pub fn select_random(pool: &ConstraintPool, batch: usize, seed: u64) -> Result<ActiveSet> {
    select_random_with(pool, batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median"));
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn median_abs(values: &[f64]) -> Result<f64> {
    median(&values.iter().map(|v| v.abs()).collect::<Vec<_>>())
}

/// The `n_keep` candidates with the largest per-sample median `|C_j|`,
/// ties going to the lower index; returned in ascending order.
pub fn top_by_median(candidates: &[usize], medians: &[f64], n_keep: usize) -> Result<Vec<usize>> {
    Error::check_len(candidates.len(), medians.len())?;
    if n_keep == 0 || n_keep > candidates.len() {
        return Err(Error::OutOfRange { what: "mined batch", value: n_keep, min: 1, max: candidates.len() });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| medians[b].total_cmp(&medians[a]).then(candidates[a].cmp(&candidates[b])));
    let mut kept: Vec<usize> = order[..n_keep].iter().map(|&i| candidates[i]).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Mining restricted to `candidates` (for example one random batch).
pub fn select_mined_from(pool: &ConstraintPool, model: &dyn Model, w: &Vector, candidates: &[usize], n_keep: usize) -> Result<ActiveSet> {
    if n_keep == 0 || n_keep > candidates.len() {
        return Err(Error::OutOfRange { what: "mined batch", value: n_keep, min: 1, max: candidates.len() });
    }
    let res = pool.residual_matrix(model, w, candidates)?;
    let medians = (0..res.rows()).map(|r| median_abs(res.row(r))).collect::<Result<Vec<_>>>()?;
    Ok(ActiveSet::full(top_by_median(candidates, &medians, n_keep)?, pool.n_constraints()))
}

pub fn select_mined(pool: &ConstraintPool, model: &dyn Model, w: &Vector, n_keep: usize) -> Result<ActiveSet> {
    let all: Vec<usize> = (0..pool.len()).collect();
    select_mined_from(pool, model, w, &all, n_keep)
}

/// Drops satisfied inequalities (`C_jk <= 0`); equalities are always kept.
pub fn filter_inequalities(pool: &ConstraintPool, model: &dyn Model, w: &Vector, active: &ActiveSet) -> Result<ActiveSet> {
    if pool.kinds.iter().all(|k| *k == ConstraintKind::Equality) {
        return Ok(active.clone());
    }
    let values = evaluate(pool, model, w, active)?;
    let pairs = active
        .pairs
        .iter()
        .zip(values.as_slice())
        .filter(|&(&(_, j), &c)| pool.kinds[j] == ConstraintKind::Equality || c > 0.0)
        .map(|(&p, _)| p)
        .collect();
    Ok(ActiveSet { samples: active.samples.clone(), pairs, n_constraints: active.n_constraints })
}

fn joint(pose: &[f64], j: usize) -> [f64; 3] {
    [pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Signed bone-length differences of one `17 x 3` pose, one per table row.
pub fn symmetry_residuals(pose: &[f64], table: &JointIndexTable) -> Result<Vector> {
    Error::check_len(joints::POSE_LEN, pose.len())?;
    if let Some(&bad) = table.rows.iter().flatten().find(|&&j| j >= joints::COUNT) {
        return Err(Error::IndexOutOfRange { what: "joint table", index: bad, len: joints::COUNT });
    }
    let out = table
        .rows
        .iter()
        .map(|r| distance(joint(pose, r[0]), joint(pose, r[1])) - distance(joint(pose, r[2]), joint(pose, r[3])))
        .collect();
    Vector::checked(out, "symmetry residuals")
}

/// `|w - c_i| - radius` for each center.
pub fn hypersphere_residuals(w: &Vector, centers: &[Vector], radius: f64) -> Result<Vector> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let mut out = Vec::with_capacity(centers.len());
    for c in centers {
        out.push(w.sub(c)?.norm() - radius);
    }
    Vector::checked(out, "hypersphere residuals")
}
