//! Dense vectors and the implicit symmetric operator abstraction.
//!
//! Solvers only ever see a [`LinearOperator`]: a dimension and a matvec.
//! [`DenseMatrix`] exists so tests can materialize an operator and compare it
//! against hand-assembled blocks; nothing on the solve path builds one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default refusal threshold for [`materialize`].
pub const DEFAULT_MATERIALIZE_CAP: usize = 2048;

/// A finite-valued vector of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Vector(data))
        } else {
            Err(Error::NonFinite("Vector::new"))
        }
    }

    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(data.to_vec())
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[i] = 1.0;
        v
    }

    /// Wraps data produced by library kernels, checking finiteness.
    pub(crate) fn checked(data: Vec<f64>, ctx: &'static str) -> Result<Self> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Vector(data))
        } else {
            Err(Error::NonFinite(ctx))
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        Error::check_len(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) -> Result<()> {
        Error::check_len(self.len(), x.len())?;
        axpy(alpha, &x.0, &mut self.0);
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("Vector::axpy"))
        }
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + b, "Vector::add")
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a - b, "Vector::sub")
    }

    pub fn scale(&self, alpha: f64) -> Result<Vector> {
        Vector::checked(self.0.iter().map(|x| alpha * x).collect(), "Vector::scale")
    }

    pub fn concat(&self, tail: &Vector) -> Vector {
        let mut data = Vec::with_capacity(self.len() + tail.len());
        data.extend_from_slice(&self.0);
        data.extend_from_slice(&tail.0);
        Vector(data)
    }

    pub fn split_at(&self, mid: usize) -> Result<(Vector, Vector)> {
        if mid > self.len() {
            return Err(Error::IndexOutOfRange { what: "vector split", index: mid, len: self.len() });
        }
        let (a, b) = self.0.split_at(mid);
        Ok((Vector(a.to_vec()), Vector(b.to_vec())))
    }

    fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64, ctx: &'static str) -> Result<Vector> {
        Error::check_len(self.len(), other.len())?;
        Vector::checked(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(), ctx)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, scaled to avoid overflow on large entries.
pub(crate) fn norm2(a: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let inv = 1.0 / scale;
    let s: f64 =
        if inv.is_finite() { a.iter().map(|x| (x * inv) * (x * inv)).sum() } else { a.iter().map(|x| (x / scale) * (x / scale)).sum() };
    scale * s.sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix. Test oracle and small-problem plumbing only.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_len(rows * cols, data.len())?;
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            Error::check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        Error::check_len(self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = dot(self.row(r), x);
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        Error::check_len(self.rows, other.rows)?;
        Error::check_len(self.cols, other.cols)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// An implicit square operator exposing only its action on vectors.
///
/// Implementations must be deterministic and, for everything the solvers
/// consume, symmetric. `matvec` takes `&self` so read-only operators can be
/// probed from several threads at once.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// Writes `B x` into `y`. Both slices have length `dim()`.
    fn matvec(&self, x: &[f64], y: &mut [f64]);
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        (**self).matvec(x, y)
    }
}

pub fn apply(op: &dyn LinearOperator, v: &Vector) -> Result<Vector> {
    Error::check_len(op.dim(), v.len())?;
    let mut out = vec![0.0; op.dim()];
    op.matvec(v.as_slice(), &mut out);
    Vector::checked(out, "LinearOperator::matvec")
}

pub fn materialize(op: &dyn LinearOperator) -> Result<DenseMatrix> {
    materialize_with_cap(op, DEFAULT_MATERIALIZE_CAP)
}

/// Builds the dense matrix whose column `i` is `B e_i`.
pub fn materialize_with_cap(op: &dyn LinearOperator, cap: usize) -> Result<DenseMatrix> {
    let n = op.dim();
    if n > cap {
        return Err(Error::MaterializeCap { dim: n, cap });
    }
    let mut m = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.matvec(&e, &mut col);
        e[j] = 0.0;
        for (i, &c) in col.iter().enumerate() {
            m.set(i, j, c);
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug)]
pub struct IdentityOperator(pub usize);

impl LinearOperator for IdentityOperator {
    fn dim(&self) -> usize {
        self.0
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ZeroOperator(pub usize);

impl LinearOperator for ZeroOperator {
    fn dim(&self) -> usize {
        self.0
    }
    fn matvec(&self, _x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct DiagonalOperator(pub Vec<f64>);

impl LinearOperator for DiagonalOperator {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.0) {
            *yi = d * xi;
        }
    }
}

/// A square dense matrix seen as an operator.
#[derive(Clone, Debug)]
pub struct DenseOperator(DenseMatrix);

impl DenseOperator {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        Error::check_len(m.rows(), m.cols())?;
        Ok(DenseOperator(m))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.rows()
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        self.0.matvec(x, y)
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnOperator { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

/// Largest normalized asymmetry `|<u,Bv> - <Bu,v>| / (|u| |v| est|B|)` over
/// `trials` random Gaussian probe pairs. `est|B|` is the largest `|Bu|/|u|`
/// seen across the probes.
pub fn symmetry_defect(op: &dyn LinearOperator, trials: usize, seed: u64) -> f64 {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect() };
    let mut bu = vec![0.0; n];
    let mut bv = vec![0.0; n];
    let mut pairs = Vec::with_capacity(trials);
    let mut op_norm = 0.0f64;
    for _ in 0..trials {
        let u = gauss();
        let v = gauss();
        op.matvec(&u, &mut bu);
        op.matvec(&v, &mut bv);
        op_norm = op_norm.max(norm2(&bu) / norm2(&u)).max(norm2(&bv) / norm2(&v));
        pairs.push((dot(&u, &bv) - dot(&bu, &v), norm2(&u) * norm2(&v)));
    }
    if op_norm == 0.0 {
        return 0.0;
    }
    pairs.iter().fold(0.0, |m, (d, uv)| m.max(d.abs() / (uv * op_norm)))
}
