//! Helpers shared by the integration tests: dense oracles built on nalgebra
//! and small random problem generators.

#![allow(dead_code)]

use kktrain::autodiff::{DiffFunction, Graph, MlpSpec, Model};
use kktrain::linops::{DenseMatrix, Vector};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn vector(x: &[f64]) -> Vector {
    Vector::from_slice(x).unwrap()
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_vec(n, n, gauss_vec(rng, n * n));
    g.qr().q()
}

/// `Q diag(eig) Q^T` with a random orthogonal `Q`.
pub fn symmetric_with_spectrum(rng: &mut impl Rng, eig: &[f64]) -> DMatrix<f64> {
    let q = random_orthogonal(rng, eig.len());
    let a = &q * DMatrix::from_diagonal(&DVector::from_row_slice(eig)) * q.transpose();
    (&a + a.transpose()) * 0.5
}

/// Minimum-length least-squares solution from an eigendecomposition,
/// dropping eigenvalues below `rel_cut * max|lambda|`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &[f64], rel_cut: f64) -> Vec<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let qtb = eig.eigenvectors.transpose() * DVector::from_row_slice(b);
    let scaled = DVector::from_iterator(
        qtb.len(),
        qtb.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| if l.abs() > rel_cut * max { c / l } else { 0.0 }),
    );
    (&eig.eigenvectors * scaled).iter().copied().collect()
}

pub fn rel_err(x: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A random MLP applied to a fixed input batch, flattened to a vector output.
pub struct RandomMlp {
    pub spec: MlpSpec,
    pub inputs: DenseMatrix,
    pub f: DiffFunction,
    pub w: Vector,
}

pub fn random_mlp(rng: &mut impl Rng, max_hidden: usize, width: usize, batch: usize) -> RandomMlp {
    let n_hidden = rng.gen_range(0..=max_hidden);
    let mut widths = vec![rng.gen_range(1..=4)];
    widths.extend((0..n_hidden).map(|_| rng.gen_range(1..=width)));
    widths.push(rng.gen_range(1..=3));
    let spec = MlpSpec::new(widths).unwrap();
    let inputs = DenseMatrix::from_row_major(batch, spec.input_dim(), gauss_vec(rng, batch * spec.input_dim())).unwrap();
    let mut g = Graph::new(spec.n_params());
    let x = g.input(inputs.clone());
    let out = spec.build(&mut g, x).unwrap();
    let flat = g.reshape(out, batch * spec.output_dim(), 1).unwrap();
    let f = DiffFunction::new(g, flat).unwrap();
    let base = spec.init_params(rng.gen());
    let w = Vector::new(base.as_slice().iter().map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
    RandomMlp { spec, inputs, f, w }
}

/// `1/2 |f(w) - y|^2` on top of a random MLP.
pub fn random_mlp_loss(rng: &mut impl Rng, max_hidden: usize, width: usize, batch: usize) -> (DiffFunction, Vector) {
    let m = random_mlp(rng, max_hidden, width, batch);
    let n_out = m.f.n_outputs();
    let mut g = Graph::new(m.spec.n_params());
    let x = g.input(m.inputs.clone());
    let out = m.spec.build(&mut g, x).unwrap();
    let y = g.input(DenseMatrix::from_row_major(batch, m.spec.output_dim(), gauss_vec(rng, n_out)).unwrap());
    let d = g.sub(out, y).unwrap();
    let sq = g.square(d).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    (DiffFunction::new(g, half).unwrap(), m.w)
}

/// Unit-norm random direction.
pub fn unit_direction(rng: &mut impl Rng, n: usize) -> Vector {
    let v = gauss_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Vector::new(v.into_iter().map(|x| x / norm).collect()).unwrap()
}

/// Central difference `(f(w + h v) - f(w - h v)) / 2h`.
pub fn central_difference(f: &DiffFunction, w: &Vector, v: &Vector, h: f64) -> Vec<f64> {
    let plus = f.value(&w.add(&v.scale(h).unwrap()).unwrap()).unwrap();
    let minus = f.value(&w.sub(&v.scale(h).unwrap()).unwrap()).unwrap();
    plus.as_slice().iter().zip(minus.as_slice()).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Straight-line MLP evaluation, independent of the graph machinery.
/// Returns the flattened outputs and every hidden pre-activation.
pub fn mlp_reference(spec: &MlpSpec, w: &[f64], inputs: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let layers = spec.layout();
    let mut out = Vec::new();
    let mut pre = Vec::new();
    for r in 0..inputs.rows() {
        let mut h = inputs.row(r).to_vec();
        for (li, l) in layers.iter().enumerate() {
            let mut next = Vec::with_capacity(l.fan_out);
            for o in 0..l.fan_out {
                let mut acc = w[l.bias_offset + o];
                for (i, hi) in h.iter().enumerate() {
                    acc += w[l.weight_offset + o * l.fan_in + i] * hi;
                }
                next.push(acc);
            }
            if li + 1 < layers.len() {
                pre.extend_from_slice(&next);
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            h = next;
        }
        out.extend(h);
    }
    (out, pre)
}

/// True when no ReLU changes state anywhere on the segment `w +- h v`,
/// so central differences see a smooth function.
pub fn smooth_along(spec: &MlpSpec, inputs: &DenseMatrix, w: &Vector, v: &Vector, h: f64) -> bool {
    let at = |t: f64| {
        let p: Vec<f64> = w.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a + t * b).collect();
        mlp_reference(spec, &p, inputs).1
    };
    let (lo, mid, hi) = (at(-h), at(0.0), at(h));
    lo.iter().zip(&mid).zip(&hi).all(|((a, b), c)| (*a > 0.0) == (*b > 0.0) && (*b > 0.0) == (*c > 0.0) && b.abs() > 1e-3 * h)
}

/// `[[top, jc^T], [jc, 0]]` assembled densely.
pub fn kkt_blocks(top: &DMatrix<f64>, jc: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (top.nrows(), jc.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(top);
    k.view_mut((0, n), (n, m)).copy_from(&jc.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(jc);
    k
}

pub fn gauss_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_vec(rows, cols, gauss_vec(rng, rows * cols))
}

/// `A w - t` as a differentiable function with Jacobian exactly `A`.
pub fn affine_fn(a: &DMatrix<f64>, t: &[f64]) -> DiffFunction {
    DiffFunction::affine_residual(from_na(a), t).unwrap()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
