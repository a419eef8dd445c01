//! Forward and reverse differentiation of functions of a flat parameter vector.
//!
//! A [`DiffFunction`] wraps a [`Graph`] and one output node. `rop` pushes a
//! tangent forward through the graph, `lop` and `gradient` run a reverse
//! sweep. For the many products a Krylov solve needs at one point, build a
//! [`Linearization`] once and reuse its cached primal values.

mod checkpoint;
mod graph;
mod model;

use std::sync::Arc;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Graph, Node};
pub use model::{layout_hash, LayerSlice, LinearReadout, MlpSpec, Model, ShiftModel};

use crate::error::{Error, Result};
use crate::linops::{DenseMatrix, Vector};

#[derive(Clone, Debug)]
pub struct DiffFunction {
    graph: Arc<Graph>,
    output: Node,
}

impl DiffFunction {
    pub fn new(graph: Graph, output: Node) -> Result<Self> {
        if output.0 >= graph.nodes.len() {
            return Err(Error::IndexOutOfRange { what: "graph node", index: output.0, len: graph.nodes.len() });
        }
        Ok(DiffFunction { graph: Arc::new(graph), output })
    }

    /// `f(w) = A w`.
    pub fn linear(a: DenseMatrix) -> Result<Self> {
        let mut g = Graph::new(a.cols());
        let p = g.param(0, a.cols(), 1)?;
        let out = g.linear_map(a, p)?;
        Self::new(g, out)
    }

    /// `f(w) = A w - t`.
    pub fn affine_residual(a: DenseMatrix, t: &[f64]) -> Result<Self> {
        Error::check_len(a.rows(), t.len())?;
        let mut g = Graph::new(a.cols());
        let p = g.param(0, a.cols(), 1)?;
        let m = a.rows();
        let aw = g.linear_map(a, p)?;
        let shift = DenseMatrix::from_row_major(m, 1, t.iter().map(|v| -v).collect())?;
        let out = g.add_const(aw, shift)?;
        Self::new(g, out)
    }

    pub fn n_params(&self) -> usize {
        self.graph.n_params()
    }

    pub fn n_outputs(&self) -> usize {
        let (r, c) = self.graph.shape(self.output);
        r * c
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self, w: &Vector) -> Result<Vector> {
        Error::check_len(self.n_params(), w.len())?;
        let mut vals = self.graph.forward(w.as_slice(), self.output);
        Vector::checked(vals.pop().unwrap_or_default(), "function evaluation")
    }

    pub fn gradient(&self, w: &Vector) -> Result<Vector> {
        if self.n_outputs() != 1 {
            return Err(Error::NotScalar(self.n_outputs()));
        }
        self.lop(w, &Vector::new(vec![1.0])?)
    }

    /// Jacobian times `v`.
    pub fn rop(&self, w: &Vector, v: &Vector) -> Result<Vector> {
        self.linearize(w)?.jvp(v)
    }

    /// `u^T` times the Jacobian.
    pub fn lop(&self, w: &Vector, u: &Vector) -> Result<Vector> {
        self.linearize(w)?.vjp(u)
    }

    pub fn linearize(&self, w: &Vector) -> Result<Linearization> {
        Error::check_len(self.n_params(), w.len())?;
        let vals = self.graph.forward(w.as_slice(), self.output);
        if vals[self.output.0].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("function evaluation"));
        }
        Ok(Linearization { f: self.clone(), w: w.as_slice().to_vec(), vals })
    }
}

/// A [`DiffFunction`] frozen at one parameter vector.
#[derive(Clone, Debug)]
pub struct Linearization {
    f: DiffFunction,
    w: Vec<f64>,
    vals: Vec<Vec<f64>>,
}

impl Linearization {
    pub fn n_params(&self) -> usize {
        self.f.n_params()
    }

    pub fn n_outputs(&self) -> usize {
        self.f.n_outputs()
    }

    pub fn point(&self) -> &[f64] {
        &self.w
    }

    pub fn value(&self) -> &[f64] {
        &self.vals[self.f.output.0]
    }

    pub fn jvp(&self, v: &Vector) -> Result<Vector> {
        Error::check_len(self.n_params(), v.len())?;
        Vector::checked(self.jvp_slice(v.as_slice()), "rop")
    }

    pub fn vjp(&self, u: &Vector) -> Result<Vector> {
        Error::check_len(self.n_outputs(), u.len())?;
        Vector::checked(self.vjp_slice(u.as_slice()), "lop")
    }

    /// Unchecked variant for operator kernels; lengths must already match.
    pub(crate) fn jvp_slice(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.n_params());
        self.f.graph.tangent(&self.w, &self.vals, v, self.f.output)
    }

    pub(crate) fn vjp_slice(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.n_outputs());
        self.f.graph.adjoint(&self.w, &self.vals, u, self.f.output)
    }
}
