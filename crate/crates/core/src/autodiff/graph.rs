//! Computation graphs over row-major matrices.
//!
//! Nodes are appended in topological order, so a forward sweep is a plain
//! loop over `nodes` and a reverse sweep walks it backwards. Every node value
//! is a `rows x cols` block; a batch of samples is one row per sample.

use crate::error::{Error, Result};
use crate::linops::DenseMatrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(DenseMatrix),
    Param {
        offset: usize,
    },
    /// `x W^T + b` with `W` stored row-major as `fan_out x fan_in` in the parameters.
    Affine {
        x: Node,
        weight: usize,
        bias: Option<usize>,
        fan_in: usize,
        fan_out: usize,
    },
    Relu(Node),
    Add(Node, Node),
    Sub(Node, Node),
    Scale(Node, f64),
    AddConst(Node, DenseMatrix),
    AddScalar(Node, f64),
    Square(Node),
    BroadcastRows(Node),
    /// Per row, Euclidean norms of consecutive column groups.
    GroupNorm(Node, usize),
    SelectCols(Node, Vec<usize>),
    /// Flat (row-major) element selection, producing a `1 x k` row.
    Gather(Node, Vec<usize>),
    /// Constant matrix times the flattened node, producing an `m x 1` column.
    LinearMap(DenseMatrix, Node),
    WeightedSumSquares(Node, Vec<f64>),
    Sum(Node),
    Reshape(Node),
    Concat(Vec<Node>),
}

#[derive(Clone, Debug)]
pub(crate) struct NodeDef {
    pub op: Op,
    pub rows: usize,
    pub cols: usize,
    /// Whether the value depends on the parameters at all.
    pub live: bool,
}

impl NodeDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// A differentiable expression of a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Graph {
    pub(crate) nodes: Vec<NodeDef>,
    n_params: usize,
}

impl Graph {
    pub fn new(n_params: usize) -> Self {
        Graph { nodes: Vec::new(), n_params }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn shape(&self, node: Node) -> (usize, usize) {
        let d = &self.nodes[node.0];
        (d.rows, d.cols)
    }

    fn def(&self, node: Node) -> Result<&NodeDef> {
        self.nodes.get(node.0).ok_or(Error::IndexOutOfRange { what: "graph node", index: node.0, len: self.nodes.len() })
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, live: bool) -> Node {
        self.nodes.push(NodeDef { op, rows, cols, live });
        Node(self.nodes.len() - 1)
    }

    fn check_params(&self, offset: usize, len: usize) -> Result<()> {
        if offset + len > self.n_params {
            return Err(Error::IndexOutOfRange { what: "parameter vector", index: offset + len - 1, len: self.n_params });
        }
        Ok(())
    }

    pub fn input(&mut self, value: DenseMatrix) -> Node {
        let (r, c) = (value.rows(), value.cols());
        self.push(Op::Input(value), r, c, false)
    }

    /// The parameter slice `offset..offset + rows * cols`, viewed as a matrix.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Node> {
        self.check_params(offset, rows * cols)?;
        Ok(self.push(Op::Param { offset }, rows, cols, true))
    }

    pub fn affine(&mut self, x: Node, weight: usize, bias: Option<usize>, fan_out: usize) -> Result<Node> {
        let d = self.def(x)?;
        let (rows, fan_in) = (d.rows, d.cols);
        self.check_params(weight, fan_in * fan_out)?;
        if let Some(b) = bias {
            self.check_params(b, fan_out)?;
        }
        Ok(self.push(Op::Affine { x, weight, bias, fan_in, fan_out }, rows, fan_out, true))
    }

    pub fn relu(&mut self, x: Node) -> Result<Node> {
        self.unary(x, Op::Relu(x))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Result<Node> {
        self.unary(x, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Node, c: DenseMatrix) -> Result<Node> {
        let d = self.def(x)?;
        Error::check_len(d.rows, c.rows())?;
        Error::check_len(d.cols, c.cols())?;
        self.unary(x, Op::AddConst(x, c))
    }

    pub fn add_scalar(&mut self, x: Node, c: f64) -> Result<Node> {
        self.unary(x, Op::AddScalar(x, c))
    }

    pub fn square(&mut self, x: Node) -> Result<Node> {
        self.unary(x, Op::Square(x))
    }

    /// Repeats a single-row node `rows` times.
    pub fn broadcast_rows(&mut self, x: Node, rows: usize) -> Result<Node> {
        let d = self.def(x)?;
        Error::check_len(1, d.rows)?;
        let (cols, live) = (d.cols, d.live);
        Ok(self.push(Op::BroadcastRows(x), rows, cols, live))
    }

    pub fn group_norm(&mut self, x: Node, group: usize) -> Result<Node> {
        let d = self.def(x)?;
        if group == 0 || d.cols % group != 0 {
            return Err(Error::InvalidArgument(format!("group size {group} does not divide {} columns", d.cols)));
        }
        let (rows, cols, live) = (d.rows, d.cols / group, d.live);
        Ok(self.push(Op::GroupNorm(x, group), rows, cols, live))
    }

    pub fn select_cols(&mut self, x: Node, cols: Vec<usize>) -> Result<Node> {
        let d = self.def(x)?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= d.cols) {
            return Err(Error::IndexOutOfRange { what: "column selection", index: bad, len: d.cols });
        }
        let (rows, live) = (d.rows, d.live);
        let n = cols.len();
        Ok(self.push(Op::SelectCols(x, cols), rows, n, live))
    }

    pub fn gather(&mut self, x: Node, flat: Vec<usize>) -> Result<Node> {
        let d = self.def(x)?;
        if let Some(&bad) = flat.iter().find(|&&i| i >= d.len()) {
            return Err(Error::IndexOutOfRange { what: "gather", index: bad, len: d.len() });
        }
        let live = d.live;
        let n = flat.len();
        Ok(self.push(Op::Gather(x, flat), 1, n, live))
    }

    pub fn linear_map(&mut self, a: DenseMatrix, x: Node) -> Result<Node> {
        let d = self.def(x)?;
        Error::check_len(a.cols(), d.len())?;
        let (m, live) = (a.rows(), d.live);
        Ok(self.push(Op::LinearMap(a, x), m, 1, live))
    }

    pub fn weighted_sum_squares(&mut self, x: Node, weights: Vec<f64>) -> Result<Node> {
        let d = self.def(x)?;
        Error::check_len(d.len(), weights.len())?;
        let live = d.live;
        Ok(self.push(Op::WeightedSumSquares(x, weights), 1, 1, live))
    }

    pub fn sum(&mut self, x: Node) -> Result<Node> {
        let live = self.def(x)?.live;
        Ok(self.push(Op::Sum(x), 1, 1, live))
    }

    pub fn reshape(&mut self, x: Node, rows: usize, cols: usize) -> Result<Node> {
        let d = self.def(x)?;
        Error::check_len(d.len(), rows * cols)?;
        let live = d.live;
        Ok(self.push(Op::Reshape(x), rows, cols, live))
    }

    /// Flattens and concatenates nodes into one row.
    pub fn concat(&mut self, parts: Vec<Node>) -> Result<Node> {
        let mut total = 0;
        let mut live = false;
        for &p in &parts {
            let d = self.def(p)?;
            total += d.len();
            live |= d.live;
        }
        Ok(self.push(Op::Concat(parts), 1, total, live))
    }

    fn unary(&mut self, x: Node, op: Op) -> Result<Node> {
        let d = self.def(x)?;
        let (r, c, live) = (d.rows, d.cols, d.live);
        Ok(self.push(op, r, c, live))
    }

    fn binary(&mut self, a: Node, b: Node, op: Op) -> Result<Node> {
        let (da, db) = (self.def(a)?, self.def(b)?);
        if (da.rows, da.cols) != (db.rows, db.cols) {
            return Err(Error::InvalidArgument(format!("shape mismatch {}x{} vs {}x{}", da.rows, da.cols, db.rows, db.cols)));
        }
        let (r, c, live) = (da.rows, da.cols, da.live || db.live);
        Ok(self.push(op, r, c, live))
    }

    /// Primal values of every node, up to and including `last`.
    pub(crate) fn forward(&self, w: &[f64], last: Node) -> Vec<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(last.0 + 1);
        for def in &self.nodes[..=last.0] {
            let out = match &def.op {
                Op::Input(m) => m.as_slice().to_vec(),
                Op::Param { offset } => w[*offset..*offset + def.len()].to_vec(),
                Op::Affine { x, weight, bias, fan_in, fan_out } => {
                    let xv = &vals[x.0];
                    let wt = &w[*weight..*weight + fan_in * fan_out];
                    let mut out = vec![0.0; def.len()];
                    for r in 0..def.rows {
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for o in 0..*fan_out {
                            let mut acc = bias.map_or(0.0, |b| w[b + o]);
                            for (wi, xi) in wt[o * fan_in..(o + 1) * fan_in].iter().zip(xr) {
                                acc += wi * xi;
                            }
                            out[r * fan_out + o] = acc;
                        }
                    }
                    out
                }
                Op::Relu(x) => vals[x.0].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Op::Add(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x - y).collect(),
                Op::Scale(x, c) => vals[x.0].iter().map(|v| c * v).collect(),
                Op::AddConst(x, c) => vals[x.0].iter().zip(c.as_slice()).map(|(v, k)| v + k).collect(),
                Op::AddScalar(x, c) => vals[x.0].iter().map(|v| v + c).collect(),
                Op::Square(x) => vals[x.0].iter().map(|v| v * v).collect(),
                Op::BroadcastRows(x) => vals[x.0].repeat(def.rows),
                Op::GroupNorm(x, g) => vals[x.0].chunks(*g).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
                Op::SelectCols(x, cols) => {
                    let src_cols = self.nodes[x.0].cols;
                    let xv = &vals[x.0];
                    (0..def.rows).flat_map(|r| cols.iter().map(move |&c| xv[r * src_cols + c])).collect()
                }
                Op::Gather(x, idx) => idx.iter().map(|&i| vals[x.0][i]).collect(),
                Op::LinearMap(a, x) => {
                    let mut out = vec![0.0; a.rows()];
                    a.matvec(&vals[x.0], &mut out);
                    out
                }
                Op::WeightedSumSquares(x, wts) => vec![vals[x.0].iter().zip(wts).map(|(v, k)| k * v * v).sum()],
                Op::Sum(x) => vec![vals[x.0].iter().sum()],
                Op::Reshape(x) => vals[x.0].clone(),
                Op::Concat(parts) => parts.iter().flat_map(|p| vals[p.0].iter().copied()).collect(),
            };
            vals.push(out);
        }
        vals
    }

    /// Tangent propagation along the parameter direction `dir`, given primal values.
    /// `None` stands for an identically zero tangent.
    pub(crate) fn tangent(&self, w: &[f64], vals: &[Vec<f64>], dir: &[f64], last: Node) -> Vec<f64> {
        let mut tan: Vec<Option<Vec<f64>>> = Vec::with_capacity(last.0 + 1);
        for (k, def) in self.nodes[..=last.0].iter().enumerate() {
            if !def.live {
                tan.push(None);
                continue;
            }
            let t = match &def.op {
                Op::Input(_) => None,
                Op::Param { offset } => Some(dir[*offset..*offset + def.len()].to_vec()),
                Op::Affine { x, weight, bias, fan_in, fan_out } => {
                    let xv = &vals[x.0];
                    let wt = &w[*weight..*weight + fan_in * fan_out];
                    let dwt = &dir[*weight..*weight + fan_in * fan_out];
                    let dx = tan[x.0].as_deref();
                    let mut out = vec![0.0; def.len()];
                    for r in 0..def.rows {
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for o in 0..*fan_out {
                            let mut acc = bias.map_or(0.0, |b| dir[b + o]);
                            let row = o * fan_in..(o + 1) * fan_in;
                            for (dwi, xi) in dwt[row.clone()].iter().zip(xr) {
                                acc += dwi * xi;
                            }
                            if let Some(dx) = dx {
                                for (wi, dxi) in wt[row].iter().zip(&dx[r * fan_in..(r + 1) * fan_in]) {
                                    acc += wi * dxi;
                                }
                            }
                            out[r * fan_out + o] = acc;
                        }
                    }
                    Some(out)
                }
                Op::Relu(x) => {
                    tan[x.0].as_ref().map(|dx| dx.iter().zip(&vals[x.0]).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect())
                }
                Op::Add(a, b) => combine(&tan[a.0], &tan[b.0], 1.0),
                Op::Sub(a, b) => combine(&tan[a.0], &tan[b.0], -1.0),
                Op::Scale(x, c) => tan[x.0].as_ref().map(|dx| dx.iter().map(|d| c * d).collect()),
                Op::AddConst(x, _) | Op::AddScalar(x, _) | Op::Reshape(x) => tan[x.0].clone(),
                Op::Square(x) => tan[x.0].as_ref().map(|dx| dx.iter().zip(&vals[x.0]).map(|(d, v)| 2.0 * v * d).collect()),
                Op::BroadcastRows(x) => tan[x.0].as_ref().map(|dx| dx.repeat(def.rows)),
                Op::GroupNorm(x, g) => tan[x.0].as_ref().map(|dx| {
                    vals[x.0]
                        .chunks(*g)
                        .zip(dx.chunks(*g))
                        .zip(&vals[k])
                        .map(|((xg, dg), &norm)| if norm > 0.0 { xg.iter().zip(dg).map(|(a, b)| a * b).sum::<f64>() / norm } else { 0.0 })
                        .collect()
                }),
                Op::SelectCols(x, cols) => tan[x.0].as_ref().map(|dx| {
                    let src_cols = self.nodes[x.0].cols;
                    (0..def.rows).flat_map(|r| cols.iter().map(move |&c| dx[r * src_cols + c])).collect()
                }),
                Op::Gather(x, idx) => tan[x.0].as_ref().map(|dx| idx.iter().map(|&i| dx[i]).collect()),
                Op::LinearMap(a, x) => tan[x.0].as_ref().map(|dx| {
                    let mut out = vec![0.0; a.rows()];
                    a.matvec(dx, &mut out);
                    out
                }),
                Op::WeightedSumSquares(x, wts) => {
                    tan[x.0].as_ref().map(|dx| vec![dx.iter().zip(&vals[x.0]).zip(wts).map(|((d, v), k)| 2.0 * k * v * d).sum()])
                }
                Op::Sum(x) => tan[x.0].as_ref().map(|dx| vec![dx.iter().sum()]),
                Op::Concat(parts) => Some(
                    parts
                        .iter()
                        .flat_map(|p| match &tan[p.0] {
                            Some(t) => t.clone(),
                            None => vec![0.0; self.nodes[p.0].len()],
                        })
                        .collect(),
                ),
            };
            tan.push(t);
        }
        tan.pop().flatten().unwrap_or_else(|| vec![0.0; self.nodes[last.0].len()])
    }

    /// Reverse sweep: accumulates `seed^T d(last)/dw` into a fresh gradient.
    pub(crate) fn adjoint(&self, w: &[f64], vals: &[Vec<f64>], seed: &[f64], last: Node) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; last.0 + 1];
        adj[last.0] = Some(seed.to_vec());
        for k in (0..=last.0).rev() {
            let def = &self.nodes[k];
            let Some(a) = adj[k].take() else { continue };
            if !def.live {
                continue;
            }
            match &def.op {
                Op::Input(_) => {}
                Op::Param { offset } => {
                    for (g, ai) in grad[*offset..*offset + def.len()].iter_mut().zip(&a) {
                        *g += ai;
                    }
                }
                Op::Affine { x, weight, bias, fan_in, fan_out } => {
                    let xv = &vals[x.0];
                    let wt = &w[*weight..*weight + fan_in * fan_out];
                    let want_dx = self.nodes[x.0].live;
                    let mut dx = if want_dx { vec![0.0; xv.len()] } else { Vec::new() };
                    for r in 0..def.rows {
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for o in 0..*fan_out {
                            let ao = a[r * fan_out + o];
                            if ao == 0.0 {
                                continue;
                            }
                            if let Some(b) = bias {
                                grad[b + o] += ao;
                            }
                            let gw = &mut grad[*weight + o * fan_in..*weight + (o + 1) * fan_in];
                            for (g, xi) in gw.iter_mut().zip(xr) {
                                *g += ao * xi;
                            }
                            if want_dx {
                                let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
                                for (d, wi) in dxr.iter_mut().zip(&wt[o * fan_in..(o + 1) * fan_in]) {
                                    *d += ao * wi;
                                }
                            }
                        }
                    }
                    if want_dx {
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Op::Relu(x) => {
                    let d = a.iter().zip(&vals[x.0]).map(|(ai, &v)| if v > 0.0 { *ai } else { 0.0 }).collect();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Add(p, q) => {
                    accumulate(&mut adj[q.0], a.clone());
                    accumulate(&mut adj[p.0], a);
                }
                Op::Sub(p, q) => {
                    accumulate(&mut adj[q.0], a.iter().map(|v| -v).collect());
                    accumulate(&mut adj[p.0], a);
                }
                Op::Scale(x, c) => accumulate(&mut adj[x.0], a.iter().map(|v| c * v).collect()),
                Op::AddConst(x, _) | Op::AddScalar(x, _) | Op::Reshape(x) => accumulate(&mut adj[x.0], a),
                Op::Square(x) => {
                    let d = a.iter().zip(&vals[x.0]).map(|(ai, v)| 2.0 * v * ai).collect();
                    accumulate(&mut adj[x.0], d);
                }
                Op::BroadcastRows(x) => {
                    let cols = def.cols;
                    let mut d = vec![0.0; cols];
                    for row in a.chunks(cols) {
                        for (di, ai) in d.iter_mut().zip(row) {
                            *di += ai;
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::GroupNorm(x, g) => {
                    let mut d = vec![0.0; vals[x.0].len()];
                    for (((dg, xg), ai), &norm) in d.chunks_mut(*g).zip(vals[x.0].chunks(*g)).zip(&a).zip(&vals[k]) {
                        if norm > 0.0 {
                            for (di, xi) in dg.iter_mut().zip(xg) {
                                *di = ai * xi / norm;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::SelectCols(x, cols) => {
                    let src_cols = self.nodes[x.0].cols;
                    let mut d = vec![0.0; vals[x.0].len()];
                    for r in 0..def.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            d[r * src_cols + c] += a[r * cols.len() + j];
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::Gather(x, idx) => {
                    let mut d = vec![0.0; vals[x.0].len()];
                    for (&i, ai) in idx.iter().zip(&a) {
                        d[i] += ai;
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::LinearMap(m, x) => {
                    let mut d = vec![0.0; m.cols()];
                    for (r, ar) in a.iter().enumerate() {
                        for (di, mij) in d.iter_mut().zip(m.row(r)) {
                            *di += ar * mij;
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::WeightedSumSquares(x, wts) => {
                    let d = vals[x.0].iter().zip(wts).map(|(v, k)| 2.0 * k * v * a[0]).collect();
                    accumulate(&mut adj[x.0], d);
                }
                Op::Sum(x) => accumulate(&mut adj[x.0], vec![a[0]; vals[x.0].len()]),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p.0].len();
                        accumulate(&mut adj[p.0], a[start..start + len].to_vec());
                        start += len;
                    }
                }
            }
        }
        grad
    }
}

fn combine(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>, sign: f64) -> Option<Vec<f64>> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.iter().map(|v| sign * v).collect()),
        (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x + sign * y).collect()),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, d: Vec<f64>) {
    match slot {
        None => *slot = Some(d),
        Some(acc) => {
            for (x, y) in acc.iter_mut().zip(&d) {
                *x += y;
            }
        }
    }
}
