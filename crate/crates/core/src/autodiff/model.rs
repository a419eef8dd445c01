use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{DiffFunction, Graph, Node};
use crate::error::{Error, Result};
use crate::linops::{DenseMatrix, Vector};

/// A parametric map `phi(x; w)` applied row-wise to a batch of inputs.
pub trait Model: Send + Sync + std::fmt::Debug {
    fn n_params(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Appends `phi` to `g` for an input node of shape `batch x input_dim`
    /// and returns the `batch x output_dim` output node.
    fn build(&self, g: &mut Graph, x: Node) -> Result<Node>;

    /// Stable textual description of the parameter layout.
    fn descriptor(&self) -> String;

    fn layout_hash(&self) -> u64 {
        layout_hash(&self.descriptor())
    }

    /// `phi` evaluated on every row of `inputs`.
    fn forward(&self, w: &Vector, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        Error::check_len(self.input_dim(), inputs.cols())?;
        let mut g = Graph::new(self.n_params());
        let x = g.input(inputs.clone());
        let out = self.build(&mut g, x)?;
        let f = DiffFunction::new(g, out)?;
        DenseMatrix::from_row_major(inputs.rows(), self.output_dim(), f.value(w)?.into_inner())
    }
}

/// First eight bytes of the SHA-256 of a layout descriptor, little-endian.
pub fn layout_hash(descriptor: &str) -> u64 {
    let digest = Sha256::digest(descriptor.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Where one affine layer's weights and biases sit in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlice {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected network with ReLU between affine layers and a linear output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("MLP widths must have at least two entries, all >= 1, got {widths:?}")));
        }
        Ok(MlpSpec { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Weights (row-major, `fan_out x fan_in`) then biases, layer by layer.
    pub fn layout(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let slice = LayerSlice { weight_offset: offset, bias_offset: offset + fan_in * fan_out, fan_in, fan_out };
                offset += (fan_in + 1) * fan_out;
                slice
            })
            .collect()
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; self.n_params()];
        for layer in self.layout() {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut w[layer.weight_offset..layer.bias_offset] {
                *x = normal.sample(&mut rng);
            }
        }
        Vector::new(w).expect("finite initialization")
    }
}

impl Model for MlpSpec {
    fn n_params(&self) -> usize {
        self.widths.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    fn build(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let layers = self.layout();
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = g.affine(h, layer.weight_offset, Some(layer.bias_offset), layer.fan_out)?;
            if i + 1 < layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    fn descriptor(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("mlp-relu:{}", w.join(","))
    }
}

/// `phi(x; w) = w - x`: the parameters are the point itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftModel {
    pub dim: usize,
}

impl Model for ShiftModel {
    fn n_params(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn build(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let (rows, _) = g.shape(x);
        let p = g.param(0, 1, self.dim)?;
        let b = g.broadcast_rows(p, rows)?;
        g.sub(b, x)
    }

    fn descriptor(&self) -> String {
        format!("shift:{}", self.dim)
    }
}

/// `phi([a, b]; w) = a . w - b` for input rows `[a_1 .. a_dim, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearReadout {
    pub dim: usize,
}

impl Model for LinearReadout {
    fn n_params(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim + 1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn build(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let a = g.select_cols(x, (0..self.dim).collect())?;
        let b = g.select_cols(x, vec![self.dim])?;
        let aw = g.affine(a, 0, None, 1)?;
        g.sub(aw, b)
    }

    fn descriptor(&self) -> String {
        format!("linear-readout:{}", self.dim)
    }
}
