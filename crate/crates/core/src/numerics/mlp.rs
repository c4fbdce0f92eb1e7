//! Dense feed-forward network with cached activations and hand-written
//! reverse pass.
//!
//! Weights are stored input-major (`in_dim x out_dim`, row-major) so a
//! forward pass is a sum of weight rows scaled by the input entries. Sparse
//! inputs such as binary exposure rows skip their zero entries entirely.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

use super::adam::{ParamGroup, Trainable};
use super::matrix::{dot, DenseMatrix, DenseVector};
use super::rng::Rng;
use super::{leaky_relu, sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// Slope 0.01 on the negative side.
    LeakyRelu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu => leaky_relu(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(z),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// `in_dim x out_dim`, row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
    #[serde(skip)]
    grad_w: Vec<f64>,
    #[serde(skip)]
    grad_b: Vec<f64>,
}

impl Layer {
    fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: Option<&mut Rng>) -> Self {
        let mut weights = vec![0.0; in_dim * out_dim];
        if let Some(rng) = rng {
            let limit = match activation {
                Activation::LeakyRelu => (6.0 / in_dim as f64).sqrt(),
                _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            };
            for w in &mut weights {
                *w = (2.0 * rng.uniform() - 1.0) * limit;
            }
        }
        Self {
            in_dim,
            out_dim,
            activation,
            weights,
            biases: vec![0.0; out_dim],
            grad_w: vec![0.0; in_dim * out_dim],
            grad_b: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Weight connecting input `i` to output `o`.
    pub fn weight(&self, i: usize, o: usize) -> f64 {
        self.weights[i * self.out_dim + o]
    }

    pub fn set_weight(&mut self, i: usize, o: usize, v: f64) {
        self.weights[i * self.out_dim + o] = v;
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn grad_weights(&self) -> &[f64] {
        &self.grad_w
    }

    pub fn grad_biases(&self) -> &[f64] {
        &self.grad_b
    }

    fn ensure_grad_buffers(&mut self) {
        if self.grad_w.len() != self.weights.len() {
            self.grad_w = vec![0.0; self.weights.len()];
        }
        if self.grad_b.len() != self.biases.len() {
            self.grad_b = vec![0.0; self.biases.len()];
        }
    }

    /// Returns `(pre_activation, output)`.
    fn forward(&self, x: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        let batch = x.rows();
        let mut pre = DenseMatrix::zeros(batch, self.out_dim);
        for b in 0..batch {
            let z = pre.row_mut(b);
            z.copy_from_slice(&self.biases);
            for (k, &xk) in x.row(b).iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let w = &self.weights[k * self.out_dim..(k + 1) * self.out_dim];
                for (zo, wo) in z.iter_mut().zip(w) {
                    *zo += xk * wo;
                }
            }
        }
        let mut out = pre.clone();
        if self.activation != Activation::Identity {
            for v in out.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
        }
        (pre, out)
    }
}

#[derive(Debug, Clone)]
struct Cache {
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
    outputs: Vec<DenseMatrix>,
}

/// Multi-layer perceptron: affine layers, LeakyReLU between them and a
/// caller-chosen activation on the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<Cache>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, randomly initialized.
    pub fn new(sizes: &[usize], output: Activation, rng: &mut Rng) -> Result<Self> {
        Self::build(sizes, output, Some(rng))
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize], output: Activation) -> Result<Self> {
        Self::build(sizes, output, None)
    }

    fn build(sizes: &[usize], output: Activation, mut rng: Option<&mut Rng>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid mlp sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { Activation::LeakyRelu };
                Layer::new(sizes[l], sizes[l + 1], act, rng.as_deref_mut())
            })
            .collect();
        Ok(Self { layers, cache: None })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Forward one input, caching activations for [`Mlp::backward`].
    pub fn forward(&mut self, x: &[f64]) -> Result<DenseVector> {
        let xm = DenseMatrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&xm)?.into_vec())
    }

    /// Forward a batch (one sample per row), caching activations.
    pub fn forward_batch(&mut self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim() {
            return Err(shape_err!("mlp expects {} inputs, got {}", self.input_dim(), x.cols()));
        }
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let (pre, out) = layer.forward(&h);
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = out.clone();
            cache.outputs.push(out);
        }
        self.cache = Some(cache);
        Ok(h)
    }

    /// Read-only evaluation without caching.
    pub fn predict(&self, x: &[f64]) -> Result<DenseVector> {
        let xm = DenseMatrix::new(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&xm)?.into_vec())
    }

    pub fn predict_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim() {
            return Err(shape_err!("mlp expects {} inputs, got {}", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h).1;
        }
        Ok(h)
    }

    /// Accumulate parameter gradients for the cached forward pass and return
    /// the gradient with respect to the input.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<DenseVector> {
        let up = DenseMatrix::new(1, upstream.len(), upstream.to_vec())?;
        Ok(self.backward_batch(&up)?.into_vec())
    }

    pub fn backward_batch(&mut self, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("mlp backward called without a cached forward pass".into()))?;
        let batch = cache.inputs[0].rows();
        if upstream.shape() != (batch, self.output_dim()) {
            return Err(shape_err!(
                "upstream gradient {:?}, expected {:?}",
                upstream.shape(),
                (batch, self.output_dim())
            ));
        }
        let mut grad = upstream.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            layer.ensure_grad_buffers();
            let (x, pre, out) = (&cache.inputs[l], &cache.pre[l], &cache.outputs[l]);
            if layer.activation != Activation::Identity {
                for ((g, z), y) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()).zip(out.as_slice()) {
                    *g *= layer.activation.derivative(*z, *y);
                }
            }
            let out_dim = layer.out_dim;
            let mut dx = DenseMatrix::zeros(batch, layer.in_dim);
            for b in 0..batch {
                let dz = grad.row(b);
                for (gb, d) in layer.grad_b.iter_mut().zip(dz) {
                    *gb += d;
                }
                let xb = x.row(b);
                let dxb = dx.row_mut(b);
                for k in 0..layer.in_dim {
                    let w = &layer.weights[k * out_dim..(k + 1) * out_dim];
                    dxb[k] = dot(w, dz);
                    let xk = xb[k];
                    if xk != 0.0 {
                        let gw = &mut layer.grad_w[k * out_dim..(k + 1) * out_dim];
                        for (g, d) in gw.iter_mut().zip(dz) {
                            *g += xk * d;
                        }
                    }
                }
            }
            grad = dx;
        }
        Ok(grad)
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.ensure_grad_buffers();
            l.grad_w.iter_mut().for_each(|g| *g = 0.0);
            l.grad_b.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Parameters flattened layer by layer (weights then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            if l.grad_w.len() == l.weights.len() {
                out.extend_from_slice(&l.grad_w);
                out.extend_from_slice(&l.grad_b);
            } else {
                out.extend(std::iter::repeat_n(0.0, l.weights.len() + l.biases.len()));
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err!("expected {} parameters, got {}", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

impl Trainable for Mlp {
    fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
        let mut groups = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            l.ensure_grad_buffers();
            groups.push(ParamGroup { params: &mut l.weights, grads: &mut l.grad_w });
            groups.push(ParamGroup { params: &mut l.biases, grads: &mut l.grad_b });
        }
        groups
    }
}
