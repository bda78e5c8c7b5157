//! Dense feedforward networks with batched reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! `out x in` weight matrix row-major followed by its bias.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Linear,
    /// `scale * tanh(z)`
    Tanh { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
    output: OutputActivation,
}

/// Intermediate values of a batched forward pass, kept for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DenseNet {
    /// Fan-in uniform initialization: `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims, output)?;
        for l in 0..net.layer_count() {
            let bound = 1.0 / (net.dims[l] as f64).sqrt();
            let (start, end) = (net.offsets[l], net.offsets[l + 1]);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], output: OutputActivation) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        Ok(DenseNet {
            dims: dims.to_vec(),
            params: vec![0.0; *offsets.last().unwrap()],
            offsets,
            output,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                expected: self.params.len(),
                found: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Weight matrix (row-major `out x in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let s = self.offsets[l];
        (&self.params[s..s + i * o], &self.params[s + i * o..s + i * o + o])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let s = self.offsets[l];
        let (w, b) = self.params[s..s + i * o + o].split_at_mut(i * o);
        (w, b)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_batch(input, 1)?.output)
    }

    /// Forward pass over `batch` row-major input rows.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<ForwardCache, NnError> {
        let expected = batch * self.input_dim();
        if input.len() != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                found: input.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layer_count());
        let mut pre = Vec::with_capacity(self.layer_count());
        let mut x = input.to_vec();
        for l in 0..self.layer_count() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = vec![0.0; batch * o];
            gemm(batch, i, o, &x, i as isize, 1, w, 1, i as isize, &mut z);
            for row in z.chunks_exact_mut(o) {
                for (zj, bj) in row.iter_mut().zip(b) {
                    *zj += bj;
                }
            }
            let a: Vec<f64> = if l + 1 < self.layer_count() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                match self.output {
                    OutputActivation::Linear => z.clone(),
                    OutputActivation::Tanh { scale } => z.iter().map(|&v| scale * v.tanh()).collect(),
                }
            };
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        Ok(ForwardCache {
            batch,
            inputs,
            pre,
            output: x,
        })
    }

    /// Gradients of a scalar loss given `dL/d(output)` for every batch row.
    /// Returns the flat parameter gradient and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let batch = cache.batch;
        let expected = batch * self.output_dim();
        if output_grad.len() != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                found: output_grad.len(),
            });
        }
        let last = self.layer_count() - 1;
        let mut dz: Vec<f64> = match self.output {
            OutputActivation::Linear => output_grad.to_vec(),
            OutputActivation::Tanh { scale } => output_grad
                .iter()
                .zip(&cache.pre[last])
                .map(|(g, &z)| {
                    let t = z.tanh();
                    g * scale * (1.0 - t * t)
                })
                .collect(),
        };
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..self.layer_count()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let s = self.offsets[l];
            let x = &cache.inputs[l];
            {
                let (gw, gb) = grads[s..s + i * o + o].split_at_mut(i * o);
                // dW = dZ^T X
                gemm(o, batch, i, &dz, 1, o as isize, x, i as isize, 1, gw);
                for row in dz.chunks_exact(o) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            // dX = dZ W
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; batch * i];
            gemm(batch, o, i, &dz, o as isize, 1, w, i as isize, 1, &mut dx);
            if l > 0 {
                for (d, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dz = dx;
        }
        Ok((grads, dz))
    }
}

/// `target <- tau * live + (1 - tau) * target`
pub fn soft_update(target: &mut DenseNet, live: &DenseNet, tau: f64) {
    assert_eq!(target.dims, live.dims, "soft update between different shapes");
    if tau == 1.0 {
        target.params.copy_from_slice(&live.params);
        return;
    }
    for (t, l) in target.params.iter_mut().zip(&live.params) {
        *t = tau * l + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

/// Gradient-descent state with optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: f64, param_count: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { param_count } else { 0 };
        Optimizer {
            kind,
            lr,
            clip_norm,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    /// Applies one descent step in place; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * scale * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let t = self.t.min(i32::MAX as u64) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let g = g * scale;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        norm
    }
}
