//! Small dense networks: matrices, MLPs with reverse-mode gradients, Adam with
//! global-norm clipping, and the MSE / softmax cross-entropy losses.
//!
//! Everything is plain `f64` on the CPU; networks are values that can be
//! cloned (target networks) and written to a simple binary weight file.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::from_values"));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.values.chunks_exact(self.cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &g) in self.values.chunks_exact(self.cols).zip(y) {
            if g == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// Raw logits; pair with [`cross_entropy_loss`].
    SoftmaxCe,
}

impl OutputActivation {
    fn tag(self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::SoftmaxCe => "softmax_ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("widths", "an MLP needs at least an input and an output width"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths", "widths must be >= 1"));
        }
        Ok(MlpSpec { widths, hidden: HiddenActivation::Relu, output })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// One affine layer: `y = W x + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { weights: DenseMatrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }
}

/// Multi-layer perceptron with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
    generation: u64,
}

/// Intermediates of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    generation: u64,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients { layers: mlp.layers.iter().map(|l| Dense::zeros(l.weights.cols, l.weights.rows)).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.values.iter_mut().zip(&b.weights.values) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.values.iter_mut().for_each(|x| *x *= k);
            l.bias.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.flat_iter().map(|g| g * g).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flat_iter().collect()
    }

    fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.values.iter().chain(&l.bias).copied())
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                Dense { weights: DenseMatrix { rows: fan_out, cols: fan_in, values }, bias: vec![0.0; fan_out] }
            })
            .collect();
        Mlp { spec, layers, generation: 0 }
    }

    /// All weights and biases zero.
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec.widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Mlp { spec, layers, generation: 0 }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != spec.widths.len() - 1 {
            return Err(Error::DimensionMismatch { expected: spec.widths.len() - 1, actual: layers.len() });
        }
        for (l, w) in layers.iter().zip(spec.widths.windows(2)) {
            if l.weights.cols != w[0] || l.weights.rows != w[1] || l.bias.len() != w[1] {
                return Err(Error::DimensionMismatch { expected: w[0] * w[1], actual: l.weights.values.len() });
            }
        }
        Ok(Mlp { spec, layers, generation: 0 })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.values.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.values.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), actual: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            l.weights.values.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&x);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let out = if i == last { z.clone() } else { z.iter().map(|v| v.max(0.0)).collect() };
            inputs.push(std::mem::replace(&mut x, out));
            pre.push(z);
        }
        Ok((x, ForwardCache { inputs, pre, generation: self.generation }))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&x);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            if i != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if output_grad.len() != self.spec.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.spec.output_dim(), actual: output_grad.len() });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_grad.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i != last {
                for (d, z) in delta.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.inputs[i];
            let g = &mut grads.layers[i];
            let cols = x.len();
            for (r, &d) in delta.iter().enumerate() {
                g.bias[r] = d;
                if d != 0.0 {
                    for (gw, xv) in g.weights.values[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                        *gw = d * xv;
                    }
                }
            }
            delta = self.layers[i].weights.matvec_t(&delta);
        }
        Ok((grads, delta))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim(), actual: input.len() });
        }
        Ok(())
    }

    /// Serialize: a one-line text header followed by little-endian `f64`s,
    /// each layer's weights (row-major) then its biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let widths: Vec<String> = self.spec.widths.iter().map(usize::to_string).collect();
        let mut out = format!("groundsim-mlp v1 widths={} hidden=relu output={}\n", widths.join(","), self.spec.output.tag())
            .into_bytes();
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not utf-8")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("groundsim-mlp") || parts.next() != Some("v1") {
            return Err("unrecognized header".into());
        }
        let (mut widths, mut output) = (None, None);
        for kv in parts {
            match kv.split_once('=') {
                Some(("widths", v)) => {
                    widths = Some(v.split(',').map(str::parse).collect::<std::result::Result<Vec<usize>, _>>().map_err(|e| e.to_string())?)
                }
                Some(("hidden", "relu")) => {}
                Some(("output", "identity")) => output = Some(OutputActivation::Identity),
                Some(("output", "softmax_ce")) => output = Some(OutputActivation::SoftmaxCe),
                _ => return Err(format!("unknown header field `{kv}`")),
            }
        }
        let spec = MlpSpec::new(widths.ok_or("missing widths")?, output.ok_or("missing output")?).map_err(|e| e.to_string())?;
        let body = &bytes[nl + 1..];
        let mut mlp = Mlp::zeros(spec);
        if body.len() != mlp.num_params() * 8 {
            return Err(format!("expected {} parameters, found {} bytes", mlp.num_params(), body.len()));
        }
        let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        mlp.set_params(&flat).map_err(|e| e.to_string())?;
        mlp.generation = 0;
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Mlp::from_bytes(&bytes).map_err(|reason| Error::format("weight", path, reason))
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: pred.len(), actual: target.len() });
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.into_iter().map(|d| 2.0 * d / n).collect()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy against a class index; gradient is `softmax - onehot`.
pub fn cross_entropy_loss(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= logits.len() {
        return Err(Error::DimensionMismatch { expected: logits.len(), actual: class });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[class] -= 1.0;
    Ok((lse - logits[class], grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Option<Gradients>,
    second: Option<Gradients>,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64, grad_clip: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        Ok(Adam { lr, grad_clip, beta1: 0.9, beta2: 0.999, eps: 1e-8, first: None, second: None, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Gradients after clipping to `grad_clip` global norm.
    pub fn clip(&self, grads: &Gradients) -> Gradients {
        let mut g = grads.clone();
        let norm = g.norm();
        if norm > self.grad_clip {
            g.scale(self.grad_clip / norm);
        }
        g
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        let g = self.clip(grads);
        self.steps += 1;
        let m = self.first.get_or_insert_with(|| Gradients::zeros_like(mlp));
        let v = self.second.get_or_insert_with(|| Gradients::zeros_like(mlp));
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((layer, gl), ml), vl) in mlp.layers_mut().iter_mut().zip(&g.layers).zip(&mut m.layers).zip(&mut v.layers) {
            let params = layer.weights.values.iter_mut().chain(layer.bias.iter_mut());
            let gs = gl.weights.values.iter().chain(&gl.bias);
            let ms = ml.weights.values.iter_mut().chain(ml.bias.iter_mut());
            let vs = vl.weights.values.iter_mut().chain(vl.bias.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
