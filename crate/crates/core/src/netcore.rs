//! Fully-connected network with per-neuron masking and hand-written backprop.
//!
//! Summation order is fixed so results are reproducible bit-for-bit:
//! a pre-activation is `(sum over inputs in ascending index of w * x) + b`,
//! weight gradients sum over the batch in ascending sample order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlpsError, Result};
use crate::sparsity::UnitMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
    /// Raw class scores fed into softmax cross-entropy. Final layer only.
    SoftmaxLogits,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::SoftmaxLogits => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::SoftmaxLogits),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// A validated stack of layers. Every layer except the last is hidden and its
/// neurons are the sparsifiable units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    layers: Vec<LayerSpec>,
}

impl Arch {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FlpsError::structural("architecture has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(FlpsError::structural(format!("layer {i} has a zero dimension")));
            }
            let last = i + 1 == layers.len();
            if last != (l.activation == Activation::SoftmaxLogits) {
                return Err(FlpsError::structural(
                    "softmax-logits must be the activation of the final layer and only there",
                ));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(FlpsError::structural(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    layers[i - 1].out_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// ReLU MLP: `input -> hidden[0] -> ... -> classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == dims.len() { Activation::SoftmaxLogits } else { Activation::Relu },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }

    /// Total number of sparsifiable units (J).
    pub fn unit_count(&self) -> usize {
        self.hidden_widths().iter().sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FlpsError::structural(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows == 0 || inputs.rows != labels.len() {
            return Err(FlpsError::structural(format!(
                "batch has {} input rows and {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major: row `o` holds the incoming weights of unit `o`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    #[inline]
    pub fn w(&self, o: usize, c: usize) -> f64 {
        self.weights[o * self.in_dim + c]
    }
}

/// Parameters of one network, one entry per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

/// Gradients share the parameter layout.
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn zeros(arch: &Arch) -> Self {
        Self {
            layers: arch
                .layers()
                .iter()
                .map(|l| LayerParams {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: vec![0.0; l.in_dim * l.out_dim],
                    bias: vec![0.0; l.out_dim],
                })
                .collect(),
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams { in_dim: l.in_dim, out_dim: l.out_dim, weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    /// Uniform in `±sqrt(6 / (in + out))` per layer, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for layer in &mut p.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn check_shape(&self, arch: &Arch) -> Result<()> {
        if self.layers.len() != arch.layers().len() {
            return Err(FlpsError::structural(format!(
                "parameter set has {} layers, architecture has {}",
                self.layers.len(),
                arch.layers().len()
            )));
        }
        for (i, (p, l)) in self.layers.iter().zip(arch.layers()).enumerate() {
            if p.in_dim != l.in_dim
                || p.out_dim != l.out_dim
                || p.weights.len() != l.in_dim * l.out_dim
                || p.bias.len() != l.out_dim
            {
                return Err(FlpsError::structural(format!("layer {i} parameters do not match its spec")));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.weights.len() == b.weights.len()
            })
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    /// Elementwise combination of two congruent sets.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if !self.same_shape(other) {
            return Err(FlpsError::structural("parameter sets differ in shape"));
        }
        let mut out = self.clone();
        for (o, b) in out.values_mut().zip(other.values()) {
            *o = f(*o, *b);
        }
        Ok(out)
    }

    pub fn hadamard(&self, mask: &ParamSet) -> Result<ParamSet> {
        self.zip_map(mask, |a, m| a * m)
    }

    /// Round every entry through `f32`. Emulates single-precision storage.
    pub fn round_to_f32(&mut self) {
        for v in self.values_mut() {
            *v = *v as f32 as f64;
        }
    }

    /// SHA-256 over the little-endian bytes of every entry.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.values() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Masked parameters actually used in the pass.
    pub effective: ParamSet,
    /// Input to each layer (`inputs[0]` is the batch).
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
}

fn check_batch(arch: &Arch, inputs: &Matrix) -> Result<()> {
    if inputs.cols != arch.input_dim() {
        return Err(FlpsError::structural(format!(
            "batch has {} features, network expects {}",
            inputs.cols,
            arch.input_dim()
        )));
    }
    Ok(())
}

/// Forward pass of the masked network `params ⊙ mask`. Returns the logits.
pub fn forward(arch: &Arch, params: &ParamSet, mask: &UnitMask, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    params.check_shape(arch)?;
    mask.check(arch)?;
    check_batch(arch, inputs)?;
    let effective = params.hadamard(&mask.param_mask(arch))?;

    let mut layer_inputs = Vec::with_capacity(arch.layers().len());
    let mut pre = Vec::with_capacity(arch.layers().len());
    let mut x = inputs.clone();
    for (spec, layer) in arch.layers().iter().zip(&effective.layers) {
        let mut z = Matrix::zeros(x.rows, spec.out_dim);
        for n in 0..x.rows {
            let xr = x.row(n);
            for o in 0..spec.out_dim {
                let wr = &layer.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                let mut acc = 0.0;
                for (w, xv) in wr.iter().zip(xr) {
                    acc += w * xv;
                }
                z.data[n * spec.out_dim + o] = acc + layer.bias[o];
            }
        }
        let a = match spec.activation {
            Activation::Relu => Matrix {
                rows: z.rows,
                cols: z.cols,
                data: z.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            },
            Activation::Identity | Activation::SoftmaxLogits => z.clone(),
        };
        layer_inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    Ok((x, ForwardCache { effective, inputs: layer_inputs, pre }))
}

/// Mean softmax cross-entropy, its gradient w.r.t. the logits, and the
/// fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, f64)> {
    if logits.rows != labels.len() || logits.rows == 0 {
        return Err(FlpsError::structural("logit rows and label count differ"));
    }
    let b = logits.rows as f64;
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut delta = Matrix::zeros(logits.rows, logits.cols);
    for (n, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(FlpsError::structural(format!("label {y} out of range for {} classes", logits.cols)));
        }
        let row = logits.row(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        for (c, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            let t = if c == y { 1.0 } else { 0.0 };
            delta.data[n * logits.cols + c] = (p - t) / b;
        }
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(FlpsError::NonFinite { what: "task loss", ctx: Default::default() });
    }
    Ok((loss, delta, correct as f64 / b))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: GradSet,
    pub task_loss: f64,
    pub batch_accuracy: f64,
}

/// Gradient of the task loss w.r.t. the *effective* (masked) parameters.
///
/// Entries for masked parameters are generally non-zero here: they are what a
/// straight-through estimator routes to the importance scores.
pub fn effective_backward(arch: &Arch, batch: &Batch, logits: &Matrix, cache: &ForwardCache) -> Result<BackwardOutput> {
    let (task_loss, mut delta, batch_accuracy) = softmax_cross_entropy(logits, &batch.labels)?;
    let mut grads = ParamSet::zeros(arch);
    for l in (0..arch.layers().len()).rev() {
        let spec = arch.layers()[l];
        let a = &cache.inputs[l];
        let g = &mut grads.layers[l];
        for o in 0..spec.out_dim {
            for c in 0..spec.in_dim {
                let mut acc = 0.0;
                for n in 0..batch.len() {
                    acc += delta.get(n, o) * a.get(n, c);
                }
                g.weights[o * spec.in_dim + c] = acc;
            }
            let mut acc = 0.0;
            for n in 0..batch.len() {
                acc += delta.get(n, o);
            }
            g.bias[o] = acc;
        }
        if l > 0 {
            let prev_act = arch.layers()[l - 1].activation;
            let z_prev = &cache.pre[l - 1];
            let w = &cache.effective.layers[l];
            let mut next = Matrix::zeros(batch.len(), spec.in_dim);
            for n in 0..batch.len() {
                for c in 0..spec.in_dim {
                    let mut acc = 0.0;
                    for o in 0..spec.out_dim {
                        acc += delta.get(n, o) * w.w(o, c);
                    }
                    next.data[n * spec.in_dim + c] = match prev_act {
                        Activation::Relu => {
                            if z_prev.get(n, c) > 0.0 {
                                acc
                            } else {
                                0.0
                            }
                        }
                        Activation::Identity | Activation::SoftmaxLogits => acc,
                    };
                }
            }
            delta = next;
        }
    }
    Ok(BackwardOutput { grads, task_loss, batch_accuracy })
}

/// Gradient of mean cross-entropy w.r.t. `params` through the mask. Entries of
/// masked parameters are exactly zero.
pub fn backward(
    arch: &Arch,
    mask: &UnitMask,
    batch: &Batch,
    logits: &Matrix,
    cache: &ForwardCache,
) -> Result<BackwardOutput> {
    let mut out = effective_backward(arch, batch, logits, cache)?;
    out.grads = out.grads.hadamard(&mask.param_mask(arch))?;
    Ok(out)
}

/// `params - lr * grads`, with the gradient rescaled to global L2 norm `clip`
/// when it is larger.
pub fn sgd_step(params: &ParamSet, grads: &GradSet, lr: f64, clip: Option<f64>) -> Result<ParamSet> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(FlpsError::config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    let scale = match clip {
        Some(c) => {
            let norm = grads.norm_sq().sqrt();
            if norm > c {
                Some(c / norm)
            } else {
                None
            }
        }
        None => None,
    };
    let out = match scale {
        Some(s) => params.zip_map(grads, |p, g| p - lr * (g * s))?,
        None => params.zip_map(grads, |p, g| p - lr * g)?,
    };
    if !out.all_finite() {
        return Err(FlpsError::NonFinite { what: "parameters after SGD step", ctx: Default::default() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::sparsity::UnitMask;

    fn tiny_arch() -> Arch {
        Arch::mlp(2, &[2], 2).unwrap()
    }

    #[test]
    fn arch_validation() {
        assert!(Arch::mlp(3, &[4, 5], 2).is_ok());
        let bad = vec![
            LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::SoftmaxLogits },
            LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::SoftmaxLogits },
        ];
        assert!(Arch::new(bad).is_err());
        let mismatch = vec![
            LayerSpec { in_dim: 2, out_dim: 3, activation: Activation::Relu },
            LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::SoftmaxLogits },
        ];
        assert!(Arch::new(mismatch).is_err());
        assert!(Arch::mlp(0, &[2], 2).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let arch = tiny_arch();
        let p = ParamSet::zeros(&arch);
        let x = Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let (logits, _) = forward(&arch, &p, &UnitMask::all_ones(&arch), &x).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_two_two_two_net_matches_scalar_arithmetic() {
        let arch = tiny_arch();
        let mut p = ParamSet::zeros(&arch);
        p.layers[0].weights = vec![0.5, -1.0, 2.0, 0.25];
        p.layers[0].bias = vec![0.1, -0.2];
        p.layers[1].weights = vec![1.5, -0.5, -2.0, 3.0];
        p.layers[1].bias = vec![0.05, 0.0];
        let (x0, x1) = (0.8, 0.4);
        // scalar oracle
        let h0 = (0.5 * x0 + -1.0 * x1 + 0.1_f64).max(0.0);
        let h1 = (2.0 * x0 + 0.25 * x1 + -0.2_f64).max(0.0);
        let y0 = 1.5 * h0 + -0.5 * h1 + 0.05;
        let y1 = -2.0 * h0 + 3.0 * h1 + 0.0;
        let x = Matrix::from_vec(1, 2, vec![x0, x1]).unwrap();
        let (logits, _) = forward(&arch, &p, &UnitMask::all_ones(&arch), &x).unwrap();
        assert!((logits.data[0] - y0).abs() < 1e-15);
        assert!((logits.data[1] - y1).abs() < 1e-15);
    }

    #[test]
    fn masking_a_unit_equals_zeroing_its_weights() {
        let arch = Arch::mlp(3, &[4], 3).unwrap();
        let p = ParamSet::init(&arch, &mut stream(1, Purpose::Verify, 0, 0));
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.9, -0.3, 0.5, 0.2, 0.7]).unwrap();
        let mask = UnitMask::from_layers(vec![vec![true, false, true, true]]);
        let (masked, _) = forward(&arch, &p, &mask, &x).unwrap();

        let mut zeroed = p.clone();
        for c in 0..3 {
            zeroed.layers[0].weights[3 + c] = 0.0;
        }
        zeroed.layers[0].bias[1] = 0.0;
        for o in 0..3 {
            zeroed.layers[1].weights[o * 4 + 1] = 0.0;
        }
        let (plain, _) = forward(&arch, &zeroed, &UnitMask::all_ones(&arch), &x).unwrap();
        assert_eq!(masked.data, plain.data);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let logits = Matrix::zeros(3, 5);
        let (loss, _, _) = softmax_cross_entropy(&logits, &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_have_zero_gradient() {
        let arch = Arch::mlp(3, &[4, 3], 2).unwrap();
        let p = ParamSet::init(&arch, &mut stream(2, Purpose::Verify, 0, 0));
        let mask = UnitMask::from_layers(vec![vec![true, false, true, true], vec![false, true, true]]);
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.9, -0.3, 0.5, 0.2, 0.7]).unwrap();
        let batch = Batch::new(x, vec![1, 0]).unwrap();
        let (logits, cache) = forward(&arch, &p, &mask, &batch.inputs).unwrap();
        let out = backward(&arch, &mask, &batch, &logits, &cache).unwrap();
        let pm = mask.param_mask(&arch);
        for (g, m) in out.grads.values().zip(pm.values()) {
            if *m == 0.0 {
                assert_eq!(*g, 0.0);
            }
        }
        // unit 1 of hidden layer 0: incoming row and outgoing column
        for c in 0..3 {
            assert_eq!(out.grads.layers[0].weights[3 + c], 0.0);
        }
        for o in 0..3 {
            assert_eq!(out.grads.layers[1].weights[o * 4 + 1], 0.0);
        }
    }

    #[test]
    fn sgd_arithmetic_and_clipping() {
        let arch = Arch::new(vec![LayerSpec { in_dim: 1, out_dim: 1, activation: Activation::SoftmaxLogits }]).unwrap();
        let mut p = ParamSet::zeros(&arch);
        p.layers[0].weights = vec![1.0];
        p.layers[0].bias = vec![1.0];
        let mut g = ParamSet::zeros(&arch);
        assert_eq!(sgd_step(&p, &g, 0.3, None).unwrap(), p);
        g.layers[0].weights = vec![2.0];
        g.layers[0].bias = vec![-2.0];
        let q = sgd_step(&p, &g, 0.5, None).unwrap();
        assert_eq!(q.to_flat(), vec![0.0, 2.0]);

        // norm 4 clipped to 1 -> scaled by 0.25
        let mut g4 = ParamSet::zeros(&arch);
        g4.layers[0].weights = vec![4.0];
        let c = sgd_step(&p, &g4, 1.0, Some(1.0)).unwrap();
        assert_eq!(c.to_flat(), vec![0.0, 1.0]);
        assert!(sgd_step(&p, &g, -1.0, None).is_err());
    }

    #[test]
    fn init_respects_fan_bound() {
        let arch = Arch::mlp(10, &[6], 4).unwrap();
        let p = ParamSet::init(&arch, &mut stream(3, Purpose::Init, 0, 0));
        let b0 = (6.0f64 / 16.0).sqrt();
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= b0));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }
}
