//! Unit importance scores, top-k sparse patterns, and the masks they induce.

use serde::{Deserialize, Serialize};

use crate::error::{FlpsError, Result};
use crate::netcore::{Arch, ParamSet};

/// Fraction of units kept per hidden layer, clamped to `[s_min, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SparseRatio(f64);

impl SparseRatio {
    pub const FULL: SparseRatio = SparseRatio(1.0);

    pub fn new(value: f64, s_min: f64) -> Result<Self> {
        if !(s_min > 0.0 && s_min <= 1.0) {
            return Err(FlpsError::config(format!("s_min must lie in (0, 1], got {s_min}")));
        }
        if !value.is_finite() || value < s_min || value > 1.0 {
            return Err(FlpsError::config(format!("sparse ratio {value} outside [{s_min}, 1]")));
        }
        Ok(Self(value))
    }

    /// Clamp into `[s_min, 1]` instead of rejecting.
    pub fn clamped(value: f64, s_min: f64) -> Self {
        Self(value.clamp(s_min, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Units retained in a layer of `width` at ratio `s`: `max(1, round(s * width))`.
pub fn keep_count(s: SparseRatio, width: usize) -> usize {
    ((s.0 * width as f64).round() as usize).clamp(1, width)
}

/// Per-unit importance scores (Q), flattened across hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceIndicator {
    pub scores: Vec<f64>,
    /// `offsets[h]..offsets[h + 1]` are the scores of hidden layer `h`.
    pub offsets: Vec<usize>,
}

impl ImportanceIndicator {
    pub fn new(scores: Vec<f64>, widths: &[usize]) -> Result<Self> {
        let offsets = offsets_of(widths);
        if scores.len() != *offsets.last().unwrap_or(&0) {
            return Err(FlpsError::structural(format!(
                "importance vector has {} scores for {} units",
                scores.len(),
                offsets.last().unwrap_or(&0)
            )));
        }
        Ok(Self { scores, offsets })
    }

    pub fn for_arch(scores: Vec<f64>, arch: &Arch) -> Result<Self> {
        Self::new(scores, &arch.hidden_widths())
    }

    /// `σ(|ω|_J)`: the starting point that zeroes the importance regulariser.
    pub fn from_magnitudes(arch: &Arch, params: &ParamSet) -> Result<Self> {
        let scores = magnitude_summary(arch, params)?.into_iter().map(sigmoid).collect();
        Self::for_arch(scores, arch)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        &self.scores[self.offsets[h]..self.offsets[h + 1]]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.scores.iter().all(|s| s.is_finite())
    }
}

fn offsets_of(widths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(widths.len() + 1);
    offsets.push(0);
    for w in widths {
        offsets.push(offsets.last().unwrap() + w);
    }
    offsets
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary keep/drop flag per unit, flattened across hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsePattern {
    pub bits: Vec<bool>,
}

impl SparsePattern {
    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bit-packed bytes, least significant bit first.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(FlpsError::structural(format!(
                "pattern of {len} bits needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        Ok(Self { bits: (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect() })
    }
}

/// Keep the `keep_count(s, width)` highest-scoring units of every layer.
///
/// This is the step function over the `(1 - s)`-quantile threshold, realised
/// as exact top-k. Equal scores keep the lower unit index first.
pub fn derive_pattern(q: &ImportanceIndicator, s: SparseRatio) -> SparsePattern {
    let mut bits = vec![false; q.len()];
    for h in 0..q.offsets.len() - 1 {
        let scores = q.layer(h);
        let keep = keep_count(s, scores.len());
        for i in top_k(scores, keep) {
            bits[q.offsets[h] + i] = true;
        }
    }
    SparsePattern { bits }
}

/// Indices of the `k` largest scores; ties resolved toward the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Which units of each hidden layer survive. Input features and output
/// classes are never masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMask {
    hidden: Vec<Vec<bool>>,
}

impl UnitMask {
    pub fn all_ones(arch: &Arch) -> Self {
        Self { hidden: arch.hidden_widths().into_iter().map(|w| vec![true; w]).collect() }
    }

    pub fn from_layers(hidden: Vec<Vec<bool>>) -> Self {
        Self { hidden }
    }

    pub fn hidden(&self) -> &[Vec<bool>] {
        &self.hidden
    }

    pub fn check(&self, arch: &Arch) -> Result<()> {
        let widths = arch.hidden_widths();
        if self.hidden.len() != widths.len() || self.hidden.iter().zip(&widths).any(|(m, &w)| m.len() != w) {
            return Err(FlpsError::structural("unit mask does not match hidden-layer widths"));
        }
        Ok(())
    }

    /// Whether output unit `o` of weight layer `layer` is kept.
    #[inline]
    pub fn output_kept(&self, layer: usize, o: usize) -> bool {
        self.hidden.get(layer).map_or(true, |m| m[o])
    }

    /// Whether input unit `c` of weight layer `layer` is kept.
    #[inline]
    pub fn input_kept(&self, layer: usize, c: usize) -> bool {
        layer == 0 || self.hidden[layer - 1][c]
    }

    pub fn to_pattern(&self) -> SparsePattern {
        SparsePattern { bits: self.hidden.iter().flatten().copied().collect() }
    }

    /// Per-parameter 0/1 view: a weight survives only if both the unit that
    /// produces through it and the unit that consumes it survive.
    pub fn param_mask(&self, arch: &Arch) -> ParamSet {
        let mut m = ParamSet::zeros(arch);
        for (l, layer) in m.layers.iter_mut().enumerate() {
            for o in 0..layer.out_dim {
                let row = self.output_kept(l, o);
                layer.bias[o] = if row { 1.0 } else { 0.0 };
                for c in 0..layer.in_dim {
                    layer.weights[o * layer.in_dim + c] = if row && self.input_kept(l, c) { 1.0 } else { 0.0 };
                }
            }
        }
        m
    }

    /// Count of surviving parameters (weights and biases).
    pub fn retained_params(&self, arch: &Arch) -> usize {
        self.param_mask(arch).values().filter(|&&v| v != 0.0).count()
    }

    /// Count of surviving weights only.
    pub fn retained_weights(&self, arch: &Arch) -> usize {
        arch.layers()
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let rows = (0..s.out_dim).filter(|&o| self.output_kept(l, o)).count();
                let cols = (0..s.in_dim).filter(|&c| self.input_kept(l, c)).count();
                rows * cols
            })
            .sum()
    }
}

/// Split a flat pattern into per-layer unit flags.
pub fn build_mask(pattern: &SparsePattern, arch: &Arch) -> Result<UnitMask> {
    let widths = arch.hidden_widths();
    let total: usize = widths.iter().sum();
    if pattern.len() != total {
        return Err(FlpsError::structural(format!(
            "pattern has {} bits, architecture has {} hidden units",
            pattern.len(),
            total
        )));
    }
    let offsets = offsets_of(&widths);
    Ok(UnitMask {
        hidden: offsets.windows(2).map(|w| pattern.bits[w[0]..w[1]].to_vec()).collect(),
    })
}

/// `|ω|_J`: per hidden unit, the sum of absolute values of its incoming
/// weights, its bias and its outgoing weights.
pub fn magnitude_summary(arch: &Arch, params: &ParamSet) -> Result<Vec<f64>> {
    params.check_shape(arch)?;
    let mut out = Vec::with_capacity(arch.unit_count());
    for h in 0..arch.layers().len() - 1 {
        let inc = &params.layers[h];
        let outg = &params.layers[h + 1];
        for j in 0..inc.out_dim {
            let mut s = 0.0;
            for c in 0..inc.in_dim {
                s += inc.w(j, c).abs();
            }
            s += inc.bias[j].abs();
            for o in 0..outg.out_dim {
                s += outg.w(o, j).abs();
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Retained fraction of the maskable parameters: every weight plus every
/// hidden-layer bias. Output biases can never be masked and are excluded.
pub fn sparsity_of(mask: &UnitMask, arch: &Arch) -> f64 {
    let n = arch.layers().len();
    if n == 1 {
        return 1.0;
    }
    let pm = mask.param_mask(arch);
    let mut total = 0usize;
    let mut kept = 0usize;
    for (l, layer) in pm.layers.iter().enumerate() {
        total += layer.weights.len();
        kept += layer.weights.iter().filter(|&&v| v != 0.0).count();
        if l + 1 < n {
            total += layer.bias.len();
            kept += layer.bias.iter().filter(|&&v| v != 0.0).count();
        }
    }
    kept as f64 / total as f64
}
