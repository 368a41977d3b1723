//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::{EliminateSide, SplitStats};
use crate::baselines::{PatternStrategy, RatioRule};
use crate::costmodel::{REFERENCE_BANDWIDTH, REFERENCE_FLOPS};
use crate::error::{FlpsError, Result};
use crate::localtrain::{LossConfig, QGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub name: String,
    pub seed: u64,
    /// Worker threads for client updates; 0 uses the rayon default.
    pub threads: usize,
    pub precision: Precision,

    pub clients: usize,
    pub rounds: usize,
    pub client_fraction: f64,

    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mu: f64,
    pub lambda: f64,
    pub grad_clip: Option<f64>,
    pub q_grad: QGrad,

    pub s_min: f64,
    pub partitions: usize,
    pub rho: f64,
    pub delta: f64,
    pub alpha: f64,
    pub eliminate: EliminateSide,
    pub split_stats: SplitStats,

    pub pattern: PatternStrategy,
    pub ratio_rule: RatioRule,
    pub fixed_ratio: f64,

    pub capability_levels: Vec<f64>,
    pub capability_jitter: bool,
    /// Report held-out accuracy to the bandit instead of training accuracy.
    pub accuracy_probe: bool,
    pub base_flops: f64,
    pub base_bandwidth: f64,

    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_per_class: usize,
    pub synth_sep: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub classes_per_client: usize,
    pub test_fraction: f64,

    pub hidden: Vec<usize>,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 1,
            threads: 0,
            precision: Precision::F64,
            clients: 20,
            rounds: 100,
            client_fraction: 0.1,
            local_iters: 10,
            batch_size: 20,
            lr: 0.1,
            mu: 1.0,
            lambda: 1.0,
            grad_clip: None,
            q_grad: QGrad::Ste,
            s_min: 0.05,
            partitions: 4,
            rho: 0.5,
            delta: 0.0,
            alpha: 1.0,
            eliminate: EliminateSide::Lower,
            split_stats: SplitStats::Inherit,
            pattern: PatternStrategy::Learnable,
            ratio_rule: RatioRule::Pucbv,
            fixed_ratio: 0.5,
            capability_levels: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            capability_jitter: false,
            accuracy_probe: false,
            base_flops: REFERENCE_FLOPS,
            base_bandwidth: REFERENCE_BANDWIDTH,
            dataset: DatasetKind::Synthetic,
            synth_classes: 10,
            synth_dim: 32,
            synth_per_class: 200,
            synth_sep: 4.0,
            idx_images: None,
            idx_labels: None,
            classes_per_client: 2,
            test_fraction: 0.2,
            hidden: vec![64, 32],
            checkpoint_every: 0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| FlpsError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. Relative dataset paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlpsError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.idx_images, &mut cfg.idx_labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mu: self.mu,
            lambda: self.lambda,
            lr: self.lr,
            local_iters: self.local_iters,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            q_grad: self.q_grad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlpsError::config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction must lie in (0, 1], got {}", self.client_fraction));
        }
        self.loss_config().validate()?;
        if !(self.s_min > 0.0 && self.s_min < 1.0) {
            return bad(format!("s_min must lie in (0, 1), got {}", self.s_min));
        }
        if self.partitions == 0 {
            return bad("partitions must be at least 1".into());
        }
        if !(self.rho > 0.0) || !(self.alpha >= 0.0) || !self.delta.is_finite() {
            return bad("rho must be positive, alpha non-negative and delta finite".into());
        }
        if !(self.fixed_ratio >= self.s_min && self.fixed_ratio <= 1.0) {
            return bad(format!("fixed_ratio must lie in [s_min, 1], got {}", self.fixed_ratio));
        }
        if self.capability_levels.is_empty() {
            return bad("capability_levels is empty".into());
        }
        if let Some(z) = self.capability_levels.iter().find(|&&z| !(z > 0.0 && z <= 1.0)) {
            return bad(format!("capability level {z} outside (0, 1]"));
        }
        if let Some(z) = self.capability_levels.iter().find(|&&z| z < self.s_min) {
            return bad(format!("capability level {z} is below s_min = {}", self.s_min));
        }
        if !(self.base_flops > 0.0 && self.base_bandwidth > 0.0) {
            return bad("base_flops and base_bandwidth must be positive".into());
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.classes_per_client == 0 {
            return bad("classes_per_client must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.synth_classes < 2 || self.synth_dim == 0 || self.synth_per_class == 0 || !(self.synth_sep > 0.0) {
                    return bad("synthetic dataset needs >= 2 classes, positive dim, per_class and sep".into());
                }
            }
            DatasetKind::Idx => {
                if self.idx_images.is_none() || self.idx_labels.is_none() {
                    return bad("dataset = \"idx\" needs idx_images and idx_labels".into());
                }
            }
        }
        Ok(())
    }
}
