//! Client-side personalised sparse training.
//!
//! The local objective is
//! `l_tr(ω ⊙ m) + μ ‖ω − ω^r‖² + λ ‖Q − σ(|ω|_J)‖²`, optimised jointly over
//! the parameters ω and the importance scores Q. The mask `m` is rebuilt from
//! Q before every step.
//!
//! The mask is a step function of Q, so `l_tr` has zero derivative w.r.t. Q
//! almost everywhere. With [`QGrad::Ste`] the step is treated as the identity
//! on the backward pass: unit `j` receives
//! `Σ_p ∂l_tr/∂(ω⊙m)_p · ω_p · m_other(p)` over the parameters `p` incident
//! to it, where `m_other` is the mask bit of the unit at the other end of `p`.
//! [`QGrad::IrOnly`] routes only the regulariser gradient to Q.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{heuristic_pattern, PatternStrategy};
use crate::costmodel::{cost_report, CostReport, DeviceProfile};
use crate::datahetero::Dataset;
use crate::error::{FlpsError, Result, RunContext};
use crate::netcore::{self, argmax, Arch, Batch, GradSet, ParamSet};
use crate::rng::{stream, Purpose};
use crate::sparsity::{build_mask, derive_pattern, magnitude_summary, sigmoid, ImportanceIndicator, SparsePattern, SparseRatio, UnitMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QGrad {
    #[default]
    Ste,
    IrOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
    pub lambda: f64,
    pub lr: f64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub q_grad: QGrad,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.lambda >= 0.0) {
            return Err(FlpsError::config("mu and lambda must be non-negative"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(FlpsError::config("lr must be finite and non-negative"));
        }
        if self.local_iters == 0 || self.batch_size == 0 {
            return Err(FlpsError::config("local_iters and batch_size must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(FlpsError::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_tr: f64,
    pub l_pr: f64,
    pub l_ir: f64,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub grads_w: GradSet,
    /// Total gradient applied to Q.
    pub grads_q: Vec<f64>,
    /// The straight-through part of `grads_q` (zero under `IrOnly`).
    pub ste_q: Vec<f64>,
    pub terms: LossTerms,
    pub batch_accuracy: f64,
}

/// Composite loss and gradients with an explicit mask.
pub fn loss_and_grads_masked(
    arch: &Arch,
    params: &ParamSet,
    q: &ImportanceIndicator,
    global: &ParamSet,
    batch: &Batch,
    cfg: &LossConfig,
    mask: &UnitMask,
) -> Result<LossGrads> {
    if q.len() != arch.unit_count() || !params.same_shape(global) {
        return Err(FlpsError::structural("importance vector or global parameters do not match the architecture"));
    }
    let (logits, cache) = netcore::forward(arch, params, mask, &batch.inputs)?;
    let eff = netcore::effective_backward(arch, batch, &logits, &cache)?;
    let mut grads_w = eff.grads.hadamard(&mask.param_mask(arch))?;

    let l_pr = params.zip_map(global, |a, b| a - b)?.norm_sq();
    if cfg.mu != 0.0 {
        grads_w = grads_w
            .zip_map(&params.zip_map(global, |a, b| a - b)?, |g, d| g + cfg.mu * (2.0 * d))?;
    }

    let mags = magnitude_summary(arch, params)?;
    let target: Vec<f64> = mags.iter().map(|&a| sigmoid(a)).collect();
    let l_ir: f64 = q.scores.iter().zip(&target).map(|(qj, t)| (qj - t) * (qj - t)).sum();
    let mut grads_q: Vec<f64> = q.scores.iter().zip(&target).map(|(qj, t)| cfg.lambda * (2.0 * (qj - t))).collect();

    if cfg.lambda != 0.0 {
        // d l_ir / d ω_p = Σ_{j ∋ p} -2 (q_j - σ(a_j)) σ'(a_j) sign(ω_p)
        let coef: Vec<f64> = q
            .scores
            .iter()
            .zip(&target)
            .map(|(qj, t)| -2.0 * (qj - t) * t * (1.0 - t))
            .collect();
        let mut reg = ParamSet::zeros(arch);
        for_each_incident(arch, |unit, inc| {
            let w = inc.value(params);
            *inc.slot(&mut reg) += coef[unit] * sign(w);
        });
        grads_w = grads_w.zip_map(&reg, |g, r| g + cfg.lambda * r)?;
    }

    let mut ste_q = vec![0.0; q.len()];
    if cfg.q_grad == QGrad::Ste {
        for_each_incident(arch, |unit, inc| {
            let other = match inc.end {
                FarEnd::Input(c) => mask.input_kept(inc.layer, c),
                FarEnd::Output(o) => mask.output_kept(inc.layer, o),
                FarEnd::None => true,
            };
            if other {
                ste_q[unit] += inc.value(&eff.grads) * inc.value(params);
            }
        });
        for (gq, s) in grads_q.iter_mut().zip(&ste_q) {
            *gq += s;
        }
    }

    let terms = LossTerms { l_tr: eff.task_loss, l_pr, l_ir };
    if !(terms.l_pr.is_finite() && terms.l_ir.is_finite()) {
        return Err(FlpsError::NonFinite { what: "regularisation loss", ctx: RunContext::default() });
    }
    Ok(LossGrads { grads_w, grads_q, ste_q, terms, batch_accuracy: eff.batch_accuracy })
}

/// Composite loss with the mask derived from `q` at ratio `s`.
pub fn loss_and_grads(
    arch: &Arch,
    params: &ParamSet,
    q: &ImportanceIndicator,
    global: &ParamSet,
    batch: &Batch,
    cfg: &LossConfig,
    s: SparseRatio,
) -> Result<LossGrads> {
    let mask = build_mask(&derive_pattern(q, s), arch)?;
    loss_and_grads_masked(arch, params, q, global, batch, cfg, &mask)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The unit at the other end of an incident parameter.
#[derive(Clone, Copy)]
enum FarEnd {
    Input(usize),
    Output(usize),
    None,
}

#[derive(Clone, Copy)]
struct Incidence {
    layer: usize,
    idx: usize,
    bias: bool,
    end: FarEnd,
}

impl Incidence {
    fn value(&self, p: &ParamSet) -> f64 {
        let l = &p.layers[self.layer];
        if self.bias { l.bias[self.idx] } else { l.weights[self.idx] }
    }

    fn slot<'a>(&self, p: &'a mut ParamSet) -> &'a mut f64 {
        let l = &mut p.layers[self.layer];
        if self.bias { &mut l.bias[self.idx] } else { &mut l.weights[self.idx] }
    }
}

/// Visit every (hidden unit, incident parameter) pair. A weight between two
/// hidden units is visited once from each end.
fn for_each_incident(arch: &Arch, mut f: impl FnMut(usize, Incidence)) {
    let widths = arch.hidden_widths();
    let mut offset = 0;
    for (h, &width) in widths.iter().enumerate() {
        let inc = arch.layers()[h];
        let out = arch.layers()[h + 1];
        for j in 0..width {
            let unit = offset + j;
            for c in 0..inc.in_dim {
                f(unit, Incidence { layer: h, idx: j * inc.in_dim + c, bias: false, end: FarEnd::Input(c) });
            }
            f(unit, Incidence { layer: h, idx: j, bias: true, end: FarEnd::None });
            for o in 0..out.out_dim {
                f(unit, Incidence { layer: h + 1, idx: o * out.in_dim + j, bias: false, end: FarEnd::Output(o) });
            }
        }
        offset += width;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    pub train: Dataset,
    pub test: Dataset,
}

/// A stored personalised model: `ω_{k,E} ⊙ m_{k,E}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalModel {
    pub params: ParamSet,
    pub pattern: SparsePattern,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Importance scores carried over between rounds (`Q_k^s`).
    pub importance: ImportanceIndicator,
    pub capability: f64,
    pub data: Arc<LocalData>,
    pub last_accuracy: f64,
    pub personal: Option<PersonalModel>,
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client: usize,
    /// `(ω^r − ω_{k,E}) ⊙ m_{k,E}`.
    pub residual: GradSet,
    pub pattern: SparsePattern,
    pub mask: UnitMask,
    pub sample_count: usize,
    pub cost: CostReport,
    /// Percent.
    pub train_accuracy: f64,
    /// The ratio the server asked for.
    pub ratio_sampled: f64,
    pub ratio_effective: f64,
    /// Means over the local iterations.
    pub loss: LossTerms,
}

/// Everything a client update needs besides its own state.
#[derive(Debug, Clone, Copy)]
pub struct UpdateContext<'a> {
    pub arch: &'a Arch,
    pub global: &'a ParamSet,
    pub cfg: &'a LossConfig,
    pub strategy: PatternStrategy,
    pub s_min: f64,
    pub profile: DeviceProfile,
    pub alpha: f64,
    pub single_precision: bool,
    /// Report held-out accuracy instead of mean training-batch accuracy.
    pub accuracy_probe: bool,
    pub seed: u64,
    pub round: usize,
}

/// The sparse ratio a client actually trains at: the server's choice, capped
/// by the device capability.
pub fn effective_ratio(s: f64, capability: f64, s_min: f64) -> SparseRatio {
    SparseRatio::clamped(s.min(capability), s_min)
}

fn pattern_for(
    ctx: &UpdateContext<'_>,
    q: &ImportanceIndicator,
    params: &ParamSet,
    s: SparseRatio,
    fixed: Option<&SparsePattern>,
    rng: &mut crate::rng::StreamRng,
) -> Result<SparsePattern> {
    match (ctx.strategy, fixed) {
        (PatternStrategy::Learnable, _) => Ok(derive_pattern(q, s)),
        (_, Some(p)) => Ok(p.clone()),
        (kind, None) => heuristic_pattern(kind, ctx.arch, params, s, rng),
    }
}

/// One round of local training on client `state.id`.
pub fn client_update(state: &ClientState, ctx: &UpdateContext<'_>, s: f64) -> Result<(ClientReport, ClientState)> {
    let err_ctx = RunContext::client(ctx.round, state.id);
    ctx.cfg.validate()?;
    if state.data.train.is_empty() {
        return Err(FlpsError::config(format!("client {} has no training data", state.id)));
    }
    let ratio = effective_ratio(s, state.capability, ctx.s_min);
    let mut batch_rng = stream(ctx.seed, Purpose::Batch, state.id as u64, ctx.round as u64);
    let mut pattern_rng = stream(ctx.seed, Purpose::Pattern, state.id as u64, ctx.round as u64);

    let mut params = ctx.global.clone();
    let mut q = state.importance.clone();
    // random and ordered patterns do not depend on the parameters; draw once
    let fixed = match ctx.strategy {
        PatternStrategy::Random | PatternStrategy::Ordered => {
            Some(heuristic_pattern(ctx.strategy, ctx.arch, &params, ratio, &mut pattern_rng)?)
        }
        _ => None,
    };

    let mut acc_sum = 0.0;
    let mut terms_sum = LossTerms::default();
    for iter in 0..ctx.cfg.local_iters {
        let it_ctx = err_ctx.with_iter(iter);
        let pattern = pattern_for(ctx, &q, &params, ratio, fixed.as_ref(), &mut pattern_rng)?;
        let mask = build_mask(&pattern, ctx.arch)?;
        let batch = state.data.train.sample_batch(ctx.cfg.batch_size, &mut batch_rng)?;
        let lg = loss_and_grads_masked(ctx.arch, &params, &q, ctx.global, &batch, ctx.cfg, &mask)
            .map_err(|e| e.in_context(it_ctx))?;
        params = netcore::sgd_step(&params, &lg.grads_w, ctx.cfg.lr, ctx.cfg.grad_clip).map_err(|e| e.in_context(it_ctx))?;
        for (qj, g) in q.scores.iter_mut().zip(&lg.grads_q) {
            *qj -= ctx.cfg.lr * g;
        }
        if !q.all_finite() {
            return Err(FlpsError::NonFinite { what: "importance scores", ctx: it_ctx });
        }
        if ctx.single_precision {
            params.round_to_f32();
            for qj in &mut q.scores {
                *qj = *qj as f32 as f64;
            }
        }
        acc_sum += lg.batch_accuracy;
        terms_sum.l_tr += lg.terms.l_tr;
        terms_sum.l_pr += lg.terms.l_pr;
        terms_sum.l_ir += lg.terms.l_ir;
    }

    let pattern = pattern_for(ctx, &q, &params, ratio, fixed.as_ref(), &mut pattern_rng)?;
    let mask = build_mask(&pattern, ctx.arch)?;
    let pm = mask.param_mask(ctx.arch);
    let residual = ctx.global.zip_map(&params, |g, w| g - w)?.hadamard(&pm)?;
    let personal = params.hadamard(&pm)?;

    let e = ctx.cfg.local_iters as f64;
    let train_accuracy = if ctx.accuracy_probe && !state.data.test.is_empty() {
        evaluate(ctx.arch, &personal, &state.data.test)?
    } else {
        acc_sum / e * 100.0
    };
    let cost = cost_report(ctx.arch, &mask, ctx.cfg.batch_size, ctx.cfg.local_iters, &ctx.profile, ctx.alpha);
    let report = ClientReport {
        client: state.id,
        residual,
        pattern: pattern.clone(),
        mask,
        sample_count: state.data.train.len(),
        cost,
        train_accuracy,
        ratio_sampled: s,
        ratio_effective: ratio.value(),
        loss: LossTerms { l_tr: terms_sum.l_tr / e, l_pr: terms_sum.l_pr / e, l_ir: terms_sum.l_ir / e },
    };
    let next = ClientState {
        id: state.id,
        importance: q,
        capability: state.capability,
        data: Arc::clone(&state.data),
        last_accuracy: train_accuracy,
        personal: Some(PersonalModel { params: personal, pattern }),
    };
    Ok((report, next))
}

/// Argmax accuracy (percent) of an already-masked model on `data`.
pub fn evaluate(arch: &Arch, masked_params: &ParamSet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(FlpsError::config("cannot evaluate on an empty split"));
    }
    let (logits, _) = netcore::forward(arch, masked_params, &UnitMask::all_ones(arch), &data.features)?;
    let correct = (0..data.len()).filter(|&n| argmax(logits.row(n)) == data.labels[n]).count();
    Ok(correct as f64 / data.len() as f64 * 100.0)
}
