//! Built-in correctness checks behind `fedlps verify`.
//!
//! Every check recomputes its quantity with a separate, deliberately plain
//! implementation and compares it against the library.

use rand::Rng;

use crate::bandit::{reward, utility, BanditAgent};
use crate::baselines::{fedavg_reference, FedAvgSettings, RatioRule};
use crate::config::Config;
use crate::costmodel::{flops_of_round, local_cost, upload_size, DeviceProfile};
use crate::error::Result;
use crate::localtrain::{loss_and_grads_masked, LossConfig, QGrad};
use crate::netcore::{Arch, Batch, Matrix, ParamSet};
use crate::orchestrator::{aggregate, build_federation, Contribution, Simulation};
use crate::rng::{stream, Purpose};
use crate::sparsity::{build_mask, derive_pattern, keep_count, ImportanceIndicator, SparseRatio, UnitMask};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, outcome: Result<std::result::Result<String, String>>) -> Self {
        match outcome {
            Ok(Ok(detail)) => Self { name, passed: true, detail },
            Ok(Err(detail)) => Self { name, passed: false, detail },
            Err(e) => Self { name, passed: false, detail: format!("error: {e}") },
        }
    }
}

type Outcome = Result<std::result::Result<String, String>>;

pub type AggregateFn = fn(&ParamSet, &[Contribution<'_>]) -> Result<ParamSet>;

pub fn run_all() -> Vec<CheckResult> {
    vec![
        CheckResult::new("gradient", check_gradients(20)),
        CheckResult::new("mask-cardinality", check_mask_cardinality()),
        CheckResult::new("aggregation", check_aggregation(aggregate, 50)),
        CheckResult::new("bandit-replay", check_bandit_replay()),
        CheckResult::new("utility-reward", check_utility_reward()),
        CheckResult::new("cost-model", check_cost_model()),
        CheckResult::new("dense-equivalence", check_dense_equivalence(10, 5)),
    ]
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<20} {:<6} detail\n", "check", "result");
    for r in results {
        s.push_str(&format!("{:<20} {:<6} {}\n", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail));
    }
    s
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random small net with non-zero biases, plus a global model, scores and a batch.
pub fn random_problem(seed: u64) -> (Arch, ParamSet, ParamSet, ImportanceIndicator, Batch, UnitMask) {
    let mut rng = stream(seed, Purpose::Verify, 0, 0);
    let input = rng.gen_range(2..6);
    let depth = rng.gen_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..6)).collect();
    let classes = rng.gen_range(2..5);
    let arch = Arch::mlp(input, &hidden, classes).expect("valid architecture");
    let mut params = ParamSet::init(&arch, &mut rng);
    for l in &mut params.layers {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    let mut global = params.clone();
    for v in global.values_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    let q = ImportanceIndicator::for_arch((0..arch.unit_count()).map(|_| rng.gen_range(0.0..1.0)).collect(), &arch).expect("sizes match");
    let rows = rng.gen_range(3..8);
    let x = Matrix::from_vec(rows, input, (0..rows * input).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes match");
    let labels = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    let batch = Batch::new(x, labels).expect("sizes match");
    let mask = UnitMask::from_layers(hidden.iter().map(|&w| (0..w).map(|i| i == 0 || rng.gen_bool(0.7)).collect()).collect());
    (arch, params, global, q, batch, mask)
}

/// Composite-loss gradient w.r.t. ω and the importance-regulariser gradient
/// w.r.t. Q against central differences.
pub fn check_gradients(nets: u64) -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..nets {
        let (arch, params, global, q, batch, mask) = random_problem(seed);
        let cfg = LossConfig { mu: 0.8, lambda: 1.3, lr: 0.1, local_iters: 1, batch_size: 1, grad_clip: None, q_grad: QGrad::IrOnly };
        let total = |p: &ParamSet, q: &ImportanceIndicator| -> Result<(f64, f64)> {
            let t = loss_and_grads_masked(&arch, p, q, &global, &batch, &cfg, &mask)?.terms;
            Ok((t.l_tr + cfg.mu * t.l_pr + cfg.lambda * t.l_ir, t.l_ir))
        };
        let lg = loss_and_grads_masked(&arch, &params, &q, &global, &batch, &cfg, &mask)?;
        let analytic = lg.grads_w.to_flat();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.values_mut().nth(i).expect("index in range") += h;
            *minus.values_mut().nth(i).expect("index in range") -= h;
            let fd = (total(&plus, &q)?.0 - total(&minus, &q)?.0) / (2.0 * h);
            let e = rel_err(*a, fd);
            worst = worst.max(e);
            if e > 1e-4 {
                return Ok(Err(format!("net {seed}, parameter {i}: analytic {a} vs fd {fd}")));
            }
        }
        for j in 0..q.len() {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus.scores[j] += h;
            minus.scores[j] -= h;
            let fd = (total(&params, &plus)?.1 - total(&params, &minus)?.1) / (2.0 * h);
            let a = lg.grads_q[j] / cfg.lambda;
            let e = rel_err(a, fd);
            worst = worst.max(e);
            if e > 1e-4 {
                return Ok(Err(format!("net {seed}, score {j}: analytic {a} vs fd {fd}")));
            }
        }
    }
    Ok(Ok(format!("{nets} nets, worst relative error {worst:.2e}")))
}

pub fn check_mask_cardinality() -> Outcome {
    let arch = Arch::mlp(6, &[7, 10, 3], 4)?;
    let widths = arch.hidden_widths();
    let mut rng = stream(2, Purpose::Verify, 0, 0);
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    for trial in 0..10 {
        let q = ImportanceIndicator::for_arch((0..arch.unit_count()).map(|_| rng.gen_range(-1.0..1.0)).collect(), &arch)?;
        let mut prev: Option<Vec<bool>> = None;
        for &s in &grid {
            let pattern = derive_pattern(&q, SparseRatio::new(s, 0.05)?);
            let mask = build_mask(&pattern, &arch)?;
            for (layer, &w) in mask.hidden().iter().zip(&widths) {
                let want = ((s * w as f64).round() as usize).max(1).min(w);
                let got = layer.iter().filter(|&&b| b).count();
                if got != want {
                    return Ok(Err(format!("trial {trial}, s = {s}: {got} units kept of {w}, expected {want}")));
                }
            }
            if let Some(p) = &prev {
                if p.iter().zip(&pattern.bits).any(|(&a, &b)| a && !b) {
                    return Ok(Err(format!("trial {trial}: pattern at s = {s} drops a unit kept at a smaller ratio")));
                }
            }
            prev = Some(pattern.bits);
        }
    }
    Ok(Ok(format!("{} ratios x 10 score vectors", grid.len())))
}

/// The aggregation under test against an element-by-element recomputation.
pub fn check_aggregation(agg: AggregateFn, instances: u64) -> Outcome {
    for seed in 0..instances {
        let mut rng = stream(seed, Purpose::Verify, 1, 0);
        let arch = Arch::mlp(rng.gen_range(1..5), &[rng.gen_range(1..6)], rng.gen_range(2..4))?;
        let global = ParamSet::init(&arch, &mut rng);
        let n = rng.gen_range(1..6);
        let mut ids: Vec<usize> = (0..20).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        let mut residuals = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..n {
            let bits: Vec<bool> = (0..arch.unit_count()).map(|_| rng.gen_bool(0.6)).collect();
            let mask = UnitMask::from_layers(vec![bits]);
            let pm = mask.param_mask(&arch);
            let mut r = ParamSet::init(&arch, &mut rng);
            for (v, m) in r.values_mut().zip(pm.values()) {
                *v = (*v + rng.gen_range(-1.0..1.0)) * m;
            }
            residuals.push(r);
            samples.push(rng.gen_range(1..200usize));
        }
        let contributions: Vec<Contribution<'_>> = (0..n)
            .map(|i| Contribution { client: ids[i], samples: samples[i], residual: &residuals[i] })
            .collect();
        let got = agg(&global, &contributions)?.to_flat();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ids[i]);
        let total: usize = samples.iter().sum();
        let flat_res: Vec<Vec<f64>> = residuals.iter().map(|r| r.to_flat()).collect();
        for (e, g) in global.to_flat().into_iter().enumerate() {
            let mut acc = 0.0;
            for &i in &order {
                acc += samples[i] as f64 * flat_res[i][e];
            }
            let want = g - acc / total as f64;
            if got[e].to_bits() != want.to_bits() {
                return Ok(Err(format!("instance {seed}, element {e}: {} vs {want}", got[e])));
            }
        }
    }
    Ok(Ok(format!("{instances} instances bit-exact")))
}

struct OraclePartition {
    lo: f64,
    hi: f64,
    g: Vec<f64>,
}

/// Scripted accuracy/cost sequence through the agent and through a plain
/// re-derivation of the same update rule.
pub fn check_bandit_replay() -> Outcome {
    let (i0, s_min, rounds, clients, frac, rho, delta) = (4usize, 0.05, 100usize, 20usize, 0.1, 0.5, 1.0);
    let accuracies = [20.0, 35.0, 30.0, 50.0, 50.0, 45.0, 70.0, 72.0];
    let costs = [1.0, 0.8, 1.2, 0.5, 2.0, 1.0, 0.7, 0.9];

    let mut agent = BanditAgent::init(i0, s_min, rounds, clients, frac, rho, &mut stream(9, Purpose::BanditInit, 0, 0))?;
    let mut init_rng = stream(9, Purpose::BanditInit, 0, 0);
    let width = (1.0 - s_min) / i0 as f64;
    let mut parts: Vec<OraclePartition> = (0..i0)
        .map(|i| OraclePartition {
            lo: s_min + width * i as f64,
            hi: if i + 1 == i0 { 1.0 } else { s_min + width * (i + 1) as f64 },
            g: vec![],
        })
        .collect();
    let xi = rounds as f64 / (clients as f64 * frac);
    let first = init_rng.gen_range(0..i0);
    let mut last_s: f64 = init_rng.gen_range(parts[first].lo..parts[first].hi);
    let mut last_a = 0.0;
    let mut eps = 1.0;
    let u = |a: f64| 10.0 - 20.0 / (1.0 + (0.35 * a).exp());

    for r in 0..accuracies.len() {
        let (a, t) = (accuracies[r], costs[r]);
        let mut rng_lib = stream(9, Purpose::Bandit, 0, r as u64);
        let mut rng_oracle = stream(9, Purpose::Bandit, 0, r as u64);
        let sel = agent.update_and_select(a, t, delta, &mut rng_lib)?;

        let g = (u(a) - u(last_a)) / t;
        let k = parts.iter().position(|p| p.lo <= last_s && last_s < p.hi).expect("ratio inside a partition");
        let mut targets = vec![k];
        let mut split = false;
        if last_s > parts[k].lo {
            let p = parts.remove(k);
            parts.insert(k, OraclePartition { lo: last_s, hi: p.hi, g: p.g.clone() });
            parts.insert(k, OraclePartition { lo: p.lo, hi: last_s, g: p.g });
            targets = vec![k, k + 1];
            split = true;
        }
        let fire = a - last_a < delta && parts.len() > 1 && split;
        if fire {
            parts.remove(k);
            targets = vec![k];
        }
        if fire != sel.eliminated {
            return Ok(Err(format!("round {r}: elimination {} but expected {fire}", sel.eliminated)));
        }
        if parts.is_empty() || agent.partitions().is_empty() {
            return Ok(Err(format!("round {r}: partition set emptied")));
        }
        eps /= 2.0;
        if agent.epsilon() != 0.5f64.powi(r as i32 + 1) || agent.epsilon() != eps {
            return Ok(Err(format!("round {r}: epsilon {} is not 2^-{}", agent.epsilon(), r + 1)));
        }
        for &i in &targets {
            parts[i].g.push(g);
        }
        let psi = xi / (parts.len() * parts.len()) as f64;
        let log_term = (xi * psi * eps).ln();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        if parts.len() != sel.scores.len() {
            return Ok(Err(format!("round {r}: {} partitions, expected {}", sel.scores.len(), parts.len())));
        }
        for (i, p) in parts.iter().enumerate() {
            let h = p.g.len() as f64;
            let mean = if p.g.is_empty() { 0.0 } else { p.g.iter().sum::<f64>() / h };
            let var = if p.g.is_empty() { 0.0 } else { p.g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h };
            let bonus = if log_term < 0.0 { 0.0 } else { (rho * (var + 2.0) * log_term / (4.0 * (h + 1.0))).sqrt() };
            let score = mean + bonus;
            let lib = &sel.scores[i];
            if (lib.mean - mean).abs() > 1e-9 || (lib.variance - var).abs() > 1e-9 || (lib.ucbv - score).abs() > 1e-9 {
                return Ok(Err(format!("round {r}, partition {i}: ({}, {}, {}) vs ({mean}, {var}, {score})", lib.mean, lib.variance, lib.ucbv)));
            }
            if (lib.lo - p.lo).abs() > 1e-12 || (lib.hi - p.hi).abs() > 1e-12 {
                return Ok(Err(format!("round {r}, partition {i}: bounds differ")));
            }
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        let s_next = rng_oracle.gen_range(parts[best].lo..parts[best].hi);
        if sel.chosen != best || (sel.ratio - s_next).abs() > 1e-12 || (sel.reward - g).abs() > 1e-9 {
            return Ok(Err(format!("round {r}: chose {} at {}, expected {best} at {s_next}", sel.chosen, sel.ratio)));
        }
        last_s = s_next;
        last_a = a;
    }
    Ok(Ok(format!("{} rounds, {} eliminations", accuracies.len(), agent.eliminations())))
}

pub fn check_utility_reward() -> Outcome {
    if utility(0.0) != 0.0 {
        return Ok(Err(format!("U(0) = {}", utility(0.0))));
    }
    let mut rng = stream(4, Purpose::Verify, 0, 0);
    for i in 0..100 {
        let a: f64 = rng.gen_range(0.0..100.0);
        let b: f64 = rng.gen_range(0.0..100.0);
        let t: f64 = rng.gen_range(1e-3..10.0);
        // tanh form: 10 - 20 / (1 + e^x) = 10 tanh(x / 2)
        let ua = 10.0 * (0.175 * a).tanh();
        let ub = 10.0 * (0.175 * b).tanh();
        let want = (ua - ub) / t;
        let got = reward(a, b, t)?;
        if (utility(a) - ua).abs() > 1e-12 || (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            return Ok(Err(format!("sample {i}: reward {got} vs {want}")));
        }
    }
    Ok(Ok("100 samples".into()))
}

pub fn check_cost_model() -> Outcome {
    let arch = Arch::mlp(12, &[16, 8], 5)?;
    let mut rng = stream(5, Purpose::Verify, 0, 0);
    let q = ImportanceIndicator::for_arch((0..arch.unit_count()).map(|_| rng.gen_range(0.0..1.0)).collect(), &arch)?;
    let profile = DeviceProfile::for_level(0.25, 727e9, 1e6)?;
    let (mut prev_f, mut prev_u) = (0.0, 0u64);
    for i in 1..=20 {
        let s = SparseRatio::new(i as f64 * 0.05, 0.05)?;
        let mask = build_mask(&derive_pattern(&q, s), &arch)?;
        let k1 = keep_count(s, 16);
        let k2 = keep_count(s, 8);
        let weights = 12 * k1 + k1 * k2 + k2 * 5;
        let want_f = 6.0 * weights as f64 * 20.0 * 10.0;
        let want_u = (weights + k1 + k2 + 5 + 1) as u64;
        let f = flops_of_round(&arch, &mask, 20, 10);
        let up = upload_size(&arch, &mask);
        if f != want_f || up != want_u {
            return Ok(Err(format!("s = {}: flops {f} upload {up}, expected {want_f} {want_u}", s.value())));
        }
        let t = local_cost(f, up, &profile, 1.5);
        let want_t = want_f / (727e9 * 0.25) + 1.5 * want_u as f64 / (1e6 * 0.25);
        if t != want_t {
            return Ok(Err(format!("s = {}: time {t} vs {want_t}", s.value())));
        }
        if f < prev_f || up < prev_u {
            return Ok(Err(format!("cost decreased at s = {}", s.value())));
        }
        prev_f = f;
        prev_u = up;
    }
    Ok(Ok("20 ratios".into()))
}

/// Settings shared by the dense-equivalence check and its tests.
pub fn dense_config(rounds: usize, clients: usize) -> Config {
    Config {
        name: "dense".into(),
        seed: 17,
        threads: 1,
        clients,
        rounds,
        client_fraction: 0.6,
        local_iters: 3,
        batch_size: 5,
        lr: 0.1,
        mu: 0.0,
        lambda: 0.0,
        q_grad: QGrad::IrOnly,
        ratio_rule: RatioRule::Fixed,
        fixed_ratio: 1.0,
        capability_levels: vec![1.0],
        synth_classes: 4,
        synth_dim: 8,
        synth_per_class: 30,
        hidden: vec![6],
        ..Config::default()
    }
}

/// s = 1, μ = λ = 0 and no straight-through gradient must reproduce plain
/// FedAvg bit for bit.
pub fn check_dense_equivalence(rounds: usize, clients: usize) -> Outcome {
    let cfg = dense_config(rounds, clients);
    let fed = build_federation(&cfg)?;
    let train: Vec<_> = fed.data.iter().map(|d| d.train.clone()).collect();
    let arch = fed.arch.clone();
    let mut sim = Simulation::from_federation(cfg.clone(), fed)?;
    let init = sim.global().clone();
    let settings = FedAvgSettings {
        seed: cfg.seed,
        rounds,
        client_fraction: cfg.client_fraction,
        local_iters: cfg.local_iters,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
    };
    let reference = fedavg_reference(&arch, &init, &train, &settings)?;
    for (r, want) in reference.iter().enumerate() {
        sim.step()?;
        let same = sim.global().to_flat().iter().zip(want.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Ok(Err(format!("trajectories diverge at round {r}")));
        }
    }
    Ok(Ok(format!("{rounds} rounds, {clients} clients bit-exact")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    fn sign_flipped(global: &ParamSet, c: &[Contribution<'_>]) -> Result<ParamSet> {
        let good = aggregate(global, c)?;
        global.zip_map(&good, |g, a| g + (g - a))
    }

    #[test]
    fn aggregation_check_catches_sign_error() {
        let out = check_aggregation(sign_flipped, 5).unwrap();
        assert!(out.is_err());
    }

    #[test]
    fn table_marks_failures() {
        let t = format_table(&[CheckResult { name: "x", passed: false, detail: "bad".into() }]);
        assert!(t.contains("FAIL"));
    }
}
