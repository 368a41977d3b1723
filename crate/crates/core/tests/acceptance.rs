//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use fedlps::bandit::{reward, utility, BanditAgent};
use fedlps::baselines::{fedavg_reference, FedAvgSettings, PatternStrategy, RatioRule};
use fedlps::config::Config;
use fedlps::costmodel::{cost_report, global_cost, DeviceProfile};
use fedlps::localtrain::{loss_and_grads_masked, LossConfig, QGrad};
use fedlps::netcore::{Arch, ParamSet};
use fedlps::orchestrator::{aggregate, build_federation, Contribution};
use fedlps::rng::{stream, Purpose};
use fedlps::sparsity::{build_mask, derive_pattern, ImportanceIndicator, SparseRatio, UnitMask};
use fedlps::verify::{dense_config, random_problem};
use fedlps::Simulation;

const SEEDS: [u64; 3] = [1, 2, 3];

type Verdict = Result<String, String>;

fn desk() -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Config::load(&path).expect("configs/desk.toml loads")
}

fn within(took: Duration, limit: Duration, detail: String) -> Verdict {
    if took > limit {
        Err(format!("{detail}; took {took:.1?}, limit {limit:?}"))
    } else {
        Ok(format!("{detail}; {took:.1?}"))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradients() -> Verdict {
    let started = Instant::now();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 100..120 {
        let (arch, params, global, q, batch, mask) = random_problem(seed);
        let cfg = LossConfig { mu: 0.6, lambda: 0.9, lr: 0.1, local_iters: 1, batch_size: 1, grad_clip: None, q_grad: QGrad::IrOnly };
        let eval = |p: &ParamSet, q: &ImportanceIndicator| {
            let t = loss_and_grads_masked(&arch, p, q, &global, &batch, &cfg, &mask).unwrap().terms;
            (t.l_tr + cfg.mu * t.l_pr + cfg.lambda * t.l_ir, cfg.lambda * t.l_ir)
        };
        let lg = loss_and_grads_masked(&arch, &params, &q, &global, &batch, &cfg, &mask).map_err(|e| e.to_string())?;
        let base = params.to_flat();
        for (i, &a) in lg.grads_w.to_flat().iter().enumerate() {
            let shifted = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let mut p = params.clone();
                for (slot, x) in p.values_mut().zip(v) {
                    *slot = x;
                }
                p
            };
            let fd = (eval(&shifted(h), &q).0 - eval(&shifted(-h), &q).0) / (2.0 * h);
            let e = rel_err(a, fd);
            worst = worst.max(e);
            checked += 1;
            if e > 1e-4 {
                return Err(format!("net {seed}, weight {i}: {a} vs {fd}"));
            }
        }
        for j in 0..q.len() {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus.scores[j] += h;
            minus.scores[j] -= h;
            let fd = (eval(&params, &plus).1 - eval(&params, &minus).1) / (2.0 * h);
            let e = rel_err(lg.grads_q[j], fd);
            worst = worst.max(e);
            checked += 1;
            if e > 1e-4 {
                return Err(format!("net {seed}, score {j}: {} vs {fd}", lg.grads_q[j]));
            }
        }
    }
    within(started.elapsed(), Duration::from_secs(30), format!("20 nets, {checked} entries, worst rel err {worst:.1e}"))
}

fn mask_cardinality() -> Verdict {
    let started = Instant::now();
    let arch = Arch::mlp(5, &[9, 4, 13], 3).unwrap();
    let widths = [9usize, 4, 13];
    let mut rng = stream(77, Purpose::Verify, 0, 0);
    for trial in 0..10 {
        let q = ImportanceIndicator::for_arch((0..arch.unit_count()).map(|_| rng.gen_range(0.0..1.0)).collect(), &arch).unwrap();
        let mut prev: Option<Vec<Vec<bool>>> = None;
        for i in 1..=20 {
            let s = i as f64 * 0.05;
            let mask = build_mask(&derive_pattern(&q, SparseRatio::new(s, 0.05).unwrap()), &arch).unwrap();
            for (l, (layer, &w)) in mask.hidden().iter().zip(&widths).enumerate() {
                let want = ((s * w as f64).round() as usize).max(1);
                let got = layer.iter().filter(|&&b| b).count();
                if got != want {
                    return Err(format!("trial {trial}, s {s:.2}, layer {l}: {got} kept, expected {want}"));
                }
            }
            if let Some(p) = &prev {
                let lost = p.iter().flatten().zip(mask.hidden().iter().flatten()).any(|(&a, &b)| a && !b);
                if lost {
                    return Err(format!("trial {trial}: s {s:.2} is not a superset of the previous ratio"));
                }
            }
            prev = Some(mask.hidden().to_vec());
        }
    }
    within(started.elapsed(), Duration::from_secs(5), "20 ratios x 10 score vectors".into())
}

fn dense_equivalence() -> Verdict {
    let cfg = dense_config(10, 5);
    let fed = build_federation(&cfg).map_err(|e| e.to_string())?;
    let train: Vec<_> = fed.data.iter().map(|d| d.train.clone()).collect();
    let arch = fed.arch.clone();
    let mut sim = Simulation::from_federation(cfg.clone(), fed).map_err(|e| e.to_string())?;
    let settings = FedAvgSettings {
        seed: cfg.seed,
        rounds: 10,
        client_fraction: cfg.client_fraction,
        local_iters: cfg.local_iters,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
    };
    let reference = fedavg_reference(&arch, sim.global(), &train, &settings).map_err(|e| e.to_string())?;
    for (r, want) in reference.iter().enumerate() {
        sim.step().map_err(|e| e.to_string())?;
        let same = sim.global().values().zip(want.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("diverged at round {r}"));
        }
    }
    Ok("10 rounds, 5 clients, bit-exact".into())
}

fn aggregation() -> Verdict {
    for inst in 0..50u64 {
        let mut rng = stream(inst, Purpose::Verify, 7, 0);
        let arch = Arch::mlp(rng.gen_range(2..6), &[rng.gen_range(2..7), rng.gen_range(2..5)], rng.gen_range(2..4)).unwrap();
        let global = ParamSet::init(&arch, &mut rng);
        let n = rng.gen_range(1..7);
        let mut ids: Vec<usize> = (0..30).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        let mut res = Vec::new();
        let mut counts = Vec::new();
        for _ in 0..n {
            let hidden = arch.hidden_widths().iter().map(|&w| (0..w).map(|i| i == 0 || rng.gen_bool(0.5)).collect()).collect();
            let pm = UnitMask::from_layers(hidden).param_mask(&arch);
            let mut r = ParamSet::init(&arch, &mut rng);
            for (v, m) in r.values_mut().zip(pm.values()) {
                *v = rng.gen_range(-2.0..2.0) * m;
            }
            res.push(r);
            counts.push(rng.gen_range(1..500usize));
        }
        let contribs: Vec<Contribution<'_>> = (0..n).map(|i| Contribution { client: ids[i], samples: counts[i], residual: &res[i] }).collect();
        let got = aggregate(&global, &contribs).map_err(|e| e.to_string())?.to_flat();

        let mut by_id: Vec<usize> = (0..n).collect();
        by_id.sort_by_key(|&i| ids[i]);
        let total = counts.iter().sum::<usize>() as f64;
        let flat: Vec<Vec<f64>> = res.iter().map(|r| r.to_flat()).collect();
        for (e, g) in global.to_flat().iter().enumerate() {
            let mut num = 0.0;
            for &i in &by_id {
                num += counts[i] as f64 * flat[i][e];
            }
            let want = g - num / total;
            if got[e].to_bits() != want.to_bits() {
                return Err(format!("instance {inst}, element {e}: {} vs {want}", got[e]));
            }
        }
    }
    Ok("50 instances exact".into())
}

struct Arm {
    lo: f64,
    hi: f64,
    g: Vec<f64>,
}

fn bandit_replay() -> Verdict {
    let accuracy = [10.0, 30.0, 25.0, 40.0, 40.0, 38.0, 60.0, 65.0];
    let cost = [2.0, 1.5, 0.5, 1.0, 3.0, 0.8, 1.2, 0.6];
    let (i0, s_min, r_total, k, frac, rho, delta) = (4usize, 0.05, 60usize, 20usize, 0.5, 0.5, 0.0);
    let mut agent = BanditAgent::init(i0, s_min, r_total, k, frac, rho, &mut stream(31, Purpose::BanditInit, 0, 0)).map_err(|e| e.to_string())?;

    let mut init = stream(31, Purpose::BanditInit, 0, 0);
    let w = (1.0 - s_min) / 4.0;
    let mut arms: Vec<Arm> = (0..4).map(|i| Arm { lo: s_min + w * i as f64, hi: if i == 3 { 1.0 } else { s_min + w * (i + 1) as f64 }, g: vec![] }).collect();
    let xi = r_total as f64 / (k as f64 * frac);
    let pick = init.gen_range(0..4);
    let mut s = init.gen_range(arms[pick].lo..arms[pick].hi);
    let mut prev_a = 0.0;
    let mut fired = 0;

    for r in 0..accuracy.len() {
        let sel = agent.update_and_select(accuracy[r], cost[r], delta, &mut stream(31, Purpose::Bandit, 0, r as u64)).map_err(|e| e.to_string())?;

        let g = (utility(accuracy[r]) - utility(prev_a)) / cost[r];
        let u = arms.iter().position(|a| a.lo <= s && s < a.hi).unwrap();
        let mut receivers = vec![u];
        let split = s > arms[u].lo;
        if split {
            let parent = arms.remove(u);
            arms.insert(u, Arm { lo: s, hi: parent.hi, g: parent.g.clone() });
            arms.insert(u, Arm { lo: parent.lo, hi: s, g: parent.g });
            receivers = vec![u, u + 1];
        }
        let eliminate = accuracy[r] - prev_a < delta && split && arms.len() > 1;
        if eliminate {
            arms.remove(u);
            receivers = vec![u];
            fired += 1;
        }
        if sel.eliminated != eliminate {
            return Err(format!("round {r}: elimination {} expected {eliminate}", sel.eliminated));
        }
        if arms.is_empty() || agent.partitions().is_empty() {
            return Err(format!("round {r}: no partition left"));
        }
        let eps = 2f64.powi(-(r as i32 + 1));
        if agent.epsilon() != eps {
            return Err(format!("round {r}: epsilon {} expected {eps}", agent.epsilon()));
        }
        for &i in &receivers {
            arms[i].g.push(g);
        }
        let psi = xi / (arms.len() * arms.len()) as f64;
        let l = (xi * psi * eps).ln();
        if sel.scores.len() != arms.len() {
            return Err(format!("round {r}: {} partitions expected {}", sel.scores.len(), arms.len()));
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, arm) in arms.iter().enumerate() {
            let h = arm.g.len() as f64;
            let m = if arm.g.is_empty() { 0.0 } else { arm.g.iter().sum::<f64>() / h };
            let v = if arm.g.is_empty() { 0.0 } else { arm.g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / h };
            let bonus = if l > 0.0 { (rho * (v + 2.0) * l / (4.0 * (h + 1.0))).sqrt() } else { 0.0 };
            let score = m + bonus;
            let got = &sel.scores[i];
            if (got.mean - m).abs() > 1e-9 || (got.variance - v).abs() > 1e-9 || (got.ucbv - score).abs() > 1e-9 {
                return Err(format!("round {r}, partition {i}: ({}, {}, {}) expected ({m}, {v}, {score})", got.mean, got.variance, got.ucbv));
            }
            if score > best.1 {
                best = (i, score);
            }
        }
        let next = stream(31, Purpose::Bandit, 0, r as u64).gen_range(arms[best.0].lo..arms[best.0].hi);
        if sel.chosen != best.0 || (sel.ratio - next).abs() > 1e-9 || (sel.reward - g).abs() > 1e-9 {
            return Err(format!("round {r}: selected {} at {}, expected {} at {next}", sel.chosen, sel.ratio, best.0));
        }
        s = next;
        prev_a = accuracy[r];
    }
    if fired == 0 {
        return Err("script never triggered an elimination".into());
    }
    Ok(format!("8 rounds, {fired} eliminations"))
}

fn closed_forms() -> Verdict {
    if utility(0.0) != 0.0 {
        return Err(format!("U(0) = {}", utility(0.0)));
    }
    // 10 - 20/(1+e^x) = 10 tanh(x/2), evaluated with exp_m1 for accuracy
    let u = |a: f64| {
        let e = (0.35 * a).exp_m1();
        10.0 * e / (e + 2.0)
    };
    let mut rng = stream(55, Purpose::Verify, 0, 0);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a: f64 = rng.gen_range(0.0..100.0);
        let b: f64 = rng.gen_range(0.0..100.0);
        let t: f64 = rng.gen_range(0.01..20.0);
        let want = (u(a) - u(b)) / t;
        let got = reward(a, b, t).map_err(|e| e.to_string())?;
        let err = (got - want).abs().max((utility(a) - u(a)).abs());
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("sample {i}: reward {got} vs {want}"));
        }
    }
    Ok(format!("100 samples, worst abs err {worst:.1e}"))
}

fn cost_model() -> Verdict {
    let arch = Arch::mlp(10, &[12, 6], 4).unwrap();
    let mut rng = stream(66, Purpose::Verify, 0, 0);
    let q = ImportanceIndicator::for_arch((0..arch.unit_count()).map(|_| rng.gen_range(0.0..1.0)).collect(), &arch).unwrap();
    let (batch, iters, alpha) = (20usize, 10usize, 0.7);
    let levels = [1.0, 0.5, 0.25, 0.125, 0.0625];
    let (mut last_f, mut last_b) = (0.0, 0u64);
    for i in 1..=20 {
        let s = i as f64 * 0.05;
        let mask = build_mask(&derive_pattern(&q, SparseRatio::new(s, 0.05).unwrap()), &arch).unwrap();
        let k1 = ((s * 12.0).round() as usize).max(1);
        let k2 = ((s * 6.0).round() as usize).max(1);
        let weights = 10 * k1 + k1 * k2 + k2 * 4;
        let flops = 6.0 * weights as f64 * batch as f64 * iters as f64;
        let upload = (weights + k1 + k2 + 4 + 1) as u64;
        let mut times = Vec::new();
        for &z in &levels {
            let profile = DeviceProfile::for_level(z, 727e9, 2e6).unwrap();
            let rep = cost_report(&arch, &mask, batch, iters, &profile, alpha);
            let t = flops / (727e9 * z) + alpha * upload as f64 / (2e6 * z);
            if rep.flops != flops || rep.upload_params != upload || rep.local_time != t {
                return Err(format!("s {s:.2}, z {z}: ({}, {}, {}) expected ({flops}, {upload}, {t})", rep.flops, rep.upload_params, rep.local_time));
            }
            times.push(t);
        }
        let slowest = times.iter().copied().fold(0.0, f64::max);
        if global_cost(&times).map_err(|e| e.to_string())? != slowest {
            return Err(format!("s {s:.2}: global cost is not the slowest client"));
        }
        if flops < last_f || upload < last_b {
            return Err(format!("cost decreased at s {s:.2}"));
        }
        last_f = flops;
        last_b = upload;
    }
    Ok("20 ratios x 5 levels exact, monotone".into())
}

struct RunSummary {
    accuracy: f64,
    flops: f64,
    lead_ltr: f64,
    trail_ltr: f64,
    majority: f64,
}

fn run(cfg: Config) -> RunSummary {
    let fed = build_federation(&cfg).unwrap();
    let majority = mean(
        &fed.data
            .iter()
            .map(|d| {
                let split = if d.test.is_empty() { &d.train } else { &d.test };
                let h = split.label_histogram();
                *h.iter().max().unwrap() as f64 / split.len() as f64 * 100.0
            })
            .collect::<Vec<_>>(),
    );
    let mut sim = Simulation::from_federation(cfg, fed).unwrap();
    sim.run().unwrap();
    let m = sim.metrics();
    let ltr: Vec<f64> = m.iter().map(|r| r.mean_l_tr).collect();
    let w = 10.min(ltr.len());
    RunSummary {
        accuracy: m.last().unwrap().mean_test_acc,
        flops: m.last().unwrap().cumulative_flops,
        lead_ltr: mean(&ltr[..w]),
        trail_ltr: mean(&ltr[ltr.len() - w..]),
        majority,
    }
}

fn pattern_ablation() -> Verdict {
    let started = Instant::now();
    let mut acc = Vec::new();
    for strategy in PatternStrategy::ALL {
        let runs: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = Config {
                    seed,
                    pattern: strategy,
                    ratio_rule: RatioRule::Fixed,
                    fixed_ratio: 0.5,
                    capability_levels: vec![1.0],
                    ..desk()
                };
                run(cfg).accuracy
            })
            .collect();
        acc.push(mean(&runs));
    }
    let [learn, random, ordered, magnitude] = [acc[0], acc[1], acc[2], acc[3]];
    let detail = format!("learnable {learn:.2}, random {random:.2}, ordered {ordered:.2}, magnitude {magnitude:.2}");
    if learn >= random + 2.0 && learn >= ordered && learn >= magnitude - 1.0 {
        within(started.elapsed(), Duration::from_secs(300), detail)
    } else {
        Err(detail)
    }
}

fn ratio_rule_and_convergence() -> (Verdict, Verdict) {
    let started = Instant::now();
    let pucbv: Vec<RunSummary> = SEEDS.iter().map(|&seed| run(Config { seed, ratio_rule: RatioRule::Pucbv, ..desk() })).collect();
    let pucbv_time = started.elapsed();
    let rcr: Vec<RunSummary> = SEEDS.iter().map(|&seed| run(Config { seed, ratio_rule: RatioRule::Rcr, ..desk() })).collect();

    let acc = |v: &[RunSummary]| mean(&v.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let flops = |v: &[RunSummary]| mean(&v.iter().map(|r| r.flops).collect::<Vec<_>>());
    let detail = format!(
        "P-UCBV {:.2}% at {:.3e} FLOPs, RCR {:.2}% at {:.3e} FLOPs",
        acc(&pucbv),
        flops(&pucbv),
        acc(&rcr),
        flops(&rcr)
    );
    let ratio = if flops(&pucbv) <= flops(&rcr) && acc(&pucbv) >= acc(&rcr) - 0.5 {
        within(started.elapsed(), Duration::from_secs(300), detail)
    } else {
        Err(detail)
    };

    let decreasing = pucbv.iter().all(|r| r.trail_ltr < r.lead_ltr);
    let majority = mean(&pucbv.iter().map(|r| r.majority).collect::<Vec<_>>());
    let losses: Vec<String> = pucbv.iter().map(|r| format!("{:.3}->{:.3}", r.lead_ltr, r.trail_ltr)).collect();
    let detail = format!("l_tr {}, accuracy {:.2}% vs majority {:.2}%", losses.join(" "), acc(&pucbv), majority);
    let convergence = if decreasing && acc(&pucbv) >= majority + 30.0 {
        within(pucbv_time, Duration::from_secs(300), detail)
    } else {
        Err(detail)
    };
    (ratio, convergence)
}

fn determinism() -> Verdict {
    let base = Config { rounds: 8, ..desk() };
    let one = Config { threads: 1, ..base.clone() };
    let many = Config { threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(4), ..base };
    let csv = |cfg: Config| {
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run().unwrap();
        sim.metrics_csv()
    };
    let (a, b) = (csv(one), csv(many));
    if a.as_bytes() == b.as_bytes() {
        Ok(format!("{} bytes identical", a.len()))
    } else {
        Err("metrics CSV differs between thread counts".into())
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = vec![
        ("gradient correctness", gradients()),
        ("mask cardinality", mask_cardinality()),
        ("dense equivalence", dense_equivalence()),
        ("aggregation oracle", aggregation()),
        ("bandit replay", bandit_replay()),
        ("utility and reward", closed_forms()),
        ("cost model", cost_model()),
        ("pattern ablation", pattern_ablation()),
    ];
    let (ratio, convergence) = ratio_rule_and_convergence();
    results.push(("ratio-rule ablation", ratio));
    results.push(("convergence", convergence));
    results.push(("determinism", determinism()));

    let mut failed = 0;
    for (i, (name, verdict)) in results.iter().enumerate() {
        match verdict {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1)
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
