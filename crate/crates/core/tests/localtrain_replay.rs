//! Client update replayed with plain scalar loops on a 3-4-2 network.

use std::sync::Arc;

use fedlps::baselines::PatternStrategy;
use fedlps::costmodel::{DeviceProfile, REFERENCE_BANDWIDTH, REFERENCE_FLOPS};
use fedlps::datahetero::synth_dataset;
use fedlps::localtrain::{client_update, ClientState, LocalData, LossConfig, QGrad, UpdateContext};
use fedlps::netcore::{Arch, ParamSet};
use fedlps::rng::{stream, Purpose};
use fedlps::sparsity::ImportanceIndicator;

const IN: usize = 3;
const H: usize = 4;
const OUT: usize = 2;

#[derive(Clone)]
struct Net {
    w1: [[f64; IN]; H],
    b1: [f64; H],
    w2: [[f64; H]; OUT],
    b2: [f64; OUT],
}

impl Net {
    fn from(p: &ParamSet) -> Self {
        let l0 = &p.layers[0];
        let l1 = &p.layers[1];
        let mut n = Net { w1: [[0.0; IN]; H], b1: [0.0; H], w2: [[0.0; H]; OUT], b2: [0.0; OUT] };
        for j in 0..H {
            for c in 0..IN {
                n.w1[j][c] = l0.weights[j * IN + c];
            }
            n.b1[j] = l0.bias[j];
        }
        for o in 0..OUT {
            for j in 0..H {
                n.w2[o][j] = l1.weights[o * H + j];
            }
            n.b2[o] = l1.bias[o];
        }
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for j in 0..H {
            v.extend_from_slice(&self.w1[j]);
        }
        v.extend_from_slice(&self.b1);
        for o in 0..OUT {
            v.extend_from_slice(&self.w2[o]);
        }
        v.extend_from_slice(&self.b2);
        v
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

fn keep_top2(q: &[f64; H]) -> [bool; H] {
    let mut idx: Vec<usize> = (0..H).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    let mut keep = [false; H];
    for &i in &idx[..2] {
        keep[i] = true;
    }
    keep
}

fn mag(n: &Net, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..IN {
        s += n.w1[j][c].abs();
    }
    s += n.b1[j].abs();
    for o in 0..OUT {
        s += n.w2[o][j].abs();
    }
    s
}

struct Cfg {
    mu: f64,
    lambda: f64,
    lr: f64,
}

/// One local iteration; returns the updated net and scores.
fn step(n: &Net, q: &[f64; H], g: &Net, xs: &[[f64; IN]], ys: &[usize], c: &Cfg) -> (Net, [f64; H]) {
    let keep = keep_top2(q);
    let m = |j: usize| if keep[j] { 1.0 } else { 0.0 };
    let b = xs.len() as f64;
    let mut gw1 = [[0.0; IN]; H];
    let mut gb1 = [0.0; H];
    let mut gw2 = [[0.0; H]; OUT];
    let mut gb2 = [0.0; OUT];
    // forward for every sample, then accumulate in sample order
    let mut acts = Vec::new();
    let mut pres = Vec::new();
    let mut deltas = Vec::new();
    for (x, &y) in xs.iter().zip(ys) {
        let mut z1 = [0.0; H];
        let mut a1 = [0.0; H];
        for j in 0..H {
            let mut acc = 0.0;
            for cc in 0..IN {
                acc += (n.w1[j][cc] * m(j)) * x[cc];
            }
            z1[j] = acc + n.b1[j] * m(j);
            a1[j] = if z1[j] > 0.0 { z1[j] } else { 0.0 };
        }
        let mut z2 = [0.0; OUT];
        for o in 0..OUT {
            let mut acc = 0.0;
            for j in 0..H {
                acc += (n.w2[o][j] * m(j)) * a1[j];
            }
            z2[o] = acc + n.b2[o];
        }
        let mx = z2[0].max(z2[1]);
        let sum = (z2[0] - mx).exp() + (z2[1] - mx).exp();
        let mut d = [0.0; OUT];
        for o in 0..OUT {
            let p = (z2[o] - mx).exp() / sum;
            let t = if o == y { 1.0 } else { 0.0 };
            d[o] = (p - t) / b;
        }
        acts.push(a1);
        pres.push(z1);
        deltas.push(d);
    }
    for o in 0..OUT {
        for j in 0..H {
            let mut acc = 0.0;
            for s in 0..xs.len() {
                acc += deltas[s][o] * acts[s][j];
            }
            gw2[o][j] = acc;
        }
        let mut acc = 0.0;
        for d in &deltas {
            acc += d[o];
        }
        gb2[o] = acc;
    }
    let mut d1 = Vec::new();
    for s in 0..xs.len() {
        let mut v = [0.0; H];
        for j in 0..H {
            let mut acc = 0.0;
            for o in 0..OUT {
                acc += deltas[s][o] * (n.w2[o][j] * m(j));
            }
            v[j] = if pres[s][j] > 0.0 { acc } else { 0.0 };
        }
        d1.push(v);
    }
    for j in 0..H {
        for cc in 0..IN {
            let mut acc = 0.0;
            for s in 0..xs.len() {
                acc += d1[s][j] * xs[s][cc];
            }
            gw1[j][cc] = acc;
        }
        let mut acc = 0.0;
        for v in &d1 {
            acc += v[j];
        }
        gb1[j] = acc;
    }

    // scores: l_ir pull plus the straight-through task signal
    let t: Vec<f64> = (0..H).map(|j| sigmoid(mag(n, j))).collect();
    let mut next_q = *q;
    for j in 0..H {
        let mut ste = 0.0;
        for cc in 0..IN {
            ste += gw1[j][cc] * n.w1[j][cc];
        }
        ste += gb1[j] * n.b1[j];
        for o in 0..OUT {
            ste += gw2[o][j] * n.w2[o][j];
        }
        let gq = c.lambda * (2.0 * (q[j] - t[j])) + ste;
        next_q[j] = q[j] - c.lr * gq;
    }

    let coef: Vec<f64> = (0..H).map(|j| -2.0 * (q[j] - t[j]) * t[j] * (1.0 - t[j])).collect();
    let upd = |w: f64, gt: f64, mk: f64, gw: f64, reg: f64| {
        let mut gsum = gt * mk;
        gsum += c.mu * (2.0 * (w - gw));
        gsum += c.lambda * reg;
        w - c.lr * gsum
    };
    let mut out = n.clone();
    for j in 0..H {
        for cc in 0..IN {
            out.w1[j][cc] = upd(n.w1[j][cc], gw1[j][cc], m(j), g.w1[j][cc], coef[j] * sign(n.w1[j][cc]));
        }
        out.b1[j] = upd(n.b1[j], gb1[j], m(j), g.b1[j], coef[j] * sign(n.b1[j]));
    }
    for o in 0..OUT {
        for j in 0..H {
            out.w2[o][j] = upd(n.w2[o][j], gw2[o][j], m(j), g.w2[o][j], coef[j] * sign(n.w2[o][j]));
        }
        out.b2[o] = upd(n.b2[o], gb2[o], 1.0, g.b2[o], 0.0);
    }
    (out, next_q)
}

#[test]
fn two_clients_two_iterations_replay_bit_exact() {
    let arch = Arch::mlp(IN, &[H], OUT).unwrap();
    let global = ParamSet::init(&arch, &mut stream(21, Purpose::Init, 0, 0));
    let ds = synth_dataset(2, IN, 30, 4.0, &mut stream(21, Purpose::Data, 0, 0)).unwrap();
    let cfg = LossConfig { mu: 0.5, lambda: 0.5, lr: 0.2, local_iters: 2, batch_size: 5, grad_clip: None, q_grad: QGrad::Ste };
    let replay_cfg = Cfg { mu: cfg.mu, lambda: cfg.lambda, lr: cfg.lr };

    for k in 0..2usize {
        let rows: Vec<usize> = (k * 30..k * 30 + 30).collect();
        let train = ds.subset(&rows).unwrap();
        let test = ds.subset(&rows[..4]).unwrap();
        let q0 = [0.9, 0.2 + 0.3 * k as f64, 0.7, 0.4];
        let state = ClientState {
            id: k,
            importance: ImportanceIndicator::for_arch(q0.to_vec(), &arch).unwrap(),
            capability: 1.0,
            data: Arc::new(LocalData { train: train.clone(), test }),
            last_accuracy: 0.0,
            personal: None,
        };
        let ctx = UpdateContext {
            arch: &arch,
            global: &global,
            cfg: &cfg,
            strategy: PatternStrategy::Learnable,
            s_min: 0.05,
            profile: DeviceProfile::for_level(1.0, REFERENCE_FLOPS, REFERENCE_BANDWIDTH).unwrap(),
            alpha: 1.0,
            single_precision: false,
            accuracy_probe: false,
            seed: 9,
            round: 3,
        };
        let (report, next) = client_update(&state, &ctx, 0.5).unwrap();

        let g = Net::from(&global);
        let mut n = g.clone();
        let mut q = q0;
        let mut rng = stream(9, Purpose::Batch, k as u64, 3);
        for _ in 0..2 {
            let batch = train.sample_batch(5, &mut rng).unwrap();
            let xs: Vec<[f64; IN]> = (0..5).map(|r| [batch.inputs.get(r, 0), batch.inputs.get(r, 1), batch.inputs.get(r, 2)]).collect();
            let (nn, nq) = step(&n, &q, &g, &xs, &batch.labels, &replay_cfg);
            n = nn;
            q = nq;
        }
        let keep = keep_top2(&q);
        let mut res = Net::from(&global);
        for j in 0..H {
            let m = if keep[j] { 1.0 } else { 0.0 };
            for c in 0..IN {
                res.w1[j][c] = (g.w1[j][c] - n.w1[j][c]) * m;
            }
            res.b1[j] = (g.b1[j] - n.b1[j]) * m;
            for o in 0..OUT {
                res.w2[o][j] = (g.w2[o][j] - n.w2[o][j]) * m;
            }
        }
        for o in 0..OUT {
            res.b2[o] = g.b2[o] - n.b2[o];
        }

        let got: Vec<u64> = report.residual.values().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = res.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want, "client {k} residual");
        assert!(report.residual.values().any(|&v| v != 0.0));
        assert!(report.residual.values().filter(|&&v| v == 0.0).count() >= 2 * (IN + 1 + OUT));
        let q_got: Vec<u64> = next.importance.scores.iter().map(|v| v.to_bits()).collect();
        let q_want: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
        assert_eq!(q_got, q_want, "client {k} scores");
        assert_eq!(report.pattern.bits, keep.to_vec());
    }
}
