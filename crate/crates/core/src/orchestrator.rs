//! The synchronous round loop: select clients, train them in parallel,
//! aggregate their sparse residuals and let each client's bandit pick its
//! next sparse ratio.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{reward, AgentSnapshot, BanditAgent};
use crate::baselines::{heuristic_pattern, rcr_ratio, PatternStrategy, RatioRule};
use crate::checkpoint;
use crate::config::{Config, DatasetKind, Precision};
use crate::costmodel::{global_cost, DeviceProfile};
use crate::datahetero::{assign_capabilities, load_idx, pathological_partition, synth_dataset, Dataset};
use crate::error::{FlpsError, Result, RunContext};
use crate::localtrain::{LossConfig, client_update, effective_ratio, evaluate, ClientReport, ClientState, LocalData, UpdateContext};
use crate::metrics::{self, MetricsRow};
use crate::netcore::{Arch, GradSet, ParamSet};
use crate::rng::{stream, Purpose};
use crate::sparsity::{build_mask, derive_pattern, ImportanceIndicator, SparsePattern};

/// `max(⌊ε K⌋, 1)` distinct clients drawn uniformly, in ascending order.
pub fn select_clients<R: Rng + ?Sized>(clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FlpsError::config(format!("cannot select from {clients} clients with fraction {fraction}")));
    }
    let c = ((fraction * clients as f64).floor() as usize).clamp(1, clients);
    let mut idx = rand::seq::index::sample(rng, clients, c).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub client: usize,
    pub samples: usize,
    pub residual: &'a GradSet,
}

/// `ω^{r+1} = ω^r − Σ_k |D_k| ŵ_k / Σ_k |D_k|`, summed in client-id order.
pub fn aggregate(global: &ParamSet, contributions: &[Contribution<'_>]) -> Result<ParamSet> {
    let total: usize = contributions.iter().map(|c| c.samples).sum();
    if total == 0 {
        return Err(FlpsError::config("aggregation over zero samples"));
    }
    let mut order: Vec<&Contribution<'_>> = contributions.iter().collect();
    order.sort_by_key(|c| c.client);
    let mut weighted = ParamSet::zeros_like(global);
    for c in order {
        let n = c.samples as f64;
        weighted = weighted.zip_map(c.residual, |acc, d| acc + n * d)?;
    }
    let total = total as f64;
    global.zip_map(&weighted, |g, d| g - d / total)
}

/// Data, capabilities and architecture of a run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub arch: Arch,
    pub data: Vec<Arc<LocalData>>,
    pub classes: Vec<Vec<usize>>,
    pub capabilities: Vec<f64>,
    pub class_count: usize,
}

pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => synth_dataset(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_per_class,
            cfg.synth_sep,
            &mut stream(cfg.seed, Purpose::Data, 0, 0),
        ),
        DatasetKind::Idx => {
            let (Some(images), Some(labels)) = (&cfg.idx_images, &cfg.idx_labels) else {
                return Err(FlpsError::config("idx dataset paths missing"));
            };
            load_idx(images, labels)
        }
    }
}

pub fn build_federation(cfg: &Config) -> Result<Federation> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let plan = pathological_partition(
        &ds,
        cfg.clients,
        cfg.classes_per_client,
        cfg.test_fraction,
        &mut stream(cfg.seed, Purpose::Partition, 0, 0),
    )?;
    let capabilities = assign_capabilities(cfg.clients, &cfg.capability_levels, &mut stream(cfg.seed, Purpose::Capability, 0, 0))?;
    let arch = Arch::mlp(ds.dim(), &cfg.hidden, ds.class_count)?;
    let mut data = Vec::with_capacity(cfg.clients);
    let mut classes = Vec::with_capacity(cfg.clients);
    for split in &plan.clients {
        data.push(Arc::new(LocalData { train: ds.subset(&split.train)?, test: ds.subset(&split.test)? }));
        classes.push(split.classes.clone());
    }
    Ok(Federation { arch, data, classes, capabilities, class_count: ds.class_count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub client: usize,
    pub ratio_sampled: f64,
    pub ratio_effective: f64,
    pub cost: f64,
    pub accuracy: f64,
    pub reward: f64,
    pub flops: f64,
    pub upload: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: usize,
    pub selected: Vec<usize>,
    pub entries: Vec<LedgerEntry>,
    pub global_cost: f64,
    /// SHA-256 of the aggregated global model.
    pub digest: String,
}

pub struct Simulation {
    cfg: Config,
    loss: LossConfig,
    arch: Arch,
    global: ParamSet,
    clients: Vec<ClientState>,
    agents: Vec<Option<BanditAgent>>,
    /// Ratio each client will be asked to train at next.
    ratios: Vec<f64>,
    profiles: Vec<DeviceProfile>,
    round: usize,
    ledgers: Vec<RoundLedger>,
    metrics: Vec<MetricsRow>,
    cumulative_flops: f64,
    cumulative_time: f64,
    pool: rayon::ThreadPool,
    checkpoint_dir: Option<PathBuf>,
}

impl Simulation {
    pub fn new(cfg: Config) -> Result<Self> {
        let fed = build_federation(&cfg)?;
        Self::from_federation(cfg, fed)
    }

    pub fn from_federation(cfg: Config, fed: Federation) -> Result<Self> {
        cfg.validate()?;
        let arch = fed.arch;
        let global = ParamSet::init(&arch, &mut stream(cfg.seed, Purpose::Init, 0, 0));
        let importance = ImportanceIndicator::from_magnitudes(&arch, &global)?;
        let mut clients = Vec::with_capacity(fed.data.len());
        let mut agents = Vec::with_capacity(fed.data.len());
        let mut ratios = Vec::with_capacity(fed.data.len());
        let mut profiles = Vec::with_capacity(fed.data.len());
        for (k, data) in fed.data.into_iter().enumerate() {
            let z = fed.capabilities[k];
            // accuracy of the dense initial model on the local training split
            let a0 = evaluate(&arch, &global, &data.train)?;
            let agent = match cfg.ratio_rule {
                RatioRule::Pucbv => Some(
                    BanditAgent::init(
                        cfg.partitions,
                        cfg.s_min,
                        cfg.rounds,
                        cfg.clients,
                        cfg.client_fraction,
                        cfg.rho,
                        &mut stream(cfg.seed, Purpose::BanditInit, k as u64, 0),
                    )?
                    .with_policy(cfg.eliminate, cfg.split_stats)
                    .with_initial_accuracy(a0),
                ),
                _ => None,
            };
            ratios.push(match (&agent, cfg.ratio_rule) {
                (Some(a), _) => a.last_ratio(),
                (None, RatioRule::Rcr) => rcr_ratio(z, cfg.s_min),
                _ => cfg.fixed_ratio,
            });
            agents.push(agent);
            profiles.push(DeviceProfile::for_level(z, cfg.base_flops, cfg.base_bandwidth)?);
            clients.push(ClientState {
                id: k,
                importance: importance.clone(),
                capability: z,
                data,
                last_accuracy: a0,
                personal: None,
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| FlpsError::config(format!("thread pool: {e}")))?;
        Ok(Self {
            loss: cfg.loss_config(),
            cfg,
            arch,
            global,
            clients,
            agents,
            ratios,
            profiles,
            round: 0,
            ledgers: Vec::new(),
            metrics: Vec::new(),
            cumulative_flops: 0.0,
            cumulative_time: 0.0,
            pool,
            checkpoint_dir: None,
        })
    }

    /// Directory for periodic checkpoints (see `checkpoint_every`).
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn global(&self) -> &ParamSet {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn ledgers(&self) -> &[RoundLedger] {
        &self.ledgers
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn agent(&self, k: usize) -> Option<&BanditAgent> {
        self.agents.get(k).and_then(|a| a.as_ref())
    }

    pub fn pending_ratio(&self, k: usize) -> f64 {
        self.ratios[k]
    }

    pub fn total_flops(&self) -> f64 {
        self.cumulative_flops
    }

    pub fn total_sim_time(&self) -> f64 {
        self.cumulative_time
    }

    fn update_context(&self, k: usize) -> UpdateContext<'_> {
        let mut profile = self.profiles[k];
        if self.cfg.capability_jitter {
            profile = profile.jittered(&mut stream(self.cfg.seed, Purpose::Jitter, k as u64, self.round as u64));
        }
        UpdateContext {
            arch: &self.arch,
            global: &self.global,
            cfg: &self.loss,
            strategy: self.cfg.pattern,
            s_min: self.cfg.s_min,
            profile,
            alpha: self.cfg.alpha,
            single_precision: self.cfg.precision == Precision::F32,
            accuracy_probe: self.cfg.accuracy_probe,
            seed: self.cfg.seed,
            round: self.round,
        }
    }

    /// Run one round and return its ledger.
    pub fn step(&mut self) -> Result<RoundLedger> {
        let r = self.round;
        let selected = select_clients(self.clients.len(), self.cfg.client_fraction, &mut stream(self.cfg.seed, Purpose::Selection, 0, r as u64))?;

        let results: Vec<Result<(ClientReport, ClientState)>> = {
            let this = &*self;
            this.pool.install(|| {
                selected
                    .par_iter()
                    .map(|&k| client_update(&this.clients[k], &this.update_context(k), this.ratios[k]))
                    .collect()
            })
        };
        let mut reports = Vec::with_capacity(selected.len());
        let mut prev_acc = Vec::with_capacity(selected.len());
        for res in results {
            let (report, state) = res?;
            prev_acc.push(self.clients[report.client].last_accuracy);
            self.clients[report.client] = state;
            reports.push(report);
        }

        let contributions: Vec<Contribution<'_>> = reports
            .iter()
            .map(|rep| Contribution { client: rep.client, samples: rep.sample_count, residual: &rep.residual })
            .collect();
        let mut global = aggregate(&self.global, &contributions)?;
        if self.cfg.precision == Precision::F32 {
            global.round_to_f32();
        }
        if !global.all_finite() {
            return Err(FlpsError::NonFinite { what: "global model", ctx: RunContext { round: Some(r), ..Default::default() } });
        }
        self.global = global;

        let mut entries = Vec::with_capacity(reports.len());
        for (rep, &prev) in reports.iter().zip(&prev_acc) {
            let k = rep.client;
            let g = match &mut self.agents[k] {
                Some(agent) => {
                    let sel = agent
                        .update_and_select(rep.train_accuracy, rep.cost.local_time, self.cfg.delta, &mut stream(self.cfg.seed, Purpose::Bandit, k as u64, r as u64))
                        .map_err(|e| e.in_context(RunContext::client(r, k)))?;
                    self.ratios[k] = sel.ratio;
                    sel.reward
                }
                None => reward(rep.train_accuracy, prev, rep.cost.local_time)?,
            };
            entries.push(LedgerEntry {
                client: k,
                ratio_sampled: rep.ratio_sampled,
                ratio_effective: rep.ratio_effective,
                cost: rep.cost.local_time,
                accuracy: rep.train_accuracy,
                reward: g,
                flops: rep.cost.flops,
                upload: rep.cost.upload_params,
            });
        }
        let times: Vec<f64> = entries.iter().map(|e| e.cost).collect();
        let round_cost = global_cost(&times)?;
        self.cumulative_time += round_cost;
        self.cumulative_flops += entries.iter().map(|e| e.flops).sum::<f64>();

        let n = reports.len() as f64;
        let accs = self.test_accuracies()?;
        let row = MetricsRow {
            round: r,
            mean_test_acc: accs.iter().sum::<f64>() / accs.len() as f64,
            cumulative_flops: self.cumulative_flops,
            cumulative_sim_time: self.cumulative_time,
            mean_ratio: entries.iter().map(|e| e.ratio_effective).sum::<f64>() / n,
            mean_reward: entries.iter().map(|e| e.reward).sum::<f64>() / n,
            eliminated_partitions: self.agents.iter().flatten().map(|a| a.eliminations()).sum(),
            mean_l_tr: reports.iter().map(|x| x.loss.l_tr).sum::<f64>() / n,
            mean_l_pr: reports.iter().map(|x| x.loss.l_pr).sum::<f64>() / n,
            mean_l_ir: reports.iter().map(|x| x.loss.l_ir).sum::<f64>() / n,
            log_floor_warnings: self.agents.iter().flatten().map(|a| a.log_floor_warnings()).sum(),
        };
        self.metrics.push(row);

        let ledger = RoundLedger { round: r, selected, entries, global_cost: round_cost, digest: self.global.digest() };
        self.ledgers.push(ledger.clone());
        self.round += 1;

        if let (Some(dir), true) = (&self.checkpoint_dir, self.cfg.checkpoint_every > 0) {
            if self.round % self.cfg.checkpoint_every == 0 {
                checkpoint::write(&dir.join(format!("ckpt_{r}.bin")), &self.arch, &self.global, None)?;
            }
        }
        Ok(ledger)
    }

    /// Run all remaining rounds.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// The model client `k` would deploy: its personalised model if it has
    /// trained, otherwise the global model under its own pattern.
    pub fn client_model(&self, k: usize) -> Result<(ParamSet, SparsePattern)> {
        let c = &self.clients[k];
        if let Some(p) = &c.personal {
            return Ok((p.params.clone(), p.pattern.clone()));
        }
        let s = effective_ratio(self.ratios[k], c.capability, self.cfg.s_min);
        let pattern = match self.cfg.pattern {
            PatternStrategy::Learnable => derive_pattern(&c.importance, s),
            other => heuristic_pattern(other, &self.arch, &self.global, s, &mut stream(self.cfg.seed, Purpose::Pattern, k as u64, u64::MAX))?,
        };
        let mask = build_mask(&pattern, &self.arch)?;
        Ok((self.global.hadamard(&mask.param_mask(&self.arch))?, pattern))
    }

    /// Percent accuracy of every client's deployed model on its test split
    /// (the training split if the test split is empty).
    pub fn test_accuracies(&self) -> Result<Vec<f64>> {
        let evals: Vec<Result<f64>> = self.pool.install(|| {
            (0..self.clients.len())
                .into_par_iter()
                .map(|k| {
                    let (params, _) = self.client_model(k)?;
                    let d = &self.clients[k].data;
                    evaluate(&self.arch, &params, if d.test.is_empty() { &d.train } else { &d.test })
                })
                .collect()
        });
        evals.into_iter().collect()
    }

    pub fn metrics_csv(&self) -> String {
        metrics::to_csv(&self.metrics)
    }

    pub fn agent_snapshots(&self) -> Vec<Option<AgentSnapshot>> {
        self.agents.iter().map(|a| a.as_ref().map(BanditAgent::snapshot)).collect()
    }

    pub fn manifest(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format": "fedlps-manifest v1",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "config": self.cfg,
            "rounds_completed": self.round,
            "ledgers": self.ledgers,
            "final_accuracies": self.test_accuracies()?,
            "capabilities": self.clients.iter().map(|c| c.capability).collect::<Vec<_>>(),
            "total_sim_time": self.cumulative_time,
            "total_flops": self.cumulative_flops,
            "global_digest": self.global.digest(),
            "agents": self.agent_snapshots(),
        }))
    }

    /// Write `metrics.csv` and `manifest.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FlpsError::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.metrics_csv()).map_err(|e| FlpsError::io(&csv, e))?;
        let man = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest()?).map_err(|e| FlpsError::config(e.to_string()))?;
        fs::write(&man, text).map_err(|e| FlpsError::io(&man, e))
    }
}
