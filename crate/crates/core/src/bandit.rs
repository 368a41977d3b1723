//! P-UCBV: a per-client bandit over the continuous sparse-ratio interval.
//!
//! The interval is held as a list of half-open partitions. Each update splits
//! the partition that produced the last ratio at that ratio, optionally drops
//! one half when accuracy fell by more than the threshold, credits the reward
//! to the surviving halves, and samples the next ratio from the partition with
//! the highest variance-aware upper confidence score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlpsError, Result};

/// `U(a) = 10 - 20 / (1 + e^{0.35 a})` for accuracy `a` in percent.
pub fn utility(accuracy_pct: f64) -> f64 {
    10.0 - 20.0 / (1.0 + (0.35 * accuracy_pct).exp())
}

/// `G = (U(a_r) - U(a_{r-1})) / T`.
pub fn reward(accuracy: f64, prev_accuracy: f64, cost: f64) -> Result<f64> {
    if !(cost > 0.0) {
        return Err(FlpsError::config(format!("reward needs a positive local cost, got {cost}")));
    }
    Ok((utility(accuracy) - utility(prev_accuracy)) / cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EliminateSide {
    /// Drop `[lo, s)`: the ratios below the one that hurt accuracy.
    #[default]
    Lower,
    /// Drop `[s, hi)`.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitStats {
    /// Both halves start with a copy of the parent's reward list.
    #[default]
    Inherit,
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub lo: f64,
    pub hi: f64,
    pub rewards: Vec<f64>,
}

impl Partition {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi, rewards: Vec::new() }
    }

    pub fn contains(&self, s: f64) -> bool {
        self.lo <= s && s < self.hi
    }

    pub fn pulls(&self) -> usize {
        self.rewards.len()
    }

    /// Mean reward; 0 before the first pull.
    pub fn mean(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    /// Population variance of the rewards; 0 before the first pull.
    pub fn variance(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        self.rewards.iter().map(|g| (g - m) * (g - m)).sum::<f64>() / self.rewards.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub variance: f64,
    pub pulls: usize,
    pub ucbv: f64,
}

/// What one update did, for the ledger and for replay checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ratio: f64,
    pub chosen: usize,
    pub reward: f64,
    pub eliminated: bool,
    pub log_floored: bool,
    pub scores: Vec<PartitionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditAgent {
    partitions: Vec<Partition>,
    /// ε_r, halved on every update.
    explore_eps: f64,
    xi: f64,
    psi: f64,
    rho: f64,
    last_ratio: f64,
    last_accuracy: f64,
    updates: u64,
    eliminations: u64,
    log_floors: u64,
    eliminate: EliminateSide,
    split_stats: SplitStats,
}

/// Serialized view for the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub partitions: Vec<PartitionSnapshot>,
    pub epsilon: f64,
    pub xi: f64,
    pub psi: f64,
    pub rho: f64,
    pub last_ratio: f64,
    pub last_accuracy: f64,
    pub eliminations: u64,
    pub log_floor_warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSnapshot {
    pub lo: f64,
    pub hi: f64,
    pub pulls: usize,
    pub reward_sum: f64,
    pub reward_sum_sq: f64,
}

/// UCBV score of every partition. The exploration bonus is
/// `sqrt(ρ (v̄ + 2) ln(ξ ψ ε) / (4 (h + 1)))`; when the logarithm is negative
/// the bonus is floored at zero and the second return value is `true`.
pub fn score_partitions(partitions: &[Partition], xi: f64, psi: f64, eps: f64, rho: f64) -> (Vec<PartitionScore>, bool) {
    let log_term = (xi * psi * eps).ln();
    let floored = !(log_term >= 0.0);
    let scores = partitions
        .iter()
        .map(|p| {
            let mean = p.mean();
            let variance = p.variance();
            let bonus = if floored {
                0.0
            } else {
                (rho * (variance + 2.0) * log_term / (4.0 * (p.pulls() as f64 + 1.0))).sqrt()
            };
            PartitionScore { lo: p.lo, hi: p.hi, mean, variance, pulls: p.pulls(), ucbv: mean + bonus }
        })
        .collect();
    (scores, floored)
}

/// Index of the highest score; the lower index wins ties.
pub fn best_partition(scores: &[PartitionScore]) -> usize {
    let mut chosen = 0;
    for (i, sc) in scores.iter().enumerate().skip(1) {
        if sc.ucbv > scores[chosen].ucbv {
            chosen = i;
        }
    }
    chosen
}

impl BanditAgent {
    /// `I_0` equal partitions of `[s_min, 1)`; `ξ = R / (K ε)`, `ψ = ξ / I_0²`;
    /// the first ratio is drawn from a uniformly chosen partition.
    pub fn init<R: Rng + ?Sized>(
        initial_partitions: usize,
        s_min: f64,
        rounds: usize,
        clients: usize,
        client_fraction: f64,
        rho: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if initial_partitions == 0 {
            return Err(FlpsError::config("bandit needs at least one initial partition"));
        }
        if !(s_min > 0.0 && s_min < 1.0) {
            return Err(FlpsError::config(format!("s_min must lie in (0, 1), got {s_min}")));
        }
        if clients == 0 || !(client_fraction > 0.0) {
            return Err(FlpsError::config("bandit needs K >= 1 and a positive client fraction"));
        }
        let width = (1.0 - s_min) / initial_partitions as f64;
        let partitions: Vec<Partition> = (0..initial_partitions)
            .map(|i| {
                let lo = s_min + width * i as f64;
                let hi = if i + 1 == initial_partitions { 1.0 } else { s_min + width * (i + 1) as f64 };
                Partition::new(lo, hi)
            })
            .collect();
        let xi = rounds as f64 / (clients as f64 * client_fraction);
        let psi = xi / (initial_partitions * initial_partitions) as f64;
        let first = &partitions[rng.gen_range(0..partitions.len())];
        let last_ratio = rng.gen_range(first.lo..first.hi);
        Ok(Self {
            partitions,
            explore_eps: 1.0,
            xi,
            psi,
            rho,
            last_ratio,
            last_accuracy: 0.0,
            updates: 0,
            eliminations: 0,
            log_floors: 0,
            eliminate: EliminateSide::Lower,
            split_stats: SplitStats::Inherit,
        })
    }

    pub fn with_policy(mut self, eliminate: EliminateSide, split_stats: SplitStats) -> Self {
        self.eliminate = eliminate;
        self.split_stats = split_stats;
        self
    }

    /// Accuracy of the initial global model on the client's data (`a^{-1}`).
    pub fn with_initial_accuracy(mut self, accuracy: f64) -> Self {
        self.last_accuracy = accuracy;
        self
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn epsilon(&self) -> f64 {
        self.explore_eps
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn last_ratio(&self) -> f64 {
        self.last_ratio
    }

    pub fn last_accuracy(&self) -> f64 {
        self.last_accuracy
    }

    pub fn eliminations(&self) -> u64 {
        self.eliminations
    }

    pub fn log_floor_warnings(&self) -> u64 {
        self.log_floors
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Feed back the accuracy and local cost observed at the last ratio and
    /// choose the next one.
    pub fn update_and_select<R: Rng + ?Sized>(
        &mut self,
        accuracy: f64,
        cost: f64,
        delta: f64,
        rng: &mut R,
    ) -> Result<Selection> {
        let g = reward(accuracy, self.last_accuracy, cost)?;
        let s = self.last_ratio;
        let u = self
            .partitions
            .iter()
            .position(|p| p.contains(s))
            .ok_or_else(|| FlpsError::structural(format!("last ratio {s} lies in no partition")))?;

        // split; `lower` is [lo, s), `upper` is [s, hi)
        let (mut lower, mut upper) = (None, u);
        if s > self.partitions[u].lo {
            let parent = self.partitions.remove(u);
            let inherited = match self.split_stats {
                SplitStats::Inherit => parent.rewards.clone(),
                SplitStats::Fresh => Vec::new(),
            };
            self.partitions.insert(u, Partition { lo: s, hi: parent.hi, rewards: inherited.clone() });
            self.partitions.insert(u, Partition { lo: parent.lo, hi: s, rewards: inherited });
            lower = Some(u);
            upper = u + 1;
        }

        let mut eliminated = false;
        if accuracy - self.last_accuracy < delta && self.partitions.len() > 1 {
            if let Some(lo_idx) = lower {
                match self.eliminate {
                    EliminateSide::Lower => {
                        self.partitions.remove(lo_idx);
                        lower = None;
                        upper = lo_idx;
                    }
                    EliminateSide::Upper => {
                        self.partitions.remove(upper);
                        upper = usize::MAX;
                    }
                }
                eliminated = true;
                self.eliminations += 1;
            }
        }

        self.explore_eps /= 2.0;
        let count = self.partitions.len();
        self.psi = self.xi / (count * count) as f64;

        if let Some(i) = lower {
            self.partitions[i].rewards.push(g);
        }
        if upper != usize::MAX {
            self.partitions[upper].rewards.push(g);
        }

        let (scores, log_floored) = score_partitions(&self.partitions, self.xi, self.psi, self.explore_eps, self.rho);
        if log_floored {
            self.log_floors += 1;
        }
        let chosen = best_partition(&scores);
        let p = &self.partitions[chosen];
        let ratio = rng.gen_range(p.lo..p.hi);

        self.last_ratio = ratio;
        self.last_accuracy = accuracy;
        self.updates += 1;
        Ok(Selection { ratio, chosen, reward: g, eliminated, log_floored, scores })
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            partitions: self
                .partitions
                .iter()
                .map(|p| PartitionSnapshot {
                    lo: p.lo,
                    hi: p.hi,
                    pulls: p.pulls(),
                    reward_sum: p.rewards.iter().sum(),
                    reward_sum_sq: p.rewards.iter().map(|g| g * g).sum(),
                })
                .collect(),
            epsilon: self.explore_eps,
            xi: self.xi,
            psi: self.psi,
            rho: self.rho,
            last_ratio: self.last_ratio,
            last_accuracy: self.last_accuracy,
            eliminations: self.eliminations,
            log_floor_warnings: self.log_floors,
        }
    }

    #[cfg(test)]
    pub(crate) fn set_partitions(&mut self, partitions: Vec<Partition>, last_ratio: f64) {
        self.partitions = partitions;
        self.last_ratio = last_ratio;
    }
}
