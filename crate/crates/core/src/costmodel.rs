//! FLOP and upload accounting, and the simulated time each client spends.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs in the forward pass and
//! the backward pass costs twice the forward pass, so a training step costs
//! `6 x retained MACs` per sample. Biases and importance-score updates are
//! not counted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlpsError, Result};
use crate::netcore::Arch;
use crate::sparsity::UnitMask;

/// Adreno 630 peak throughput, used for capability level 1.
pub const REFERENCE_FLOPS: f64 = 727e9;
/// Parameters per second uploaded by a level-1 device.
pub const REFERENCE_BANDWIDTH: f64 = 1e6;
/// Pattern bits are uploaded packed into words of this many bits.
pub const PATTERN_WORD_BITS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub flops_capacity: f64,
    pub bandwidth_capacity: f64,
    pub capability: f64,
}

impl DeviceProfile {
    /// Both capacities scale linearly with the capability level.
    pub fn for_level(capability: f64, base_flops: f64, base_bandwidth: f64) -> Result<Self> {
        let p = Self {
            flops_capacity: base_flops * capability,
            bandwidth_capacity: base_bandwidth * capability,
            capability,
        };
        if !(p.flops_capacity > 0.0 && p.bandwidth_capacity > 0.0) || !p.flops_capacity.is_finite() {
            return Err(FlpsError::config(format!("device capacities must be positive (level {capability})")));
        }
        Ok(p)
    }

    /// Scale both capacities by an independent factor in `[0.8, 1.2)`.
    pub fn jittered<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Self {
            flops_capacity: self.flops_capacity * rng.gen_range(0.8..1.2),
            bandwidth_capacity: self.bandwidth_capacity * rng.gen_range(0.8..1.2),
            capability: self.capability,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: f64,
    pub upload_params: u64,
    pub local_time: f64,
}

/// Training FLOPs for `iters` steps of `samples` examples through the masked net.
pub fn flops_of_round(arch: &Arch, mask: &UnitMask, samples: usize, iters: usize) -> f64 {
    6.0 * mask.retained_weights(arch) as f64 * samples as f64 * iters as f64
}

/// Non-zero parameter slots plus the packed unit pattern, in parameter units.
pub fn upload_size(arch: &Arch, mask: &UnitMask) -> u64 {
    let words = arch.unit_count().div_ceil(PATTERN_WORD_BITS);
    (mask.retained_params(arch) + words) as u64
}

/// `T = F̂ / F + α · B̂ / B`.
pub fn local_cost(flops: f64, upload: u64, profile: &DeviceProfile, alpha: f64) -> f64 {
    flops / profile.flops_capacity + alpha * upload as f64 / profile.bandwidth_capacity
}

/// A synchronous round lasts as long as its slowest client.
pub fn global_cost(local_times: &[f64]) -> Result<f64> {
    if local_times.is_empty() {
        return Err(FlpsError::config("global cost of a round with no clients"));
    }
    Ok(local_times.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn cost_report(arch: &Arch, mask: &UnitMask, samples: usize, iters: usize, profile: &DeviceProfile, alpha: f64) -> CostReport {
    let flops = flops_of_round(arch, mask, samples, iters);
    let upload_params = upload_size(arch, mask);
    CostReport { flops, upload_params, local_time: local_cost(flops, upload_params, profile, alpha) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Activation, LayerSpec};
    use crate::rng::{stream, Purpose};
    use crate::sparsity::{build_mask, derive_pattern, ImportanceIndicator, SparseRatio};

    #[test]
    fn zero_iterations_cost_nothing() {
        let arch = Arch::mlp(3, &[2], 2).unwrap();
        let floor = UnitMask::from_layers(vec![vec![true, false]]);
        assert_eq!(flops_of_round(&arch, &floor, 20, 0), 0.0);
    }

    #[test]
    fn dense_1024_stack_reference_point() {
        let spec = |a| LayerSpec { in_dim: 1024, out_dim: 1024, activation: a };
        let arch = Arch::new(vec![spec(Activation::Relu), spec(Activation::Relu), spec(Activation::SoftmaxLogits)]).unwrap();
        let ones = UnitMask::all_ones(&arch);
        // forward-only MAC FLOPs of the first two layers
        let forward_two = 2.0 * (1024.0 * 1024.0 * 2.0);
        assert_eq!(forward_two, 4_194_304.0);
        // full training convention over all three layers
        assert_eq!(flops_of_round(&arch, &ones, 1, 1), 6.0 * 3.0 * 1024.0 * 1024.0);
    }

    #[test]
    fn flops_match_edge_enumeration() {
        let arch = Arch::mlp(8, &[6], 4).unwrap();
        let mut rng = stream(21, Purpose::Verify, 0, 0);
        for _ in 0..10 {
            let bits: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
            let m = UnitMask::from_layers(vec![bits.clone()]);
            // each kept hidden unit carries 8 incoming and 4 outgoing edges
            let macs = bits.iter().filter(|&&k| k).count() * (8 + 4);
            assert_eq!(flops_of_round(&arch, &m, 5, 3), 6.0 * macs as f64 * 15.0);
        }
    }

    #[test]
    fn upload_counts() {
        let arch = Arch::mlp(4, &[4, 4], 2).unwrap();
        let ones = UnitMask::all_ones(&arch);
        assert_eq!(upload_size(&arch, &ones), arch.param_count() as u64 + 1);
        let floor = UnitMask::from_layers(vec![vec![false, true, false, false], vec![true, false, false, false]]);
        // 4 + 1 | 1 + 1 | 2 + 2, plus one pattern word
        assert_eq!(upload_size(&arch, &floor), 12);

        let q = ImportanceIndicator::for_arch((0..8).map(|i| i as f64).collect(), &arch).unwrap();
        let half = build_mask(&derive_pattern(&q, SparseRatio::new(0.5, 0.05).unwrap()), &arch).unwrap();
        assert!(upload_size(&arch, &half) < upload_size(&arch, &ones));
    }

    #[test]
    fn local_cost_formula() {
        let p = DeviceProfile { flops_capacity: 4.0, bandwidth_capacity: 6.0, capability: 1.0 };
        assert_eq!(local_cost(2.0, 3, &p, 2.0), 1.5);
        assert_eq!(local_cost(2.0, 0, &p, 2.0), 0.5);
        let mut rng = stream(22, Purpose::Verify, 0, 0);
        for _ in 0..100 {
            let f: f64 = rng.gen_range(0.0..1e9);
            let b: u64 = rng.gen_range(0..100_000);
            let prof = DeviceProfile {
                flops_capacity: rng.gen_range(1.0..1e12),
                bandwidth_capacity: rng.gen_range(1.0..1e7),
                capability: 1.0,
            };
            let a: f64 = rng.gen_range(0.0..3.0);
            assert_eq!(local_cost(f, b, &prof, a), f / prof.flops_capacity + a * b as f64 / prof.bandwidth_capacity);
        }
    }

    #[test]
    fn doubling_compute_halves_compute_term() {
        let p = DeviceProfile::for_level(0.25, REFERENCE_FLOPS, REFERENCE_BANDWIDTH).unwrap();
        let mut p2 = p;
        p2.flops_capacity *= 2.0;
        assert_eq!(local_cost(3e9, 0, &p2, 1.0) * 2.0, local_cost(3e9, 0, &p, 1.0));
    }

    #[test]
    fn global_cost_is_max() {
        assert_eq!(global_cost(&[1.7]).unwrap(), 1.7);
        assert_eq!(global_cost(&[1.0, 2.5, 0.3]).unwrap(), 2.5);
        assert!(global_cost(&[]).is_err());
        let mut rng = stream(23, Purpose::Verify, 0, 0);
        let xs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..10.0)).collect();
        let mut oracle = xs[0];
        for &x in &xs {
            if x > oracle {
                oracle = x;
            }
        }
        assert_eq!(global_cost(&xs).unwrap(), oracle);
    }

    #[test]
    fn jitter_stays_in_band() {
        let p = DeviceProfile::for_level(0.5, REFERENCE_FLOPS, REFERENCE_BANDWIDTH).unwrap();
        let mut rng = stream(24, Purpose::Jitter, 0, 0);
        for _ in 0..100 {
            let j = p.jittered(&mut rng);
            assert!(j.flops_capacity >= 0.8 * p.flops_capacity && j.flops_capacity < 1.2 * p.flops_capacity);
        }
    }
}
