//! Per-round metrics and their CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const CSV_VERSION_LINE: &str = "# fedlps-metrics v1";
pub const CSV_HEADER: &str = "round,mean_test_acc,cumulative_flops,cumulative_sim_time,mean_ratio,mean_reward,eliminated_partitions,mean_l_tr,mean_l_pr,mean_l_ir,log_floor_warnings";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    /// Mean over clients of personalised test accuracy, percent.
    pub mean_test_acc: f64,
    pub cumulative_flops: f64,
    pub cumulative_sim_time: f64,
    /// Mean effective ratio of this round's participants.
    pub mean_ratio: f64,
    pub mean_reward: f64,
    /// Total partitions dropped so far across all agents.
    pub eliminated_partitions: u64,
    pub mean_l_tr: f64,
    pub mean_l_pr: f64,
    pub mean_l_ir: f64,
    pub log_floor_warnings: u64,
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    s.push_str(CSV_VERSION_LINE);
    s.push('\n');
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.mean_test_acc,
            r.cumulative_flops,
            r.cumulative_sim_time,
            r.mean_ratio,
            r.mean_reward,
            r.eliminated_partitions,
            r.mean_l_tr,
            r.mean_l_pr,
            r.mean_l_ir,
            r.log_floor_warnings
        );
    }
    s
}
