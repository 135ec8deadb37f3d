use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::runner::RunRecord;

const NS_PER_MS: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 runs for statistics, got {0}")]
    InsufficientRuns(usize),
    #[error("baseline mean is zero")]
    ZeroBaseline,
    #[error("trim percentage must be in [0, 50), got {0}")]
    InvalidTrim(f64),
}

/// Wall-time statistics of one configuration, in milliseconds at full
/// precision. Rounding happens only when rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub config_name: String,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub user_ms_total: f64,
    pub sys_ms_total: f64,
    pub n: usize,
}

/// Mean, sample standard deviation (n - 1), median, min and max of the
/// wall times of `records`, which must all belong to one configuration.
pub fn summarize(records: &[RunRecord]) -> Result<BenchStats, StatsError> {
    let n = records.len();
    if n < 2 {
        return Err(StatsError::InsufficientRuns(n));
    }
    let mut wall: Vec<u64> = records.iter().map(|r| r.wall_ns).collect();
    wall.sort_unstable();

    // Exact integer sum keeps the mean independent of record order.
    let total: u128 = wall.iter().map(|&w| w as u128).sum();
    let mean_ns = total as f64 / n as f64;
    let ss: f64 = wall
        .iter()
        .map(|&w| {
            let d = w as f64 - mean_ns;
            d * d
        })
        .sum();
    let stddev_ns = (ss / (n - 1) as f64).sqrt();
    let median_ns = if n % 2 == 1 {
        wall[n / 2] as f64
    } else {
        (wall[n / 2 - 1] as f64 + wall[n / 2] as f64) / 2.0
    };
    let user: u128 = records.iter().map(|r| r.user_ns as u128).sum();
    let sys: u128 = records.iter().map(|r| r.sys_ns as u128).sum();

    Ok(BenchStats {
        config_name: records[0].config_name.clone(),
        mean_ms: mean_ns / NS_PER_MS,
        stddev_ms: stddev_ns / NS_PER_MS,
        median_ms: median_ns / NS_PER_MS,
        min_ms: wall[0] as f64 / NS_PER_MS,
        max_ms: wall[n - 1] as f64 / NS_PER_MS,
        user_ms_total: user as f64 / NS_PER_MS,
        sys_ms_total: sys as f64 / NS_PER_MS,
        n,
    })
}

/// Percentage increase of the candidate's mean over the baseline's.
pub fn relative_overhead(candidate: &BenchStats, baseline: &BenchStats) -> Result<f64, StatsError> {
    overhead_from_means(candidate.mean_ms, baseline.mean_ms)
}

pub fn overhead_from_means(candidate_mean: f64, baseline_mean: f64) -> Result<f64, StatsError> {
    if baseline_mean <= 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (candidate_mean - baseline_mean) / baseline_mean)
}

/// Drops the `pct` percent fastest and slowest runs by wall time.
pub fn trim_records(records: &[RunRecord], pct: f64) -> Result<Vec<RunRecord>, StatsError> {
    if !(0.0..50.0).contains(&pct) {
        return Err(StatsError::InvalidTrim(pct));
    }
    let k = (records.len() as f64 * pct / 100.0).floor() as usize;
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.wall_ns, r.run_index));
    let kept: Vec<RunRecord> = sorted[k..sorted.len() - k].to_vec();
    if kept.len() < 2 {
        return Err(StatsError::InsufficientRuns(kept.len()));
    }
    Ok(kept)
}

/// User and system CPU time of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub config_name: String,
    pub runs: usize,
    pub user_ms_total: f64,
    pub sys_ms_total: f64,
    pub user_ms_mean: f64,
    pub sys_ms_mean: f64,
}

/// Per-configuration user/system totals and means, in order of first
/// appearance.
pub fn sys_user_breakdown(records: &[RunRecord]) -> Vec<Breakdown> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.config_name.as_str()) {
            order.push(&r.config_name);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let (mut user, mut sys, mut runs) = (0u128, 0u128, 0usize);
            for r in records.iter().filter(|r| r.config_name == name) {
                user += r.user_ns as u128;
                sys += r.sys_ns as u128;
                runs += 1;
            }
            let user_ms_total = user as f64 / NS_PER_MS;
            let sys_ms_total = sys as f64 / NS_PER_MS;
            Breakdown {
                config_name: name.to_string(),
                runs,
                user_ms_total,
                sys_ms_total,
                user_ms_mean: user_ms_total / runs as f64,
                sys_ms_mean: sys_ms_total / runs as f64,
            }
        })
        .collect()
}
