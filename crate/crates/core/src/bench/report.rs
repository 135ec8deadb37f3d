use serde::{Deserialize, Serialize};

use crate::par::{map_ordered, Execution};

use super::plan::BenchPlan;
use super::runner::{BenchRun, RunRecord};
use super::stats::{
    relative_overhead, summarize, sys_user_breakdown, trim_records, BenchStats, Breakdown,
    StatsError,
};

/// Header of the rendered statistics table.
pub const TABLE_HEADER: &str = "Type | Mean (ms) | Stddev (ms) | Median (ms) | Min (ms) | Max (ms)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub config_name: String,
    pub percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub pinned_core: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim_pct: Option<f64>,
    pub stats: Vec<BenchStats>,
    pub overhead: Vec<Overhead>,
    pub breakdown: Vec<Breakdown>,
    pub warnings: Vec<String>,
    pub records: Vec<RunRecord>,
}

/// Per-configuration statistics, in plan order. Configurations are
/// independent, so they are summarized concurrently when allowed.
pub fn summarize_all(
    plan: &BenchPlan,
    records: &[RunRecord],
    trim_pct: Option<f64>,
    exec: Execution,
) -> Result<Vec<BenchStats>, StatsError> {
    let groups: Vec<Vec<RunRecord>> = plan
        .configurations
        .iter()
        .map(|c| {
            records
                .iter()
                .filter(|r| r.config_name == c.name)
                .cloned()
                .collect()
        })
        .collect();
    map_ordered(exec, &groups, |g| match trim_pct {
        Some(p) => summarize(&trim_records(g, p)?),
        None => summarize(g),
    })
    .into_iter()
    .collect()
}

pub fn build_report(
    plan: &BenchPlan,
    run: &BenchRun,
    trim_pct: Option<f64>,
    exec: Execution,
) -> Result<BenchReport, StatsError> {
    let stats = summarize_all(plan, &run.records, trim_pct, exec)?;
    let base = stats
        .iter()
        .find(|s| s.config_name == plan.baseline_name)
        .expect("baseline is a plan configuration");
    let overhead = stats
        .iter()
        .filter(|s| s.config_name != plan.baseline_name)
        .map(|s| {
            Ok(Overhead {
                config_name: s.config_name.clone(),
                percent: relative_overhead(s, base)?,
            })
        })
        .collect::<Result<Vec<_>, StatsError>>()?;

    Ok(BenchReport {
        baseline: plan.baseline_name.clone(),
        pinned_core: run.pinned_core,
        trim_pct,
        breakdown: sys_user_breakdown(&run.records),
        stats,
        overhead,
        warnings: run.warnings.clone(),
        records: run.records.clone(),
    })
}

impl BenchReport {
    /// Statistics table followed by one overhead line per non-baseline
    /// configuration. Values are rounded to 3 decimals here and only here.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for s in &self.stats {
            out.push_str(&format!(
                "{} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3}\n",
                s.config_name, s.mean_ms, s.stddev_ms, s.median_ms, s.min_ms, s.max_ms
            ));
        }
        if !self.overhead.is_empty() {
            out.push_str(&format!("\nOverhead vs {}\n", self.baseline));
            for o in &self.overhead {
                out.push_str(&format!("{} | {:+.2}%\n", o.config_name, o.percent));
            }
        }
        out
    }

    pub fn results_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn breakdown_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.breakdown).expect("breakdown serializes");
        s.push('\n');
        s
    }

    pub fn breakdown_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in &self.breakdown {
            w.serialize(b)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
