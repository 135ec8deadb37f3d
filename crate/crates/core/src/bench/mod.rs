//! Overhead benchmarking: warm-up plus measured runs of each configured
//! command, pinned to one core, summarized per configuration and compared
//! against a baseline.

mod affinity;
mod plan;
mod report;
mod runner;
mod stats;
mod workload;

pub use affinity::{affinity_of, current_affinity, pin_to_core, CorePin, PinError};
pub use plan::{BenchPlan, Configuration, Instrumentation, PlanError};
pub use report::{build_report, summarize_all, BenchReport, Overhead, TABLE_HEADER};
pub use runner::{
    measure_once, run_benchmark, BenchError, BenchRun, Measurement, RunOptions, RunRecord,
};
pub use stats::{
    overhead_from_means, relative_overhead, summarize, sys_user_breakdown, trim_records,
    BenchStats, Breakdown, StatsError,
};
pub use workload::{self_workload, WorkloadError};
