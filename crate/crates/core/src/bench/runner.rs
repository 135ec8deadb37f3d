use std::io;
use std::process::{Command, Stdio};
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::affinity::{pin_to_core, CorePin, PinError, ThreadPin};
use super::plan::{BenchPlan, Configuration, PlanError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_name: String,
    pub run_index: u32,
    pub wall_ns: u64,
    pub user_ns: u64,
    pub sys_ns: u64,
    pub exit_code: i32,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("failed to spawn `{config}` (run {run}): {source}")]
    SpawnFailure {
        config: String,
        run: u32,
        #[source]
        source: io::Error,
    },
    #[error("`{config}` run {run} exited with code {code} after all retries")]
    NonZeroExit { config: String, run: u32, code: i32 },
    #[error(transparent)]
    Pin(#[from] PinError),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Proceed unpinned when the plan's core cannot be used.
    pub allow_unpinned: bool,
    /// Attempts per run before a non-zero exit is fatal.
    pub retry_cap: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            allow_unpinned: false,
            retry_cap: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    /// Measured runs only, config-major.
    pub records: Vec<RunRecord>,
    pub pinned_core: Option<usize>,
    pub warnings: Vec<String>,
}

/// One child execution: wall time around the process lifetime and the
/// child's own rusage.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub wall_ns: u64,
    pub user_ns: u64,
    pub sys_ns: u64,
    pub exit_code: i32,
}

fn timeval_ns(tv: libc::timeval) -> u64 {
    tv.tv_sec as u64 * 1_000_000_000 + tv.tv_usec as u64 * 1_000
}

/// Spawns `cfg`'s command with output discarded and waits for it.
pub fn measure_once(cfg: &Configuration, pin: Option<CorePin>) -> io::Result<Measurement> {
    let mut cmd = Command::new(&cfg.command[0]);
    cmd.args(&cfg.command[1..])
        .envs(&cfg.env)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    let _pin = pin.map(ThreadPin::new).transpose()?;

    let start = Instant::now();
    let child = cmd.spawn()?;
    let (status, usage) = wait_with_rusage(child.id())?;
    let wall_ns = start.elapsed().as_nanos() as u64;

    Ok(Measurement {
        wall_ns: wall_ns.max(1),
        user_ns: timeval_ns(usage.ru_utime),
        sys_ns: timeval_ns(usage.ru_stime),
        exit_code: exit_code_of(status),
    })
}

fn wait_with_rusage(pid: u32) -> io::Result<(libc::c_int, libc::rusage)> {
    let mut status: libc::c_int = 0;
    // SAFETY: rusage is plain data written by the kernel.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    loop {
        let r = unsafe { libc::wait4(pid as libc::pid_t, &mut status, 0, &mut usage) };
        if r >= 0 {
            return Ok((status, usage));
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
}

fn exit_code_of(status: libc::c_int) -> i32 {
    if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else if libc::WIFSIGNALED(status) {
        128 + libc::WTERMSIG(status)
    } else {
        -1
    }
}

fn resolve_pin(
    plan: &BenchPlan,
    opts: &RunOptions,
    warnings: &mut Vec<String>,
) -> Result<Option<CorePin>, BenchError> {
    let Some(core) = plan.pin_core else {
        warnings.push("no pin_core in plan; benchmark runs unpinned".to_string());
        return Ok(None);
    };
    match pin_to_core(core) {
        Ok(pin) => Ok(Some(pin)),
        Err(e) if opts.allow_unpinned => {
            warnings.push(format!("WARNING: {e}; continuing UNPINNED"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs every configuration serially: its warm-up runs (discarded), then
/// its measured runs. A run exiting non-zero is retried up to
/// `retry_cap` attempts before the benchmark fails.
pub fn run_benchmark(plan: &BenchPlan, opts: &RunOptions) -> Result<BenchRun, BenchError> {
    plan.validate()?;
    let mut warnings = Vec::new();
    let pin = resolve_pin(plan, opts, &mut warnings)?;
    for w in &warnings {
        warn!("{w}");
    }

    // Pin the harness thread too; measure_once's own pin is then a no-op switch.
    let _harness_pin = pin
        .map(ThreadPin::new)
        .transpose()
        .map_err(|e| PinError::PinUnsupported(e.to_string()))?;

    let attempts = opts.retry_cap.max(1);
    let mut records = Vec::with_capacity(plan.configurations.len() * plan.measured_runs as usize);
    for cfg in &plan.configurations {
        let total = plan.warmup_runs + plan.measured_runs;
        for i in 0..total {
            let mut attempt = 0;
            let m = loop {
                attempt += 1;
                let m = measure_once(cfg, pin).map_err(|source| BenchError::SpawnFailure {
                    config: cfg.name.clone(),
                    run: i,
                    source,
                })?;
                if m.exit_code == 0 {
                    break m;
                }
                if attempt >= attempts {
                    return Err(BenchError::NonZeroExit {
                        config: cfg.name.clone(),
                        run: i,
                        code: m.exit_code,
                    });
                }
                warn!(
                    "`{}` run {i} exited with {}; retrying",
                    cfg.name, m.exit_code
                );
            };
            if i >= plan.warmup_runs {
                records.push(RunRecord {
                    config_name: cfg.name.clone(),
                    run_index: i - plan.warmup_runs,
                    wall_ns: m.wall_ns,
                    user_ns: m.user_ns,
                    sys_ns: m.sys_ns,
                    exit_code: m.exit_code,
                });
            }
        }
    }

    Ok(BenchRun {
        records,
        pinned_core: pin.map(|p| p.core()),
        warnings,
    })
}
