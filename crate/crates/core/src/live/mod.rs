//! Live capture: runs a command under perf_event_open tracing and writes
//! the same JSONL event stream the replay pipelines read.
//!
//! The command is forked but held before `execve` until every event is
//! attached; all events are opened with enable-on-exec, so recording
//! starts exactly at the command's first instruction. Lifecycle events
//! come either from kernel task records plus tracepoints, or from
//! user-placed uprobes/USDT probes (see [`placement`]).

pub mod convert;
pub mod decode;
pub mod launch;
pub mod perf;
pub mod placement;
pub mod probe;
pub mod tracefs;

use std::collections::HashMap;
use std::ffi::{CString, OsString};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::trace::{write_event_stream, TaskId, TraceEvent};

use convert::{ConvertOptions, EventRole, RootInfo};
use decode::{decode_record, Record, SampleLayout};
use launch::HeldChild;
use perf::{Event, EventSpec, RingBuffer};
use placement::{PlacementFile, PlacementKind, ResolvedProbe, ValueSource};

pub use probe::{capability_probe, CapabilityReport, FORCE_NO_LIVE_ENV};

/// How lifecycle (fork/exec/exit) events are captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttachMode {
    Uprobes,
    Usdt,
    #[default]
    Tracepoints,
}

impl AttachMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttachMode::Uprobes => "uprobes",
            AttachMode::Usdt => "usdt",
            AttachMode::Tracepoints => "tracepoints",
        }
    }
}

impl fmt::Display for AttachMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttachMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uprobes" => Ok(AttachMode::Uprobes),
            "usdt" => Ok(AttachMode::Usdt),
            "tracepoints" => Ok(AttachMode::Tracepoints),
            other => Err(format!(
                "unknown attach mode `{other}` (expected uprobes, usdt or tracepoints)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LiveOutput {
    File(PathBuf),
    Memory,
}

#[derive(Debug, Clone)]
pub struct LiveSessionConfig {
    pub command: Vec<OsString>,
    pub sample_period_ns: Option<u64>,
    pub enable_sampling: bool,
    pub enable_sched: bool,
    pub enable_lifecycle: bool,
    pub attach_mode: AttachMode,
    /// Required for the uprobes and usdt attach modes.
    pub placement: Option<PlacementFile>,
    pub output: LiveOutput,
    /// Data pages per CPU ring buffer; a power of two.
    pub ring_pages: usize,
}

impl LiveSessionConfig {
    pub fn new(command: Vec<OsString>, output: LiveOutput) -> Self {
        LiveSessionConfig {
            command,
            sample_period_ns: None,
            enable_sampling: false,
            enable_sched: false,
            enable_lifecycle: false,
            attach_mode: AttachMode::default(),
            placement: None,
            output,
            ring_pages: 256,
        }
    }

    pub fn validate(&self) -> Result<(), LiveError> {
        let bad = |m: &str| Err(LiveError::InvalidConfig(m.to_string()));
        if self.command.is_empty() {
            return bad("command is empty");
        }
        if !(self.enable_sampling || self.enable_sched || self.enable_lifecycle) {
            return bad("enable at least one of sampling, sched, lifecycle");
        }
        if self.enable_sampling && self.sample_period_ns.is_none_or(|p| p == 0) {
            return bad("sampling needs a sample period > 0 ns");
        }
        if self.enable_lifecycle
            && self.attach_mode != AttachMode::Tracepoints
            && self.placement.is_none()
        {
            return Err(LiveError::InvalidConfig(format!(
                "{} attach mode needs a probe placement file",
                self.attach_mode
            )));
        }
        if !self.ring_pages.is_power_of_two() {
            return bad("ring_pages must be a power of two");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("invalid live session: {0}")]
    InvalidConfig(String),
    #[error("live tracing is not available: {}", .0.join("; "))]
    CapabilityDenied(Vec<String>),
    #[error("cannot attach {mechanism}: {detail}")]
    AttachFailure { mechanism: String, detail: String },
    #[error("cannot start command: {0}")]
    ChildSpawnFailure(#[source] io::Error),
    #[error("cannot write trace: {0}")]
    Output(#[source] io::Error),
    #[error("collector failed: {0}")]
    Collector(String),
}

fn attach_err(mechanism: &str, detail: impl fmt::Display) -> LiveError {
    LiveError::AttachFailure {
        mechanism: mechanism.to_string(),
        detail: detail.to_string(),
    }
}

/// Outcome of [`record`].
#[derive(Debug, Clone)]
pub struct Recording {
    pub events: Vec<TraceEvent>,
    pub path: Option<PathBuf>,
    pub child_exit_code: i32,
    pub lost_records: u64,
    pub dropped_samples: u64,
    pub warnings: Vec<String>,
}

fn denial(config: &LiveSessionConfig, report: &CapabilityReport) -> Option<Vec<String>> {
    let mut missing = Vec::new();
    if !report.tracing_available {
        return Some(report.reasons.clone());
    }
    if config.enable_sampling && !report.sampling {
        missing.push("sampling");
    }
    if (config.enable_sched || config.enable_lifecycle) && !report.context_switches {
        missing.push("task and context-switch records");
    }
    if config.enable_lifecycle {
        match config.attach_mode {
            AttachMode::Tracepoints if !report.tracepoints => missing.push("tracepoints"),
            AttachMode::Uprobes | AttachMode::Usdt if !report.uprobes => missing.push("uprobes"),
            _ => {}
        }
    }
    if missing.is_empty() {
        return None;
    }
    let mut reasons: Vec<String> = missing.iter().map(|m| format!("{m} unavailable")).collect();
    reasons.extend(report.reasons.iter().cloned());
    Some(reasons)
}

/// One event to open on every CPU, with its meaning.
struct Planned {
    mechanism: &'static str,
    spec: EventSpec,
    role: EventRole,
    /// Follow the command's descendants.
    inherit: bool,
}

struct Plan {
    events: Vec<Planned>,
    warnings: Vec<String>,
    /// Probe definitions to remove once the events are closed.
    probes: Option<tracefs::DynamicProbes>,
}

fn plan_events(config: &LiveSessionConfig, report: &CapabilityReport) -> Result<Plan, LiveError> {
    let mut planned = Vec::new();
    let mut warnings = Vec::new();
    let mut dynamic = None;
    let tracepoint_lifecycle =
        config.enable_lifecycle && config.attach_mode == AttachMode::Tracepoints;

    if config.enable_sched || config.enable_lifecycle {
        let mut spec = EventSpec::task_tracking();
        spec.context_switch = config.enable_sched;
        planned.push(Planned {
            mechanism: "task events",
            spec,
            role: EventRole::Tracking,
            inherit: true,
        });
    }
    if config.enable_sampling {
        planned.push(Planned {
            mechanism: "cpu-clock sampling",
            spec: EventSpec::cpu_clock(config.sample_period_ns.expect("validated")),
            role: EventRole::Sampling,
            inherit: true,
        });
    }
    if tracepoint_lifecycle {
        let root = report
            .tracefs
            .clone()
            .ok_or_else(|| attach_err("tracepoints", "tracefs is not mounted"))?;
        let exec = tracefs::load_tracepoint(&root, "sched", "sched_process_exec")
            .map_err(|e| attach_err("tracepoints", format!("sched/sched_process_exec: {e}")))?;
        let filename =
            exec.format.field("filename").cloned().ok_or_else(|| {
                attach_err("tracepoints", "sched_process_exec has no filename field")
            })?;
        planned.push(Planned {
            mechanism: "tracepoints",
            spec: EventSpec::tracepoint(exec.id),
            role: EventRole::ExecTracepoint { filename },
            inherit: true,
        });
        for (name, group) in [("sys_enter_exit_group", true), ("sys_enter_exit", false)] {
            match tracefs::load_tracepoint(&root, "syscalls", name) {
                Ok(tp) => match tp.format.field("error_code") {
                    Some(code) => planned.push(Planned {
                        mechanism: "tracepoints",
                        spec: EventSpec::tracepoint(tp.id),
                        role: EventRole::ExitTracepoint {
                            code: code.clone(),
                            group,
                        },
                        inherit: true,
                    }),
                    None => warnings.push(format!("syscalls/{name} has no error_code field")),
                },
                Err(e) => warnings.push(format!(
                    "syscalls/{name} unavailable ({e}); exit codes of tasks other than the command default to 0"
                )),
            }
        }
    }
    if config.enable_lifecycle && config.attach_mode != AttachMode::Tracepoints {
        let (kind, mechanism) = match config.attach_mode {
            AttachMode::Usdt => (PlacementKind::Usdt, "usdt"),
            _ => (PlacementKind::Uprobe, "uprobes"),
        };
        let placement = config.placement.as_ref().expect("validated");
        let probes =
            placement::resolve_all(placement, kind).map_err(|e| attach_err(mechanism, e))?;
        match report
            .tracefs
            .as_deref()
            .filter(|r| tracefs::DynamicProbes::supported(r))
        {
            Some(root) => {
                let defs = dynamic.insert(tracefs::DynamicProbes::new(
                    root,
                    format!("tracehound_{}", std::process::id()),
                ));
                for p in &probes {
                    let tp = defs
                        .add(&p.binary, p.file_offset, p.ref_ctr_offset, p.on_return)
                        .map_err(|e| {
                            attach_err(mechanism, format!("defining probe `{}`: {e}", p.label))
                        })?;
                    planned.push(probe_event(
                        p,
                        EventSpec::tracepoint(tp.id),
                        mechanism,
                        true,
                    ));
                }
            }
            None => {
                // PMU uprobes carry a user pointer that cannot be re-read in
                // a forked child, so they are opened without inheritance.
                let pmu = perf::uprobe_pmu_type()
                    .ok_or_else(|| attach_err(mechanism, "no uprobe PMU"))?;
                warnings.push("tracefs uprobe_events unavailable; probes only observe the command's own process".into());
                for p in &probes {
                    let path = CString::new(p.binary.as_os_str().as_bytes())
                        .map_err(|_| attach_err(mechanism, "path contains NUL"))?;
                    let spec = EventSpec::uprobe(
                        pmu,
                        path,
                        p.file_offset,
                        p.ref_ctr_offset,
                        p.on_return,
                        0,
                    );
                    planned.push(probe_event(p, spec, mechanism, false));
                }
            }
        }
    }
    Ok(Plan {
        events: planned,
        warnings,
        probes: dynamic,
    })
}

fn probe_event(
    p: &ResolvedProbe,
    mut spec: EventSpec,
    mechanism: &'static str,
    inherit: bool,
) -> Planned {
    let regs_mask = match p.value {
        Some(ValueSource::Register { bit, .. }) => 1u64 << bit,
        _ => 0,
    };
    if regs_mask != 0 {
        spec.extra_sample |= decode::SAMPLE_REGS_USER;
        spec.regs_mask = regs_mask;
    }
    Planned {
        mechanism,
        spec,
        role: EventRole::Probe {
            hook: p.hook,
            value: p.value,
            regs_mask,
            image: p.binary.clone(),
        },
        inherit,
    }
}

struct Attached {
    // Keeps the event fds open for the session's lifetime.
    _events: Vec<Event>,
    buffers: Vec<RingBuffer>,
    layouts: HashMap<u64, SampleLayout>,
    roles: HashMap<u64, EventRole>,
}

fn attach(
    planned: &[Planned],
    pid: u32,
    pages: usize,
    warnings: &mut Vec<String>,
) -> Result<Attached, LiveError> {
    let cpus = perf::online_cpus().map_err(|e| attach_err("perf events", e))?;
    let mut events = Vec::new();
    let mut buffers = Vec::new();
    let mut layouts = HashMap::new();
    let mut roles = HashMap::new();
    for &cpu in &cpus {
        let mut leader: Option<usize> = None;
        for p in planned {
            let opened = if matches!(p.role, EventRole::Sampling) {
                Event::open_sampling(&p.spec, pid as libc::pid_t, cpu as i32, p.inherit)
            } else {
                Event::open(&p.spec, pid as libc::pid_t, cpu as i32, p.inherit)
                    .map(|ev| (ev, false))
            };
            let (ev, user_only) = opened.map_err(|e| {
                attach_err(p.mechanism, format!("perf_event_open on cpu {cpu}: {e}"))
            })?;
            if user_only && cpu == cpus[0] {
                warnings.push(
                    "kernel-mode sampling denied; on-CPU samples cover user mode only".into(),
                );
            }
            match leader {
                None => {
                    buffers.push(
                        RingBuffer::map(&ev, pages, cpu)
                            .map_err(|e| attach_err(p.mechanism, format!("mmap: {e}")))?,
                    );
                    leader = Some(events.len());
                }
                Some(l) => ev
                    .redirect_to(&events[l])
                    .map_err(|e| attach_err(p.mechanism, format!("redirecting output: {e}")))?,
            }
            layouts.insert(
                ev.id,
                SampleLayout {
                    sample_type: p.spec.sample_type(),
                    regs_mask: p.spec.regs_mask,
                },
            );
            roles.insert(ev.id, p.role.clone());
            events.push(ev);
        }
    }
    Ok(Attached {
        _events: events,
        buffers,
        layouts,
        roles,
    })
}

#[derive(Default)]
struct Collected {
    records: Vec<(u32, Record)>,
    lost: u64,
    undecodable: u64,
}

fn drain_all(
    buffers: &mut [RingBuffer],
    layouts: &HashMap<u64, SampleLayout>,
    out: &mut Collected,
) {
    for buf in buffers.iter_mut() {
        let cpu = buf.cpu;
        buf.drain(|bytes| match decode_record(bytes, layouts) {
            Ok(Record::Lost { lost }) => out.lost += lost,
            Ok(r) => out.records.push((cpu, r)),
            Err(e) => {
                debug!("skipping record: {e}");
                out.undecodable += 1;
            }
        });
    }
}

/// Wakes the collector's poll when recording stops.
struct Wakeup(OwnedFd);

impl Wakeup {
    fn new() -> io::Result<Self> {
        // SAFETY: no pointer arguments; the returned fd is owned below.
        let fd = unsafe { libc::eventfd(0, libc::EFD_CLOEXEC | libc::EFD_NONBLOCK) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fd was just returned by eventfd and is not shared.
        Ok(Wakeup(unsafe { OwnedFd::from_raw_fd(fd) }))
    }

    fn signal(&self) {
        let one: u64 = 1;
        // SAFETY: writes 8 bytes from a live u64.
        unsafe { libc::write(self.0.as_raw_fd(), &one as *const u64 as *const libc::c_void, 8) };
    }
}

fn collect(
    mut buffers: Vec<RingBuffer>,
    layouts: HashMap<u64, SampleLayout>,
    stop: Arc<AtomicBool>,
    wakeup: Arc<Wakeup>,
) -> Collected {
    let mut out = Collected::default();
    let mut fds: Vec<libc::pollfd> = buffers
        .iter()
        .map(|b| b.raw_fd())
        .chain([wakeup.0.as_raw_fd()])
        .map(|fd| libc::pollfd {
            fd,
            events: libc::POLLIN,
            revents: 0,
        })
        .collect();
    loop {
        let done = stop.load(Ordering::Acquire);
        drain_all(&mut buffers, &layouts, &mut out);
        if done {
            return out;
        }
        // SAFETY: fds is a valid pollfd array of the given length.
        unsafe {
            libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, 50);
        }
    }
}

fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid out-pointer.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

fn current_cpu() -> u32 {
    // SAFETY: no preconditions.
    let c = unsafe { libc::sched_getcpu() };
    c.max(0) as u32
}

/// Runs `config.command` under tracing and returns its event stream.
///
/// Capability and configuration problems are reported before the command
/// is started. The command's arguments, environment and exit status are
/// passed through untouched.
pub fn record(config: &LiveSessionConfig) -> Result<Recording, LiveError> {
    config.validate()?;
    let report = capability_probe();
    if let Some(reasons) = denial(config, &report) {
        return Err(LiveError::CapabilityDenied(reasons));
    }
    let Plan {
        events: planned,
        mut warnings,
        probes: _probe_defs,
    } = plan_events(config, &report)?;

    let child = HeldChild::spawn(&config.command).map_err(LiveError::ChildSpawnFailure)?;
    let child_pid = child.pid();
    let attached = attach(&planned, child_pid, config.ring_pages, &mut warnings)?;
    let Attached {
        _events,
        buffers,
        layouts,
        roles,
    } = attached;

    let stop = Arc::new(AtomicBool::new(false));
    let wakeup = Arc::new(Wakeup::new().map_err(|e| LiveError::Collector(e.to_string()))?);
    let collector = {
        let stop = stop.clone();
        let wakeup = wakeup.clone();
        thread::Builder::new()
            .name("tracehound-collect".into())
            .spawn(move || collect(buffers, layouts, stop, wakeup))
            .map_err(|e| LiveError::Collector(e.to_string()))?
    };
    let finish = |stop: &AtomicBool| {
        stop.store(true, Ordering::Release);
        wakeup.signal();
        collector
            .join()
            .map_err(|_| LiveError::Collector("collector thread panicked".into()))
    };

    // SAFETY: no preconditions.
    let recorder = TaskId::new(std::process::id() as u64, unsafe { libc::gettid() } as u64);
    let recorder_cpu = current_cpu();
    let spawn_ts = monotonic_ns();
    let running = match child.release() {
        Ok(r) => r,
        Err(e) => {
            finish(&stop)?;
            return Err(LiveError::ChildSpawnFailure(e));
        }
    };
    let exit_code = running
        .wait()
        .map_err(|e| LiveError::Collector(format!("waiting for command: {e}")));
    let end_ts = monotonic_ns();
    // Let in-flight records land before the final drain.
    thread::sleep(Duration::from_millis(10));
    let collected = finish(&stop)?;
    let exit_code = exit_code?;

    if collected.lost > 0 {
        warnings.push(format!(
            "{} records lost to ring-buffer overflow",
            collected.lost
        ));
    }
    if collected.undecodable > 0 {
        warnings.push(format!(
            "{} records could not be decoded",
            collected.undecodable
        ));
    }
    let opts = ConvertOptions {
        task_lifecycle: config.enable_lifecycle && config.attach_mode == AttachMode::Tracepoints,
        sched: config.enable_sched,
    };
    let root = RootInfo {
        recorder,
        recorder_cpu,
        child_pid,
        spawn_ts,
        exit_code,
        end_ts,
        ensure_exit: config.enable_lifecycle,
    };
    let (events, stats) = convert::convert(collected.records, &roles, opts, &root);
    if stats.synthesized_root_exit {
        warnings.push("no exit observed for the command; exit taken from waitpid".into());
    }
    for w in &warnings {
        warn!("{w}");
    }

    let path = match &config.output {
        LiveOutput::File(p) => {
            let f = fs::File::create(p).map_err(LiveError::Output)?;
            let mut w = BufWriter::new(f);
            write_event_stream(&mut w, &events).map_err(LiveError::Output)?;
            w.flush().map_err(LiveError::Output)?;
            Some(p.clone())
        }
        LiveOutput::Memory => None,
    };

    Ok(Recording {
        events,
        path,
        child_exit_code: exit_code,
        lost_records: collected.lost,
        dropped_samples: stats.dropped_samples,
        warnings,
    })
}
