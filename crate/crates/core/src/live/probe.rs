//! Detection of what kernel tracing this host allows.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use super::perf::{self, EventSpec};
use super::tracefs;

/// Set to `1` to make [`capability_probe`] report tracing as unavailable.
pub const FORCE_NO_LIVE_ENV: &str = "TRACEHOUND_FORCE_NO_LIVE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapabilityReport {
    pub tracing_available: bool,
    /// perf_event_open works for this process's own tasks.
    pub perf_events: bool,
    pub sampling: bool,
    pub context_switches: bool,
    pub tracepoints: bool,
    pub uprobes: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracefs: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perf_event_paranoid: Option<i32>,
    pub reasons: Vec<String>,
}

impl CapabilityReport {
    fn unavailable(reason: String) -> Self {
        CapabilityReport {
            tracing_available: false,
            perf_events: false,
            sampling: false,
            context_switches: false,
            tracepoints: false,
            uprobes: false,
            tracefs: None,
            perf_event_paranoid: None,
            reasons: vec![reason],
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn forced_off() -> bool {
    std::env::var(FORCE_NO_LIVE_ENV).is_ok_and(|v| v == "1")
}

const CAP_SYS_ADMIN: u32 = 21;
const CAP_PERFMON: u32 = 38;

fn effective_caps() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("CapEff:"))?;
    u64::from_str_radix(line["CapEff:".len()..].trim(), 16).ok()
}

/// Checks each facility by opening (and immediately closing) a disabled
/// event on the calling task. Needs no privileges and changes nothing.
pub fn capability_probe() -> CapabilityReport {
    if forced_off() {
        return CapabilityReport::unavailable(format!("{FORCE_NO_LIVE_ENV}=1 is set"));
    }
    if !cfg!(target_os = "linux") {
        return CapabilityReport::unavailable("live tracing needs Linux perf_event_open".into());
    }

    let mut reasons = Vec::new();
    let paranoid = fs::read_to_string("/proc/sys/kernel/perf_event_paranoid")
        .ok()
        .and_then(|s| s.trim().parse().ok());

    let probe =
        |spec: EventSpec, what: &str, reasons: &mut Vec<String>| match perf::try_open_self(&spec) {
            Ok(()) => true,
            Err(e) => {
                reasons.push(format!("{what}: perf_event_open failed: {e}"));
                false
            }
        };

    let perf_events = probe(EventSpec::task_tracking(), "task events", &mut reasons);
    if !perf_events {
        if let Some(p) = paranoid {
            reasons.push(format!("kernel.perf_event_paranoid is {p}"));
        }
    }
    let sampling = perf_events
        && match perf::try_open_sampling_self(&EventSpec::cpu_clock(1_000_000)) {
            Ok(user_only) => {
                if user_only {
                    reasons.push("cpu-clock sampling limited to user mode".into());
                }
                true
            }
            Err(e) => {
                reasons.push(format!("cpu-clock sampling: perf_event_open failed: {e}"));
                false
            }
        };
    let context_switches = perf_events
        && probe(
            EventSpec::context_switches(),
            "context switches",
            &mut reasons,
        );

    let tracefs = tracefs::tracefs_root();
    let tracepoints = match (&tracefs, perf_events) {
        (None, _) => {
            reasons.push(
                "tracefs is not mounted (try: mount -t tracefs nodev /sys/kernel/tracing)".into(),
            );
            false
        }
        (Some(_), false) => false,
        (Some(root), true) => match tracefs::load_tracepoint(root, "sched", "sched_process_exec") {
            Ok(tp) => probe(EventSpec::tracepoint(tp.id), "tracepoints", &mut reasons),
            Err(e) => {
                reasons.push(format!(
                    "tracepoint sched/sched_process_exec unreadable: {e}"
                ));
                false
            }
        },
    };

    let dynamic = tracefs
        .as_deref()
        .is_some_and(tracefs::DynamicProbes::supported);
    let pmu = perf::uprobe_pmu_type().is_some();
    let caps = effective_caps().unwrap_or(0);
    let capable = caps & (1 << CAP_PERFMON) != 0 || caps & (1 << CAP_SYS_ADMIN) != 0;
    let uprobes = perf_events && (dynamic && tracepoints || pmu && capable);
    if perf_events && !uprobes {
        if !dynamic {
            reasons.push("tracefs uprobe_events is not writable".into());
        }
        if !pmu {
            reasons.push("uprobe PMU not present in /sys/bus/event_source/devices".into());
        } else if !capable {
            reasons.push("PMU uprobes need CAP_PERFMON or CAP_SYS_ADMIN".into());
        }
    }

    CapabilityReport {
        tracing_available: perf_events,
        perf_events,
        sampling,
        context_switches,
        tracepoints,
        uprobes,
        tracefs,
        perf_event_paranoid: paranoid,
        reasons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idempotent() {
        assert_eq!(capability_probe(), capability_probe());
    }

    #[test]
    fn unavailable_has_reasons() {
        let r = capability_probe();
        if !r.tracing_available {
            assert!(!r.reasons.is_empty());
        }
        assert!(r.tracing_available || !(r.sampling || r.tracepoints || r.uprobes));
    }
}
