use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::Serialize;

use crate::par::{fold_weights, Execution, Step};
use crate::proctree::Scope;
use crate::trace::{Payload, TaskId, TraceEvent, WaitKind};

use super::oncpu::symbolize_stack;
use super::profile::{Profile, ProfileKind, ProfileWarning};
use super::symbols::SymbolMap;

/// Frame used for intervals whose switch-out carried no stack.
pub const NO_STACK_FRAME: &str = "[no stack]";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct OffCpuInterval {
    pub pid: u64,
    pub tid: u64,
    pub start_ts: u64,
    pub end_ts: u64,
    /// Leaf-first addresses captured at switch-out.
    pub stack: Option<Vec<u64>>,
    pub wait_kind: WaitKind,
    /// Still open when the trace ended.
    pub truncated: bool,
}

impl OffCpuInterval {
    pub fn duration(&self) -> u64 {
        self.end_ts - self.start_ts
    }

    pub fn task(&self) -> TaskId {
        TaskId::new(self.pid, self.tid)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchPairing {
    /// Sorted by `(start_ts, tid)`.
    pub intervals: Vec<OffCpuInterval>,
    pub unmatched_switch_in: u64,
    pub repeated_switch_out: u64,
    /// Out/in pairs with no elapsed time, not turned into intervals.
    pub empty_intervals: u64,
}

impl SwitchPairing {
    pub fn warnings(&self) -> Vec<ProfileWarning> {
        let mut w = Vec::new();
        if self.unmatched_switch_in > 0 {
            w.push(ProfileWarning::UnmatchedSwitchIn {
                count: self.unmatched_switch_in,
            });
        }
        if self.repeated_switch_out > 0 {
            w.push(ProfileWarning::RepeatedSwitchOut {
                count: self.repeated_switch_out,
            });
        }
        if self.empty_intervals > 0 {
            w.push(ProfileWarning::EmptyIntervals {
                count: self.empty_intervals,
            });
        }
        w
    }

    pub fn total_duration(&self) -> u64 {
        self.intervals.iter().map(OffCpuInterval::duration).sum()
    }
}

struct Open {
    pid: u64,
    start: u64,
    wait: WaitKind,
    stack: Option<Vec<u64>>,
}

/// Pairs each switch-out with the next switch-in of the same tid.
///
/// A switch-out while an interval is already open keeps the earlier one.
/// Intervals still open at the end are cut at the last event's timestamp
/// and flagged truncated. Zero-length intervals are dropped.
pub fn pair_context_switches(events: &[TraceEvent]) -> SwitchPairing {
    let mut open: HashMap<u64, Open> = HashMap::new();
    let mut out = SwitchPairing::default();
    let push = |out: &mut SwitchPairing, tid: u64, o: Open, end: u64, truncated: bool| {
        if end > o.start {
            out.intervals.push(OffCpuInterval {
                pid: o.pid,
                tid,
                start_ts: o.start,
                end_ts: end,
                stack: o.stack,
                wait_kind: o.wait,
                truncated,
            });
        } else {
            out.empty_intervals += 1;
        }
    };

    for ev in events {
        match &ev.payload {
            Payload::SwitchOut { wait, stack } => {
                if let Entry::Vacant(e) = open.entry(ev.tid) {
                    e.insert(Open {
                        pid: ev.pid,
                        start: ev.ts,
                        wait: *wait,
                        stack: stack.clone(),
                    });
                } else {
                    out.repeated_switch_out += 1;
                }
            }
            Payload::SwitchIn => match open.remove(&ev.tid) {
                Some(o) => push(&mut out, ev.tid, o, ev.ts, false),
                None => out.unmatched_switch_in += 1,
            },
            _ => {}
        }
    }

    if let Some(last) = events.last().map(|e| e.ts) {
        let mut rest: Vec<_> = open.into_iter().collect();
        rest.sort_by_key(|(tid, _)| *tid);
        for (tid, o) in rest {
            push(&mut out, tid, o, last, true);
        }
    }
    out.intervals.sort_by_key(|i| (i.start_ts, i.tid));
    out
}

/// Off-CPU profile: total interval duration per symbolized stack.
pub fn build_offcpu_profile(intervals: &[OffCpuInterval], map: &SymbolMap) -> Profile {
    build_offcpu_profile_with(intervals, map, None, Execution::default())
}

/// Like [`build_offcpu_profile`], optionally keeping only intervals that
/// start while their task is a live scope member.
pub fn build_offcpu_profile_with(
    intervals: &[OffCpuInterval],
    map: &SymbolMap,
    scope: Option<&Scope>,
    exec: Execution,
) -> Profile {
    let (weights, _) = fold_weights(exec, intervals, |iv| {
        if scope.is_some_and(|s| !s.contains(iv.task(), iv.start_ts)) {
            return Step::Ignore;
        }
        let stack = match &iv.stack {
            Some(s) => symbolize_stack(s, map),
            None => vec![NO_STACK_FRAME.to_string()],
        };
        Step::Add(stack, iv.duration())
    });
    let mut profile = Profile::new(ProfileKind::OffCpu);
    profile.entries = weights.into_iter().collect();
    profile.scope = scope.map(Scope::root);
    profile
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(ts: u64, tid: u64) -> TraceEvent {
        TraceEvent::new(
            ts,
            TaskId::new(tid, tid),
            0,
            Payload::SwitchOut {
                wait: WaitKind::Blocked,
                stack: None,
            },
        )
    }

    fn inn(ts: u64, tid: u64) -> TraceEvent {
        TraceEvent::new(ts, TaskId::new(tid, tid), 0, Payload::SwitchIn)
    }

    fn interval(start: u64, end: u64, stack: Option<Vec<u64>>) -> OffCpuInterval {
        OffCpuInterval {
            pid: 1,
            tid: 1,
            start_ts: start,
            end_ts: end,
            stack,
            wait_kind: WaitKind::Unknown,
            truncated: false,
        }
    }

    #[test]
    fn simple_pair() {
        let p = pair_context_switches(&[out(10, 1), inn(15, 1)]);
        assert_eq!(p.intervals.len(), 1);
        assert_eq!((p.intervals[0].start_ts, p.intervals[0].end_ts), (10, 15));
        assert_eq!(p.intervals[0].duration(), 5);
        assert!(!p.intervals[0].truncated);
        assert_eq!(p.intervals[0].wait_kind, WaitKind::Blocked);
    }

    #[test]
    fn open_interval_truncated_at_trace_end() {
        let end = TraceEvent::new(20, TaskId::new(2, 2), 0, Payload::Exit { exit_code: 0 });
        let p = pair_context_switches(&[out(10, 1), end]);
        assert_eq!(p.intervals.len(), 1);
        assert_eq!((p.intervals[0].start_ts, p.intervals[0].end_ts), (10, 20));
        assert!(p.intervals[0].truncated);
    }

    #[test]
    fn stray_events_are_counted() {
        let p = pair_context_switches(&[
            inn(1, 1),
            out(2, 1),
            out(3, 1),
            inn(4, 1),
            out(4, 2),
            inn(4, 2),
        ]);
        assert_eq!(p.unmatched_switch_in, 1);
        assert_eq!(p.repeated_switch_out, 1);
        assert_eq!(p.empty_intervals, 1);
        assert_eq!(p.intervals.len(), 1);
        assert_eq!((p.intervals[0].start_ts, p.intervals[0].end_ts), (2, 4));
        assert_eq!(p.warnings().len(), 3);
    }

    #[test]
    fn profile_sums_same_stack() {
        let map = SymbolMap::empty();
        let ivs = vec![
            interval(0, 5, Some(vec![0x10])),
            interval(10, 17, Some(vec![0x10])),
        ];
        let p = build_offcpu_profile(&ivs, &map);
        assert_eq!(p.entries[&vec!["[unknown:0x10]".to_string()]], 12);
        assert_eq!(p.kind, ProfileKind::OffCpu);
    }

    #[test]
    fn stackless_interval() {
        let p = build_offcpu_profile(&[interval(0, 3, None)], &SymbolMap::empty());
        assert_eq!(p.entries[&vec![NO_STACK_FRAME.to_string()]], 3);
    }
}
