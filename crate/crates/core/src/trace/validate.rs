use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::{Payload, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum TraceWarning {
    /// Switch-in with no preceding switch-out for the same tid.
    UnmatchedSwitchIn { tid: u64, ts: u64 },
    /// Sample for a tid that is not alive at the sample's timestamp.
    SampleOutsideLifetime { tid: u64, ts: u64 },
    /// Fork whose child tid is already alive.
    DuplicateFork { tid: u64, ts: u64 },
}

impl fmt::Display for TraceWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceWarning::UnmatchedSwitchIn { tid, ts } => {
                write!(
                    f,
                    "switch-in of tid {tid} at {ts} without a prior switch-out"
                )
            }
            TraceWarning::SampleOutsideLifetime { tid, ts } => {
                write!(f, "sample of tid {tid} at {ts} outside its lifetime")
            }
            TraceWarning::DuplicateFork { tid, ts } => {
                write!(f, "fork at {ts} of tid {tid} which is already alive")
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Life {
    NotSpawned,
    Alive,
    Dead,
}

/// Single pass over a time-ordered trace reporting consistency problems.
///
/// A tid whose first lifecycle appearance is as a fork child is not alive
/// before that fork; any other tid is assumed to predate the trace.
pub fn validate_trace(events: &[TraceEvent]) -> Vec<TraceWarning> {
    let mut forked_first: HashSet<u64> = HashSet::new();
    let mut seen: HashSet<u64> = HashSet::new();
    for ev in events {
        match &ev.payload {
            Payload::Fork { child_tid, .. } => {
                seen.insert(ev.tid);
                if seen.insert(*child_tid) {
                    forked_first.insert(*child_tid);
                }
            }
            Payload::Exec { .. } | Payload::Exit { .. } => {
                seen.insert(ev.tid);
            }
            _ => {}
        }
    }

    let life_of = |state: &HashMap<u64, Life>, tid: u64| {
        state
            .get(&tid)
            .copied()
            .unwrap_or(if forked_first.contains(&tid) {
                Life::NotSpawned
            } else {
                Life::Alive
            })
    };

    let mut warnings = Vec::new();
    let mut life: HashMap<u64, Life> = HashMap::new();
    let mut switched_out: HashSet<u64> = HashSet::new();

    for ev in events {
        match &ev.payload {
            Payload::SwitchOut { .. } => {
                switched_out.insert(ev.tid);
            }
            Payload::SwitchIn => {
                if !switched_out.remove(&ev.tid) {
                    warnings.push(TraceWarning::UnmatchedSwitchIn {
                        tid: ev.tid,
                        ts: ev.ts,
                    });
                }
            }
            Payload::Sample { .. } => {
                if life_of(&life, ev.tid) != Life::Alive {
                    warnings.push(TraceWarning::SampleOutsideLifetime {
                        tid: ev.tid,
                        ts: ev.ts,
                    });
                }
            }
            Payload::Fork { child_tid, .. } => {
                life.insert(ev.tid, Life::Alive);
                if life_of(&life, *child_tid) == Life::Alive {
                    warnings.push(TraceWarning::DuplicateFork {
                        tid: *child_tid,
                        ts: ev.ts,
                    });
                }
                life.insert(*child_tid, Life::Alive);
            }
            Payload::Exec { .. } => {
                life.insert(ev.tid, Life::Alive);
            }
            Payload::Exit { .. } => {
                life.insert(ev.tid, Life::Dead);
            }
        }
    }
    warnings
}
