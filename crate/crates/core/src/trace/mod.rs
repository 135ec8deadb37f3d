//! Trace event model shared by every pipeline.
//!
//! Events arrive either from the live collector or from a JSONL replay
//! file; both produce the same [`TraceEvent`] values. Timestamps are
//! integer nanoseconds since the trace origin.

mod jsonl;
mod merge;
mod validate;

pub use jsonl::{parse_event_stream, write_event_stream, ParseError};
pub use merge::{merge_streams, order_events, split_by_cpu};
pub use validate::{validate_trace, TraceWarning};

use std::fmt;

/// A (pid, tid) pair. For single-threaded tasks `tid == pid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    pub pid: u64,
    pub tid: u64,
}

impl TaskId {
    pub fn new(pid: u64, tid: u64) -> Self {
        TaskId { pid, tid }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.pid, self.tid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Sample,
    SchedSwitchOut,
    SchedSwitchIn,
    Fork,
    Exec,
    Exit,
}

impl EventKind {
    /// Wire name used by the replay format.
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Sample => "sample",
            EventKind::SchedSwitchOut => "switch_out",
            EventKind::SchedSwitchIn => "switch_in",
            EventKind::Fork => "fork",
            EventKind::Exec => "exec",
            EventKind::Exit => "exit",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        Some(match s {
            "sample" => EventKind::Sample,
            "switch_out" => EventKind::SchedSwitchOut,
            "switch_in" => EventKind::SchedSwitchIn,
            "fork" => EventKind::Fork,
            "exec" => EventKind::Exec,
            "exit" => EventKind::Exit,
            _ => return None,
        })
    }

    pub fn is_lifecycle(self) -> bool {
        matches!(self, EventKind::Fork | EventKind::Exec | EventKind::Exit)
    }
}

/// Scheduler state of a task at switch-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitKind {
    /// Preempted while still runnable.
    Runnable,
    /// Sleeping on I/O, a lock, a timer, ...
    Blocked,
    #[default]
    Unknown,
}

impl WaitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WaitKind::Runnable => "runnable",
            WaitKind::Blocked => "blocked",
            WaitKind::Unknown => "unknown",
        }
    }
}

/// Kind-specific event body. Stacks are leaf-first frame addresses, as
/// captured by a frame-pointer walk.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Payload {
    Sample {
        stack: Vec<u64>,
        period: u64,
    },
    SwitchOut {
        wait: WaitKind,
        stack: Option<Vec<u64>>,
    },
    SwitchIn,
    Fork {
        child_pid: u64,
        child_tid: u64,
    },
    Exec {
        image: String,
    },
    Exit {
        exit_code: i32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub ts: u64,
    pub pid: u64,
    pub tid: u64,
    pub cpu: u32,
    pub payload: Payload,
}

impl TraceEvent {
    pub fn new(ts: u64, task: TaskId, cpu: u32, payload: Payload) -> Self {
        TraceEvent {
            ts,
            pid: task.pid,
            tid: task.tid,
            cpu,
            payload,
        }
    }

    pub fn kind(&self) -> EventKind {
        match self.payload {
            Payload::Sample { .. } => EventKind::Sample,
            Payload::SwitchOut { .. } => EventKind::SchedSwitchOut,
            Payload::SwitchIn => EventKind::SchedSwitchIn,
            Payload::Fork { .. } => EventKind::Fork,
            Payload::Exec { .. } => EventKind::Exec,
            Payload::Exit { .. } => EventKind::Exit,
        }
    }

    pub fn task(&self) -> TaskId {
        TaskId::new(self.pid, self.tid)
    }
}
