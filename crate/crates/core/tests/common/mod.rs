//! Generators and naive reference implementations shared by the property
//! and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use tracehound::bench::RunRecord;
use tracehound::trace::{Payload, TaskId, TraceEvent, WaitKind};

pub const MAX_TIDS: u64 = 16;

fn wait_kind() -> impl Strategy<Value = WaitKind> {
    prop_oneof![
        Just(WaitKind::Unknown),
        Just(WaitKind::Runnable),
        Just(WaitKind::Blocked)
    ]
}

fn stack() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0x1000u64..0x1100, 1..5)
}

#[derive(Debug, Clone)]
enum Shape {
    Sample(Vec<u64>, u64),
    Out(WaitKind, Option<Vec<u64>>),
    In,
}

fn shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        2 => (stack(), 1u64..5_000).prop_map(|(s, p)| Shape::Sample(s, p)),
        3 => (wait_kind(), prop::option::of(stack())).prop_map(|(w, s)| Shape::Out(w, s)),
        3 => Just(Shape::In),
    ]
}

/// Globally time-ordered samples and switch events over at most
/// [`MAX_TIDS`] tids. Time steps may be zero.
pub fn sched_stream(max_events: usize) -> impl Strategy<Value = Vec<TraceEvent>> {
    prop::collection::vec((0u64..40, 1..=MAX_TIDS, 0u32..4, shape()), 0..=max_events).prop_map(
        |steps| {
            let mut ts = 0;
            steps
                .into_iter()
                .map(|(dt, tid, cpu, shape)| {
                    ts += dt;
                    let pid = tid.div_ceil(2);
                    let payload = match shape {
                        Shape::Sample(stack, period) => Payload::Sample { stack, period },
                        Shape::Out(wait, stack) => Payload::SwitchOut { wait, stack },
                        Shape::In => Payload::SwitchIn,
                    };
                    TraceEvent::new(ts, TaskId::new(pid, tid), cpu, payload)
                })
                .collect()
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleInterval {
    pub tid: u64,
    pub pid: u64,
    pub start: u64,
    pub end: u64,
    pub stack: Option<Vec<u64>>,
    pub wait: WaitKind,
    pub truncated: bool,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct OraclePairing {
    pub intervals: Vec<OracleInterval>,
    pub unmatched_in: u64,
    pub repeated_out: u64,
    pub empty: u64,
}

/// Per-tid two-state machine (running / switched out), one tid at a time.
pub fn pairing_oracle(events: &[TraceEvent]) -> OraclePairing {
    let mut out = OraclePairing::default();
    let mut tids: Vec<u64> = events.iter().map(|e| e.tid).collect();
    tids.sort_unstable();
    tids.dedup();
    let last = events.last().map(|e| e.ts);
    for tid in tids {
        let mut state: Option<(u64, u64, WaitKind, Option<Vec<u64>>)> = None;
        for ev in events.iter().filter(|e| e.tid == tid) {
            match (&ev.payload, state.take()) {
                (Payload::SwitchOut { wait, stack }, None) => {
                    state = Some((ev.pid, ev.ts, *wait, stack.clone()))
                }
                (Payload::SwitchOut { .. }, open @ Some(_)) => {
                    out.repeated_out += 1;
                    state = open;
                }
                (Payload::SwitchIn, None) => out.unmatched_in += 1,
                (Payload::SwitchIn, Some((pid, start, wait, stack))) => {
                    close(&mut out, tid, pid, start, ev.ts, wait, stack, false);
                }
                (_, open) => state = open,
            }
        }
        if let Some((pid, start, wait, stack)) = state {
            close(&mut out, tid, pid, start, last.unwrap(), wait, stack, true);
        }
    }
    out.intervals.sort_by_key(|i| (i.start, i.tid));
    out
}

#[allow(clippy::too_many_arguments)]
fn close(
    out: &mut OraclePairing,
    tid: u64,
    pid: u64,
    start: u64,
    end: u64,
    wait: WaitKind,
    stack: Option<Vec<u64>>,
    truncated: bool,
) {
    if end > start {
        out.intervals.push(OracleInterval {
            tid,
            pid,
            start,
            end,
            stack,
            wait,
            truncated,
        });
    } else {
        out.empty += 1;
    }
}

#[derive(Debug, Clone)]
pub enum LifeOp {
    Fork {
        parent: u64,
        child: u64,
        child_pid: Option<u64>,
    },
    Exec {
        tid: u64,
        image: u8,
    },
    Exit {
        tid: u64,
        code: i32,
    },
}

fn life_op(pool: u64) -> impl Strategy<Value = LifeOp> {
    prop_oneof![
        4 => (1..=pool, 1..=pool, prop::option::of(1..=pool))
            .prop_map(|(parent, child, child_pid)| LifeOp::Fork { parent, child, child_pid }),
        2 => (1..=pool, 0u8..4).prop_map(|(tid, image)| LifeOp::Exec { tid, image }),
        3 => (1..=pool, -2i32..5).prop_map(|(tid, code)| LifeOp::Exit { tid, code }),
    ]
}

/// Fork/exec/exit streams over a small tid pool, so tids get reused.
/// When `valid_only`, operations that the tree would reject are filtered
/// out while generating.
pub fn lifecycle_stream(
    max_ops: usize,
    pool: u64,
    valid_only: bool,
) -> impl Strategy<Value = Vec<TraceEvent>> {
    prop::collection::vec((0u64..5, life_op(pool)), 0..=max_ops).prop_map(move |ops| {
        let mut ts = 0;
        let mut live: HashMap<u64, u64> = HashMap::new();
        let mut events = Vec::new();
        for (dt, op) in ops {
            ts += dt;
            let ev = match op {
                LifeOp::Fork {
                    parent,
                    child,
                    child_pid,
                } => {
                    if valid_only && (live.contains_key(&child) || child == parent) {
                        continue;
                    }
                    let ppid = *live.get(&parent).unwrap_or(&parent);
                    let cpid = child_pid.unwrap_or(child);
                    live.insert(parent, ppid);
                    live.insert(child, cpid);
                    TraceEvent::new(
                        ts,
                        TaskId::new(ppid, parent),
                        0,
                        Payload::Fork {
                            child_pid: cpid,
                            child_tid: child,
                        },
                    )
                }
                LifeOp::Exec { tid, image } => {
                    let pid = *live.entry(tid).or_insert(tid);
                    TraceEvent::new(
                        ts,
                        TaskId::new(pid, tid),
                        0,
                        Payload::Exec {
                            image: format!("/bin/img{image}"),
                        },
                    )
                }
                LifeOp::Exit { tid, code } => {
                    let Some(pid) = live.remove(&tid) else {
                        if valid_only {
                            continue;
                        }
                        events.push(TraceEvent::new(
                            ts,
                            TaskId::new(tid, tid),
                            0,
                            Payload::Exit { exit_code: code },
                        ));
                        continue;
                    };
                    TraceEvent::new(
                        ts,
                        TaskId::new(pid, tid),
                        0,
                        Payload::Exit { exit_code: code },
                    )
                }
            };
            events.push(ev);
        }
        events
    })
}

/// Mostly well-formed lifecycle streams (so tids get reused) with some
/// unconstrained ones mixed in to exercise rejection.
pub fn tree_corpus() -> impl Strategy<Value = Vec<TraceEvent>> {
    prop_oneof![
        3 => lifecycle_stream(120, 8, true),
        1 => lifecycle_stream(40, 8, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleNode {
    pub pid: u64,
    pub tid: u64,
    pub generation: u32,
    pub parent: Option<usize>,
    pub spawn: u64,
    pub exit: Option<u64>,
    pub code: Option<i32>,
    pub images: Vec<(u64, String)>,
    pub synthesized: bool,
}

/// Flat list of task records; "alive" is found by scanning for a record
/// of the tid without an exit that has not been superseded.
pub fn tree_oracle(events: &[TraceEvent]) -> Result<Vec<OracleNode>, usize> {
    let mut nodes: Vec<OracleNode> = Vec::new();
    let live_of = |nodes: &[OracleNode], tid: u64| {
        nodes.iter().rposition(|n| n.tid == tid && n.exit.is_none())
    };
    let add = |nodes: &mut Vec<OracleNode>,
               pid: u64,
               tid: u64,
               parent: Option<usize>,
               ts: u64,
               synth: bool| {
        let generation = nodes.iter().filter(|n| n.tid == tid).count() as u32;
        nodes.push(OracleNode {
            pid,
            tid,
            generation,
            parent,
            spawn: ts,
            exit: None,
            code: None,
            images: Vec::new(),
            synthesized: synth,
        });
        nodes.len() - 1
    };
    for (i, ev) in events.iter().enumerate() {
        match &ev.payload {
            Payload::Fork {
                child_pid,
                child_tid,
            } => {
                if live_of(&nodes, *child_tid).is_some() || *child_tid == ev.tid {
                    return Err(i);
                }
                let parent = match live_of(&nodes, ev.tid) {
                    Some(p) => p,
                    None => add(&mut nodes, ev.pid, ev.tid, None, ev.ts, true),
                };
                add(
                    &mut nodes,
                    *child_pid,
                    *child_tid,
                    Some(parent),
                    ev.ts,
                    false,
                );
            }
            Payload::Exec { image } => {
                let n = match live_of(&nodes, ev.tid) {
                    Some(n) => n,
                    None => add(&mut nodes, ev.pid, ev.tid, None, ev.ts, true),
                };
                nodes[n].images.push((ev.ts, image.clone()));
            }
            Payload::Exit { exit_code } => {
                let n = live_of(&nodes, ev.tid).ok_or(i)?;
                nodes[n].exit = Some(ev.ts);
                nodes[n].code = Some(*exit_code);
            }
            _ => {}
        }
    }
    Ok(nodes)
}

/// Non-overlapping symbol table entries `(start, size, name)`.
pub fn symbol_table() -> impl Strategy<Value = Vec<(u64, u64, String)>> {
    prop::collection::vec((1u64..64, 1u64..48, "[a-z_]{1,8}"), 0..24).prop_map(|parts| {
        let mut at = 0x1000;
        parts
            .into_iter()
            .map(|(gap, size, name)| {
                let start = at + gap;
                at = start + size;
                (start, size, name)
            })
            .collect()
    })
}

pub fn linear_symbolize(table: &[(u64, u64, String)], addr: u64) -> String {
    for (start, size, name) in table {
        if addr >= *start && addr - start < *size {
            return name.clone();
        }
    }
    format!("[unknown:{addr:#x}]")
}

pub fn map_text(table: &[(u64, u64, String)]) -> String {
    table
        .iter()
        .map(|(s, z, n)| format!("{s:x} {z:x} {n}\n"))
        .collect()
}

/// Naive statistics over wall times, straight from the definitions.
pub struct NaiveStats {
    pub mean: f64,
    pub stddev: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn naive_stats(values_ns: &[u64]) -> NaiveStats {
    let n = values_ns.len() as f64;
    let xs: Vec<f64> = values_ns.iter().map(|&v| v as f64 / 1e6).collect();
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    NaiveStats {
        mean,
        stddev: var.sqrt(),
        median,
        min: sorted[0],
        max: sorted[m - 1],
    }
}

pub fn records(name: &str, walls: &[u64]) -> Vec<RunRecord> {
    walls
        .iter()
        .enumerate()
        .map(|(i, &w)| RunRecord {
            config_name: name.to_string(),
            run_index: i as u32,
            wall_ns: w,
            user_ns: w / 2,
            sys_ns: w / 5,
            exit_code: 0,
        })
        .collect()
}

/// `sqrt(n) * 10^15` rounded down, in exact integer arithmetic.
pub fn isqrt_scaled(n: u64) -> u128 {
    let target = n as u128 * 10u128.pow(30);
    // Start above the root so integer Newton steps descend to its floor.
    let mut x = ((n as f64).sqrt() as u128 + 1) * 10u128.pow(15);
    loop {
        let next = (x + target / x) / 2;
        if next >= x {
            break;
        }
        x = next;
    }
    while x * x > target {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= target {
        x += 1;
    }
    x
}

/// Σ√n for n in lo..=hi, accurate to about 1e-15 absolute per term.
pub fn reference_sqrt_sum(lo: u64, hi: u64) -> f64 {
    let total: u128 = (lo..=hi).map(isqrt_scaled).sum();
    let whole = total / 10u128.pow(15);
    let frac = total % 10u128.pow(15);
    whole as f64 + frac as f64 / 1e15
}

pub fn grouped<K: Ord>(pairs: impl IntoIterator<Item = (K, u64)>) -> BTreeMap<K, u64> {
    let mut m = BTreeMap::new();
    for (k, w) in pairs {
        *m.entry(k).or_insert(0) += w;
    }
    m
}
