//! Turning decoded perf records into trace events.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use crate::trace::{merge_streams, Payload, TaskId, TraceEvent, WaitKind};

use super::decode::{reg_value, user_frames, Record, Sample};
use super::placement::{Hook, ValueSource};
use super::tracefs::Field;

/// What samples from a given event id mean.
#[derive(Debug, Clone)]
pub enum EventRole {
    Sampling,
    /// Fork/exit/switch records only.
    Tracking,
    ExecTracepoint {
        filename: Field,
    },
    ExitTracepoint {
        code: Field,
        group: bool,
    },
    Probe {
        hook: Hook,
        value: Option<ValueSource>,
        regs_mask: u64,
        image: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvertOptions {
    /// Emit fork/exit from the kernel's task records.
    pub task_lifecycle: bool,
    pub sched: bool,
}

/// Facts known to the recorder rather than the kernel.
#[derive(Debug, Clone)]
pub struct RootInfo {
    pub recorder: TaskId,
    pub recorder_cpu: u32,
    pub child_pid: u32,
    pub spawn_ts: u64,
    pub exit_code: i32,
    pub end_ts: u64,
    /// Guarantee one exit event for the child even if its record was lost.
    pub ensure_exit: bool,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ConvertStats {
    pub dropped_samples: u64,
    pub synthesized_root_exit: bool,
}

#[derive(Default)]
struct State {
    exited: HashSet<u32>,
    thread_codes: HashMap<u32, i32>,
    group_codes: HashMap<u32, i32>,
    root_exit_seen: bool,
}

fn task(pid: u32, tid: u32) -> Option<TaskId> {
    (pid > 0 && tid > 0).then_some(TaskId::new(pid as u64, tid as u64))
}

/// Converts records collected from per-CPU buffers (each tagged with its
/// buffer's CPU) into one globally ordered event list.
pub fn convert(
    records: Vec<(u32, Record)>,
    roles: &HashMap<u64, EventRole>,
    opts: ConvertOptions,
    root: &RootInfo,
) -> (Vec<TraceEvent>, ConvertStats) {
    let mut timed: Vec<(u64, u32, usize, Record)> = records
        .into_iter()
        .enumerate()
        .filter_map(|(i, (cpu, r))| r.time().map(|t| (t, cpu, i, r)))
        .collect();
    timed.sort_by_key(|(t, cpu, i, _)| (*t, *cpu, *i));

    let mut st = State::default();
    let mut stats = ConvertStats::default();
    let mut per_cpu: HashMap<u32, Vec<TraceEvent>> = HashMap::new();

    let recorder_stream = vec![TraceEvent::new(
        root.spawn_ts,
        root.recorder,
        root.recorder_cpu,
        Payload::Fork {
            child_pid: root.child_pid as u64,
            child_tid: root.child_pid as u64,
        },
    )];

    for (ts, cpu, _, rec) in timed {
        let ts = ts.max(root.spawn_ts);
        let mut emit = |t: TaskId, payload| {
            per_cpu
                .entry(cpu)
                .or_default()
                .push(TraceEvent::new(ts, t, cpu, payload))
        };
        match rec {
            Record::Fork(t) => {
                st.exited.remove(&t.tid);
                if opts.task_lifecycle {
                    if let Some(parent) = task(t.ppid, t.ptid) {
                        emit(
                            parent,
                            Payload::Fork {
                                child_pid: t.pid as u64,
                                child_tid: t.tid as u64,
                            },
                        );
                    }
                }
            }
            Record::Exit(t) => {
                if !st.exited.insert(t.tid) {
                    continue;
                }
                if opts.task_lifecycle {
                    let Some(me) = task(t.pid, t.tid) else {
                        continue;
                    };
                    let exit_code = st
                        .thread_codes
                        .remove(&t.tid)
                        .or_else(|| st.group_codes.get(&t.pid).copied())
                        .unwrap_or(if t.tid == root.child_pid {
                            root.exit_code
                        } else {
                            0
                        });
                    if t.tid == root.child_pid {
                        st.root_exit_seen = true;
                    }
                    emit(me, Payload::Exit { exit_code });
                }
            }
            Record::Switch { sid, out, preempt } => {
                if !opts.sched || st.exited.contains(&sid.tid) {
                    continue;
                }
                let Some(me) = task(sid.pid, sid.tid) else {
                    continue;
                };
                let payload = if out {
                    Payload::SwitchOut {
                        wait: if preempt {
                            WaitKind::Runnable
                        } else {
                            WaitKind::Blocked
                        },
                        stack: None,
                    }
                } else {
                    Payload::SwitchIn
                };
                emit(me, payload);
            }
            Record::Sample(s) => {
                let Some(role) = roles.get(&s.sid.id) else {
                    stats.dropped_samples += 1;
                    continue;
                };
                match sample_payload(&s, role, &mut st, root) {
                    Some(payload) => match task(s.sid.pid, s.sid.tid) {
                        Some(me) => emit(me, payload),
                        None => stats.dropped_samples += 1,
                    },
                    None => {
                        if matches!(role, EventRole::Sampling) {
                            stats.dropped_samples += 1;
                        }
                    }
                }
            }
            Record::Comm { .. } | Record::Lost { .. } | Record::Other(_) => {}
        }
    }

    let mut streams: Vec<Vec<TraceEvent>> = vec![recorder_stream];
    let mut cpus: Vec<u32> = per_cpu.keys().copied().collect();
    cpus.sort_unstable();
    let last_ts = per_cpu
        .values()
        .filter_map(|s| s.last())
        .map(|e| e.ts)
        .max()
        .unwrap_or(root.spawn_ts);
    for c in cpus {
        streams.push(per_cpu.remove(&c).unwrap());
    }
    if root.ensure_exit && !st.root_exit_seen {
        stats.synthesized_root_exit = true;
        streams.push(vec![TraceEvent::new(
            root.end_ts.max(last_ts),
            TaskId::new(root.child_pid as u64, root.child_pid as u64),
            root.recorder_cpu,
            Payload::Exit {
                exit_code: root.exit_code,
            },
        )]);
    }
    (merge_streams(streams), stats)
}

fn sample_payload(
    s: &Sample,
    role: &EventRole,
    st: &mut State,
    root: &RootInfo,
) -> Option<Payload> {
    match role {
        EventRole::Sampling => {
            let mut stack = user_frames(&s.callchain);
            if stack.is_empty() && s.ip != 0 {
                stack.push(s.ip);
            }
            if stack.is_empty() || s.period == 0 {
                return None;
            }
            Some(Payload::Sample {
                stack,
                period: s.period,
            })
        }
        EventRole::Tracking => None,
        EventRole::ExecTracepoint { filename } => Some(Payload::Exec {
            image: filename.read_str(&s.raw).unwrap_or_default(),
        }),
        EventRole::ExitTracepoint { code, group } => {
            let status = (code.read_int(&s.raw, true)? & 0xff) as i32;
            if *group {
                st.group_codes.insert(s.sid.pid, status);
            } else {
                st.thread_codes.insert(s.sid.tid, status);
            }
            None
        }
        EventRole::Probe {
            hook,
            value,
            regs_mask,
            image,
        } => {
            let v = value.and_then(|src| src.read(|bit| reg_value(&s.regs, *regs_mask, bit)));
            match hook {
                Hook::Fork => {
                    let child = u32::try_from(v?).ok().filter(|&c| c > 0)?;
                    st.exited.remove(&child);
                    Some(Payload::Fork {
                        child_pid: child as u64,
                        child_tid: child as u64,
                    })
                }
                Hook::Exec => Some(Payload::Exec {
                    image: image.to_string_lossy().into_owned(),
                }),
                Hook::Exit => {
                    if s.sid.tid == root.child_pid {
                        st.root_exit_seen = true;
                    }
                    Some(Payload::Exit {
                        exit_code: v.map(|c| c as i32).unwrap_or(0),
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::live::decode::{SampleId, TaskRecord};
    use crate::trace::EventKind;

    const SAMPLING: u64 = 1;
    const EXEC: u64 = 2;
    const EXIT_GROUP: u64 = 3;
    const PROBE_EXIT: u64 = 4;

    fn roles() -> HashMap<u64, EventRole> {
        let field = |name: &str, offset, size, data_loc| Field {
            name: name.into(),
            offset,
            size,
            data_loc,
        };
        HashMap::from([
            (SAMPLING, EventRole::Sampling),
            (
                EXEC,
                EventRole::ExecTracepoint {
                    filename: field("filename", 8, 4, true),
                },
            ),
            (
                EXIT_GROUP,
                EventRole::ExitTracepoint {
                    code: field("error_code", 16, 8, false),
                    group: true,
                },
            ),
            (
                PROBE_EXIT,
                EventRole::Probe {
                    hook: Hook::Exit,
                    value: Some(ValueSource::Register {
                        bit: 5,
                        bytes: 4,
                        signed: true,
                    }),
                    regs_mask: 1 << 5,
                    image: "/bin/app".into(),
                },
            ),
        ])
    }

    fn root() -> RootInfo {
        RootInfo {
            recorder: TaskId { pid: 1, tid: 1 },
            recorder_cpu: 0,
            child_pid: 100,
            spawn_ts: 10,
            exit_code: 3,
            end_ts: 1000,
            ensure_exit: true,
        }
    }

    fn sid(id: u64, pid: u32, tid: u32, time: u64) -> SampleId {
        SampleId {
            pid,
            tid,
            time,
            cpu: 0,
            id,
        }
    }

    fn sample(id: u64, pid: u32, tid: u32, time: u64) -> Sample {
        Sample {
            sid: sid(id, pid, tid, time),
            ip: 0,
            period: 0,
            callchain: vec![],
            raw: vec![],
            regs: vec![],
        }
    }

    fn exec_raw(path: &str) -> Vec<u8> {
        let mut raw = vec![0u8; 20];
        let loc = (((path.len() + 1) as u32) << 16) | 20;
        raw[8..12].copy_from_slice(&loc.to_ne_bytes());
        raw.extend_from_slice(path.as_bytes());
        raw.push(0);
        raw
    }

    fn opts() -> ConvertOptions {
        ConvertOptions {
            task_lifecycle: true,
            sched: true,
        }
    }

    #[test]
    fn lifecycle_from_task_records_and_tracepoints() {
        let mut exit_raw = vec![0u8; 24];
        exit_raw[16..24].copy_from_slice(&(256 + 9i64).to_ne_bytes());
        let records = vec![
            (
                0,
                Record::Sample(Sample {
                    raw: exec_raw("/bin/app"),
                    ..sample(EXEC, 100, 100, 20)
                }),
            ),
            (
                1,
                Record::Fork(TaskRecord {
                    pid: 100,
                    ppid: 100,
                    tid: 101,
                    ptid: 100,
                    time: 30,
                    cpu: 1,
                }),
            ),
            (
                1,
                Record::Sample(Sample {
                    raw: exit_raw,
                    ..sample(EXIT_GROUP, 100, 101, 40)
                }),
            ),
            (
                1,
                Record::Exit(TaskRecord {
                    pid: 100,
                    ppid: 100,
                    tid: 101,
                    ptid: 101,
                    time: 41,
                    cpu: 1,
                }),
            ),
            (
                1,
                Record::Switch {
                    sid: sid(0, 100, 101, 42),
                    out: true,
                    preempt: false,
                },
            ),
            (
                0,
                Record::Exit(TaskRecord {
                    pid: 100,
                    ppid: 1,
                    tid: 100,
                    ptid: 100,
                    time: 50,
                    cpu: 0,
                }),
            ),
        ];
        let (events, stats) = convert(records, &roles(), opts(), &root());
        let kinds: Vec<EventKind> = events.iter().map(|e| e.kind()).collect();
        assert_eq!(
            kinds,
            [
                EventKind::Fork,
                EventKind::Exec,
                EventKind::Fork,
                EventKind::Exit,
                EventKind::Exit
            ]
        );
        assert_eq!(events[0].task(), TaskId { pid: 1, tid: 1 });
        assert_eq!(
            events[1].payload,
            Payload::Exec {
                image: "/bin/app".into()
            }
        );
        assert_eq!(events[3].payload, Payload::Exit { exit_code: 9 });
        assert_eq!(events[4].payload, Payload::Exit { exit_code: 9 });
        assert!(!stats.synthesized_root_exit);
    }

    #[test]
    fn samples_and_switches() {
        let records = vec![
            (
                0,
                Record::Sample(Sample {
                    ip: 0x10,
                    period: 1000,
                    callchain: vec![(-512i64) as u64, 0x10, 0x20],
                    ..sample(SAMPLING, 100, 100, 20)
                }),
            ),
            (
                0,
                Record::Sample(Sample {
                    ip: 0x30,
                    period: 1000,
                    ..sample(SAMPLING, 100, 100, 25)
                }),
            ),
            (0, Record::Sample(sample(SAMPLING, 100, 100, 26))),
            (
                0,
                Record::Switch {
                    sid: sid(0, 100, 100, 30),
                    out: true,
                    preempt: true,
                },
            ),
            (
                0,
                Record::Switch {
                    sid: sid(0, 100, 100, 35),
                    out: false,
                    preempt: false,
                },
            ),
        ];
        let (events, stats) = convert(records, &roles(), opts(), &root());
        assert_eq!(stats.dropped_samples, 1);
        assert!(stats.synthesized_root_exit);
        assert_eq!(
            events[1].payload,
            Payload::Sample {
                stack: vec![0x10, 0x20],
                period: 1000
            }
        );
        assert_eq!(
            events[2].payload,
            Payload::Sample {
                stack: vec![0x30],
                period: 1000
            }
        );
        assert_eq!(
            events[3].payload,
            Payload::SwitchOut {
                wait: WaitKind::Runnable,
                stack: None
            }
        );
        assert_eq!(events[4].payload, Payload::SwitchIn);
        let last = events.last().unwrap();
        assert_eq!(
            (last.ts, &last.payload),
            (1000, &Payload::Exit { exit_code: 3 })
        );
    }

    #[test]
    fn probe_exit_uses_register_value() {
        let records = vec![(
            0,
            Record::Sample(Sample {
                regs: vec![0xffff_fffe],
                ..sample(PROBE_EXIT, 100, 100, 20)
            }),
        )];
        let o = ConvertOptions {
            task_lifecycle: false,
            sched: false,
        };
        let (events, stats) = convert(records, &roles(), o, &root());
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].payload, Payload::Exit { exit_code: -2 });
        assert!(!stats.synthesized_root_exit);
    }

    #[test]
    fn output_round_trips_through_parser() {
        let records = vec![(
            0,
            Record::Sample(Sample {
                ip: 0x10,
                period: 5,
                ..sample(SAMPLING, 100, 100, 20)
            }),
        )];
        let (events, _) = convert(records, &roles(), opts(), &root());
        let mut buf = Vec::new();
        crate::trace::write_event_stream(&mut buf, &events).unwrap();
        let parsed = crate::trace::parse_event_stream(&buf[..]).unwrap();
        assert_eq!(parsed, events);
    }
}
