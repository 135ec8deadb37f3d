//! Decoding of perf ring-buffer records.
//!
//! Every event is opened with `IDENTIFIER | IP | TID | TIME | CPU | PERIOD`
//! plus per-event extras, and with `sample_id_all`, so non-sample records
//! end in a fixed 32-byte `{pid, tid, time, cpu, res, id}` trailer.

use std::collections::HashMap;

pub const RECORD_LOST: u32 = 2;
pub const RECORD_COMM: u32 = 3;
pub const RECORD_EXIT: u32 = 4;
pub const RECORD_FORK: u32 = 7;
pub const RECORD_SAMPLE: u32 = 9;
pub const RECORD_SWITCH: u32 = 14;

pub const MISC_SWITCH_OUT: u16 = 1 << 13;
pub const MISC_SWITCH_OUT_PREEMPT: u16 = 1 << 14;
pub const MISC_COMM_EXEC: u16 = 1 << 13;

pub const SAMPLE_IP: u64 = 1 << 0;
pub const SAMPLE_TID: u64 = 1 << 1;
pub const SAMPLE_TIME: u64 = 1 << 2;
pub const SAMPLE_CALLCHAIN: u64 = 1 << 5;
pub const SAMPLE_CPU: u64 = 1 << 7;
pub const SAMPLE_PERIOD: u64 = 1 << 8;
pub const SAMPLE_RAW: u64 = 1 << 10;
pub const SAMPLE_REGS_USER: u64 = 1 << 12;
pub const SAMPLE_IDENTIFIER: u64 = 1 << 16;

/// Fields present on every event this crate opens.
pub const BASE_SAMPLE_TYPE: u64 =
    SAMPLE_IDENTIFIER | SAMPLE_IP | SAMPLE_TID | SAMPLE_TIME | SAMPLE_CPU | SAMPLE_PERIOD;

/// Callchain entries at or above this value are context markers.
pub const CONTEXT_MAX: u64 = (-4095i64) as u64;

const TRAILER_LEN: usize = 32;

/// How to parse samples of one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLayout {
    pub sample_type: u64,
    pub regs_mask: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleId {
    pub pid: u32,
    pub tid: u32,
    pub time: u64,
    pub cpu: u32,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sid: SampleId,
    pub ip: u64,
    pub period: u64,
    pub callchain: Vec<u64>,
    pub raw: Vec<u8>,
    pub regs: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskRecord {
    pub pid: u32,
    pub ppid: u32,
    pub tid: u32,
    pub ptid: u32,
    pub time: u64,
    pub cpu: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Sample(Sample),
    Fork(TaskRecord),
    Exit(TaskRecord),
    Comm {
        sid: SampleId,
        exec: bool,
        comm: String,
    },
    Switch {
        sid: SampleId,
        out: bool,
        preempt: bool,
    },
    Lost {
        lost: u64,
    },
    Other(u32),
}

impl Record {
    pub fn time(&self) -> Option<u64> {
        match self {
            Record::Sample(s) => Some(s.sid.time),
            Record::Fork(t) | Record::Exit(t) => Some(t.time),
            Record::Comm { sid, .. } | Record::Switch { sid, .. } => Some(sid.time),
            Record::Lost { .. } | Record::Other(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("record truncated")]
    Truncated,
    #[error("sample from unknown event id {0}")]
    UnknownEvent(u64),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_ne_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_ne_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn trailer(body: &[u8]) -> Result<SampleId, DecodeError> {
    if body.len() < TRAILER_LEN {
        return Err(DecodeError::Truncated);
    }
    let mut c = Cursor::new(&body[body.len() - TRAILER_LEN..]);
    let pid = c.u32()?;
    let tid = c.u32()?;
    let time = c.u64()?;
    let cpu = c.u32()?;
    let _res = c.u32()?;
    let id = c.u64()?;
    Ok(SampleId {
        pid,
        tid,
        time,
        cpu,
        id,
    })
}

/// Decodes one complete record (header included).
pub fn decode_record(
    bytes: &[u8],
    layouts: &HashMap<u64, SampleLayout>,
) -> Result<Record, DecodeError> {
    let mut c = Cursor::new(bytes);
    let kind = c.u32()?;
    let misc = u16::from_ne_bytes(c.take(2)?.try_into().unwrap());
    let size = u16::from_ne_bytes(c.take(2)?.try_into().unwrap()) as usize;
    if size < 8 || bytes.len() < size {
        return Err(DecodeError::Truncated);
    }
    let body = &bytes[8..size];
    let mut c = Cursor::new(body);

    Ok(match kind {
        RECORD_SAMPLE => Record::Sample(decode_sample(&mut c, layouts)?),
        RECORD_FORK | RECORD_EXIT => {
            let pid = c.u32()?;
            let ppid = c.u32()?;
            let tid = c.u32()?;
            let ptid = c.u32()?;
            let time = c.u64()?;
            let sid = trailer(body)?;
            let rec = TaskRecord {
                pid,
                ppid,
                tid,
                ptid,
                time,
                cpu: sid.cpu,
            };
            if kind == RECORD_FORK {
                Record::Fork(rec)
            } else {
                Record::Exit(rec)
            }
        }
        RECORD_COMM => {
            let sid = trailer(body)?;
            let _pid = c.u32()?;
            let _tid = c.u32()?;
            let name_bytes = &body[8..body.len() - TRAILER_LEN];
            let end = name_bytes
                .iter()
                .position(|&b| b == 0)
                .unwrap_or(name_bytes.len());
            Record::Comm {
                sid,
                exec: misc & MISC_COMM_EXEC != 0,
                comm: String::from_utf8_lossy(&name_bytes[..end]).into_owned(),
            }
        }
        RECORD_SWITCH => Record::Switch {
            sid: trailer(body)?,
            out: misc & MISC_SWITCH_OUT != 0,
            preempt: misc & MISC_SWITCH_OUT_PREEMPT != 0,
        },
        RECORD_LOST => {
            let _id = c.u64()?;
            Record::Lost { lost: c.u64()? }
        }
        other => Record::Other(other),
    })
}

fn decode_sample(
    c: &mut Cursor<'_>,
    layouts: &HashMap<u64, SampleLayout>,
) -> Result<Sample, DecodeError> {
    let id = c.u64()?;
    let layout = layouts.get(&id).ok_or(DecodeError::UnknownEvent(id))?;
    let st = layout.sample_type;
    let ip = c.u64()?;
    let pid = c.u32()?;
    let tid = c.u32()?;
    let time = c.u64()?;
    let cpu = c.u32()?;
    let _res = c.u32()?;
    let period = c.u64()?;

    let mut callchain = Vec::new();
    if st & SAMPLE_CALLCHAIN != 0 {
        let nr = c.u64()? as usize;
        if nr > c.buf.len() / 8 {
            return Err(DecodeError::Truncated);
        }
        callchain.reserve(nr);
        for _ in 0..nr {
            callchain.push(c.u64()?);
        }
    }
    let mut raw = Vec::new();
    if st & SAMPLE_RAW != 0 {
        let n = c.u32()? as usize;
        raw = c.take(n)?.to_vec();
    }
    let mut regs = Vec::new();
    if st & SAMPLE_REGS_USER != 0 {
        let abi = c.u64()?;
        if abi != 0 {
            for _ in 0..layout.regs_mask.count_ones() {
                regs.push(c.u64()?);
            }
        }
    }
    Ok(Sample {
        sid: SampleId {
            pid,
            tid,
            time,
            cpu,
            id,
        },
        ip,
        period,
        callchain,
        raw,
        regs,
    })
}

/// User-space frames of a callchain, leaf first, with context markers
/// removed.
pub fn user_frames(callchain: &[u64]) -> Vec<u64> {
    callchain
        .iter()
        .copied()
        .filter(|&a| a != 0 && a < CONTEXT_MAX)
        .collect()
}

/// Value of register bit `bit` in a sample taken with `mask`.
pub fn reg_value(regs: &[u64], mask: u64, bit: u32) -> Option<u64> {
    if mask & (1 << bit) == 0 {
        return None;
    }
    let idx = (mask & ((1u64 << bit) - 1)).count_ones() as usize;
    regs.get(idx).copied()
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn layouts() -> HashMap<u64, SampleLayout> {
        HashMap::from([
            (
                1,
                SampleLayout {
                    sample_type: BASE_SAMPLE_TYPE | SAMPLE_CALLCHAIN,
                    regs_mask: 0,
                },
            ),
            (
                2,
                SampleLayout {
                    sample_type: BASE_SAMPLE_TYPE | SAMPLE_RAW,
                    regs_mask: 0,
                },
            ),
            (
                3,
                SampleLayout {
                    sample_type: BASE_SAMPLE_TYPE | SAMPLE_REGS_USER,
                    regs_mask: (1 << 0) | (1 << 5),
                },
            ),
        ])
    }

    fn sid(id: u64) -> SampleId {
        SampleId {
            pid: 10,
            tid: 11,
            time: 12345,
            cpu: 3,
            id,
        }
    }

    #[test]
    fn callchain_sample() {
        let s = Sample {
            sid: sid(1),
            ip: 0x401000,
            period: 1_000_000,
            callchain: vec![(-512i64) as u64, 0x401000, 0x401234],
            raw: vec![],
            regs: vec![],
        };
        let bytes = sample_bytes(&s, layouts()[&1]);
        assert_eq!(
            decode_record(&bytes, &layouts()).unwrap(),
            Record::Sample(s.clone())
        );
        assert_eq!(user_frames(&s.callchain), vec![0x401000, 0x401234]);
    }

    #[test]
    fn raw_and_regs_samples() {
        let s = Sample {
            sid: sid(2),
            ip: 1,
            period: 1,
            callchain: vec![],
            raw: vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
            regs: vec![],
        };
        let bytes = sample_bytes(&s, layouts()[&2]);
        assert_eq!(
            decode_record(&bytes, &layouts()).unwrap(),
            Record::Sample(s)
        );

        let s = Sample {
            sid: sid(3),
            ip: 1,
            period: 1,
            callchain: vec![],
            raw: vec![],
            regs: vec![42, 7],
        };
        let bytes = sample_bytes(&s, layouts()[&3]);
        let Record::Sample(got) = decode_record(&bytes, &layouts()).unwrap() else {
            panic!()
        };
        assert_eq!(reg_value(&got.regs, layouts()[&3].regs_mask, 0), Some(42));
        assert_eq!(reg_value(&got.regs, layouts()[&3].regs_mask, 5), Some(7));
        assert_eq!(reg_value(&got.regs, layouts()[&3].regs_mask, 4), None);
    }

    #[test]
    fn task_records() {
        let t = TaskRecord {
            pid: 5,
            ppid: 4,
            tid: 6,
            ptid: 4,
            time: 99,
            cpu: 1,
        };
        let bytes = task_bytes(RECORD_FORK, t, 1);
        assert_eq!(decode_record(&bytes, &layouts()).unwrap(), Record::Fork(t));
        let bytes = task_bytes(RECORD_EXIT, t, 1);
        assert_eq!(decode_record(&bytes, &layouts()).unwrap(), Record::Exit(t));
    }

    #[test]
    fn switch_and_comm_records() {
        let bytes = header(
            RECORD_SWITCH,
            MISC_SWITCH_OUT | MISC_SWITCH_OUT_PREEMPT,
            &trailer_bytes(sid(1)),
        );
        assert_eq!(
            decode_record(&bytes, &layouts()).unwrap(),
            Record::Switch {
                sid: sid(1),
                out: true,
                preempt: true
            }
        );

        let mut body = Vec::new();
        body.extend_from_slice(&10u32.to_ne_bytes());
        body.extend_from_slice(&11u32.to_ne_bytes());
        body.extend_from_slice(b"work\0\0\0\0");
        body.extend(trailer_bytes(sid(1)));
        let bytes = header(RECORD_COMM, MISC_COMM_EXEC, &body);
        assert_eq!(
            decode_record(&bytes, &layouts()).unwrap(),
            Record::Comm {
                sid: sid(1),
                exec: true,
                comm: "work".into()
            }
        );
    }

    #[test]
    fn garbage_is_an_error_not_a_panic() {
        assert_eq!(
            decode_record(&[1, 2, 3], &layouts()),
            Err(DecodeError::Truncated)
        );
        let s = Sample {
            sid: sid(9),
            ip: 0,
            period: 0,
            callchain: vec![],
            raw: vec![],
            regs: vec![],
        };
        let bytes = sample_bytes(&s, layouts()[&1]);
        assert_eq!(
            decode_record(&bytes, &layouts()),
            Err(DecodeError::UnknownEvent(9))
        );
        let mut bytes = task_bytes(
            RECORD_FORK,
            TaskRecord {
                pid: 1,
                ppid: 1,
                tid: 1,
                ptid: 1,
                time: 1,
                cpu: 0,
            },
            1,
        );
        bytes.truncate(20);
        assert_eq!(
            decode_record(&bytes, &layouts()),
            Err(DecodeError::Truncated)
        );
    }
}
