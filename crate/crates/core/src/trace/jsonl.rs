use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{EventKind, Payload, TraceEvent, WaitKind};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {0}: malformed JSON record")]
    MalformedLine(usize),
    #[error("line {line}: schema violation in field `{field}`")]
    SchemaViolation { line: usize, field: String },
    #[error("line {0}: timestamp regresses within its cpu stream")]
    NonMonotoneTimestamp(usize),
    #[error("read error: {0}")]
    Io(#[from] io::Error),
}

impl ParseError {
    fn schema(line: usize, field: &str) -> Self {
        ParseError::SchemaViolation {
            line,
            field: field.to_string(),
        }
    }

    /// 1-based line number the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::MalformedLine(l) | ParseError::NonMonotoneTimestamp(l) => Some(*l),
            ParseError::SchemaViolation { line, .. } => Some(*line),
            ParseError::Io(_) => None,
        }
    }
}

const COMMON: &[&str] = &["kind", "ts", "pid", "tid", "cpu"];

fn allowed_fields(kind: EventKind) -> &'static [&'static str] {
    match kind {
        EventKind::Sample => &["stack", "period"],
        EventKind::SchedSwitchOut => &["stack", "wait"],
        EventKind::SchedSwitchIn => &[],
        EventKind::Fork => &["child_pid", "child_tid"],
        EventKind::Exec => &["image"],
        EventKind::Exit => &["exit_code"],
    }
}

/// Parses the JSONL replay format. Events are returned in file order;
/// timestamps must not regress within a single cpu value.
pub fn parse_event_stream<R: BufRead>(reader: R) -> Result<Vec<TraceEvent>, ParseError> {
    let mut events = Vec::new();
    let mut last_ts: HashMap<u32, u64> = HashMap::new();

    for (idx, line) in reader.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let raw = line?;
        let text = std::str::from_utf8(&raw).map_err(|_| ParseError::MalformedLine(line_no))?;
        if text.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(text).map_err(|_| ParseError::MalformedLine(line_no))?;
        let Value::Object(obj) = value else {
            return Err(ParseError::MalformedLine(line_no));
        };
        let ev = decode_record(&obj, line_no)?;

        if let Some(prev) = last_ts.insert(ev.cpu, ev.ts) {
            if ev.ts < prev {
                return Err(ParseError::NonMonotoneTimestamp(line_no));
            }
        }
        events.push(ev);
    }
    Ok(events)
}

fn decode_record(obj: &Map<String, Value>, line: usize) -> Result<TraceEvent, ParseError> {
    let kind_str = obj
        .get("kind")
        .ok_or_else(|| ParseError::schema(line, "kind"))?
        .as_str()
        .ok_or_else(|| ParseError::schema(line, "kind"))?;
    let kind = EventKind::from_wire(kind_str).ok_or_else(|| ParseError::schema(line, "kind"))?;

    let extra = allowed_fields(kind);
    if let Some(unknown) = obj
        .keys()
        .find(|k| !COMMON.contains(&k.as_str()) && !extra.contains(&k.as_str()))
    {
        return Err(ParseError::schema(line, unknown));
    }

    let ts = req_u64(obj, "ts", line)?;
    let pid = positive(obj, "pid", line)?;
    let tid = positive(obj, "tid", line)?;
    let cpu =
        u32::try_from(req_u64(obj, "cpu", line)?).map_err(|_| ParseError::schema(line, "cpu"))?;

    let payload = match kind {
        EventKind::Sample => {
            let stack = match obj.get("stack") {
                Some(v) => decode_stack(v, line)?,
                None => return Err(ParseError::schema(line, "stack")),
            };
            let period = positive(obj, "period", line)?;
            Payload::Sample { stack, period }
        }
        EventKind::SchedSwitchOut => {
            let stack = obj
                .get("stack")
                .map(|v| decode_stack(v, line))
                .transpose()?;
            let wait = match obj.get("wait") {
                None => WaitKind::Unknown,
                Some(Value::String(s)) if s == "runnable" => WaitKind::Runnable,
                Some(Value::String(s)) if s == "blocked" => WaitKind::Blocked,
                Some(_) => return Err(ParseError::schema(line, "wait")),
            };
            Payload::SwitchOut { wait, stack }
        }
        EventKind::SchedSwitchIn => Payload::SwitchIn,
        EventKind::Fork => Payload::Fork {
            child_pid: positive(obj, "child_pid", line)?,
            child_tid: positive(obj, "child_tid", line)?,
        },
        EventKind::Exec => match obj.get("image") {
            Some(Value::String(s)) => Payload::Exec { image: s.clone() },
            _ => return Err(ParseError::schema(line, "image")),
        },
        EventKind::Exit => {
            let code = obj
                .get("exit_code")
                .and_then(Value::as_i64)
                .and_then(|c| i32::try_from(c).ok())
                .ok_or_else(|| ParseError::schema(line, "exit_code"))?;
            Payload::Exit { exit_code: code }
        }
    };

    Ok(TraceEvent {
        ts,
        pid,
        tid,
        cpu,
        payload,
    })
}

fn req_u64(obj: &Map<String, Value>, field: &str, line: usize) -> Result<u64, ParseError> {
    obj.get(field)
        .and_then(Value::as_u64)
        .ok_or_else(|| ParseError::schema(line, field))
}

fn positive(obj: &Map<String, Value>, field: &str, line: usize) -> Result<u64, ParseError> {
    match req_u64(obj, field, line)? {
        0 => Err(ParseError::schema(line, field)),
        v => Ok(v),
    }
}

fn decode_stack(v: &Value, line: usize) -> Result<Vec<u64>, ParseError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ParseError::schema(line, "stack"))?;
    if arr.is_empty() {
        return Err(ParseError::schema(line, "stack"));
    }
    arr.iter()
        .map(|f| {
            f.as_str()
                .and_then(parse_hex_addr)
                .ok_or_else(|| ParseError::schema(line, "stack"))
        })
        .collect()
}

fn parse_hex_addr(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    if digits.is_empty() || digits.starts_with('+') {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

#[derive(Serialize)]
struct WireRecord<'a> {
    kind: &'static str,
    ts: u64,
    pid: u64,
    tid: u64,
    cpu: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stack: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wait: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    child_pid: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    child_tid: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exit_code: Option<i32>,
}

fn hex_stack(stack: &[u64]) -> Vec<String> {
    stack.iter().map(|a| format!("{a:#x}")).collect()
}

impl TraceEvent {
    /// Canonical single-line JSON form: common fields first, then the
    /// kind-specific ones in a fixed order. Addresses are lowercase hex.
    pub fn to_json_line(&self) -> String {
        let mut rec = WireRecord {
            kind: self.kind().as_str(),
            ts: self.ts,
            pid: self.pid,
            tid: self.tid,
            cpu: self.cpu,
            stack: None,
            period: None,
            wait: None,
            child_pid: None,
            child_tid: None,
            image: None,
            exit_code: None,
        };
        match &self.payload {
            Payload::Sample { stack, period } => {
                rec.stack = Some(hex_stack(stack));
                rec.period = Some(*period);
            }
            Payload::SwitchOut { wait, stack } => {
                rec.stack = stack.as_deref().map(hex_stack);
                rec.wait = match wait {
                    WaitKind::Unknown => None,
                    w => Some(w.as_str()),
                };
            }
            Payload::SwitchIn => {}
            Payload::Fork {
                child_pid,
                child_tid,
            } => {
                rec.child_pid = Some(*child_pid);
                rec.child_tid = Some(*child_tid);
            }
            Payload::Exec { image } => rec.image = Some(image),
            Payload::Exit { exit_code } => rec.exit_code = Some(*exit_code),
        }
        serde_json::to_string(&rec).expect("wire record serializes")
    }
}

/// Writes events in canonical JSONL form, one per line.
pub fn write_event_stream<W: Write>(mut out: W, events: &[TraceEvent]) -> io::Result<()> {
    for ev in events {
        out.write_all(ev.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
