//! Where uprobes and USDT probes go for lifecycle tracing.
//!
//! No placement is built in; the user supplies a JSON file such as
//!
//! ```json
//! {"probes": [
//!   {"event": "exec", "binary": "/usr/bin/app", "symbol": "main"},
//!   {"event": "exit", "binary": "/lib/x86_64-linux-gnu/libc.so.6", "symbol": "_exit", "value": "arg0"},
//!   {"event": "fork", "binary": "/lib/x86_64-linux-gnu/libc.so.6", "symbol": "fork", "return": true, "value": "ret"}
//! ]}
//! ```
//!
//! USDT probes name a marker instead of a symbol (`"usdt": "provider:name"`),
//! and `argN` then refers to the marker's N-th argument.
//!
//! A hit is turned into an event of the probe's kind for the hitting task:
//! `fork` needs a value (the new child's id, non-positive values are
//! ignored), `exec` reports the probe's binary as the image, `exit` uses the
//! value as exit code (0 without one).
//!
//! A return probe on `fork` fires in the parent, which may be scheduled
//! only after the child has already run; its fork event can then follow
//! the child's own events. Shells often use `vfork` for simple commands,
//! which needs its own probe.

use std::fs;
use std::path::{Path, PathBuf};

use object::{Object, ObjectSection, ObjectSegment, ObjectSymbol};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hook {
    Fork,
    Exec,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub event: Hook,
    pub binary: PathBuf,
    #[serde(default)]
    pub symbol: Option<String>,
    #[serde(default)]
    pub offset: Option<u64>,
    #[serde(default)]
    pub usdt: Option<String>,
    #[serde(default, rename = "return")]
    pub on_return: bool,
    #[serde(default)]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementFile {
    pub probes: Vec<ProbeSpec>,
}

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid placement file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("placement has no probes")]
    Empty,
    #[error("probe {index}: {detail}")]
    Invalid { index: usize, detail: String },
    #[error("{path}: {detail}")]
    Elf { path: PathBuf, detail: String },
}

impl PlacementFile {
    pub fn from_json(text: &str) -> Result<Self, PlacementError> {
        let p: PlacementFile = serde_json::from_str(text)?;
        if p.probes.is_empty() {
            return Err(PlacementError::Empty);
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PlacementError> {
        let text = fs::read_to_string(path).map_err(|source| PlacementError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Where a probe's value is read from at hit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueSource {
    Register { bit: u32, bytes: u8, signed: bool },
    Constant(i64),
}

impl ValueSource {
    /// Extracts the value given a lookup of sampled registers.
    pub fn read(&self, reg: impl Fn(u32) -> Option<u64>) -> Option<i64> {
        match *self {
            ValueSource::Constant(c) => Some(c),
            ValueSource::Register { bit, bytes, signed } => {
                let v = reg(bit)?;
                Some(match (bytes, signed) {
                    (1, true) => v as i8 as i64,
                    (1, false) => v as u8 as i64,
                    (2, true) => v as i16 as i64,
                    (2, false) => v as u16 as i64,
                    (4, true) => v as i32 as i64,
                    (4, false) => v as u32 as i64,
                    _ => v as i64,
                })
            }
        }
    }
}

/// A probe ready to be attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedProbe {
    pub hook: Hook,
    pub binary: PathBuf,
    pub file_offset: u64,
    pub ref_ctr_offset: u64,
    pub on_return: bool,
    pub value: Option<ValueSource>,
    pub label: String,
}

/// Which placement styles a session accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementKind {
    Uprobe,
    Usdt,
}

pub fn resolve_all(
    file: &PlacementFile,
    kind: PlacementKind,
) -> Result<Vec<ResolvedProbe>, PlacementError> {
    file.probes
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            resolve(spec, kind).map_err(|e| match e {
                PlacementError::Invalid { detail, .. } => PlacementError::Invalid { index, detail },
                other => other,
            })
        })
        .collect()
}

fn invalid(detail: impl Into<String>) -> PlacementError {
    PlacementError::Invalid {
        index: 0,
        detail: detail.into(),
    }
}

pub fn resolve(spec: &ProbeSpec, kind: PlacementKind) -> Result<ResolvedProbe, PlacementError> {
    let elf_err = |detail: String| PlacementError::Elf {
        path: spec.binary.clone(),
        detail,
    };
    if spec.event == Hook::Fork && spec.value.is_none() {
        return Err(invalid("fork probes need a `value` holding the child id"));
    }
    let data = fs::read(&spec.binary).map_err(|source| PlacementError::Io {
        path: spec.binary.clone(),
        source,
    })?;
    let file = object::File::parse(&*data).map_err(|e| elf_err(e.to_string()))?;

    let (file_offset, ref_ctr_offset, args, label) = match kind {
        PlacementKind::Uprobe => {
            if spec.usdt.is_some() {
                return Err(invalid("`usdt` is only valid in usdt attach mode"));
            }
            let (off, label) = match (&spec.symbol, spec.offset) {
                (Some(sym), None) => {
                    let addr = symbol_address(&file, sym)
                        .ok_or_else(|| elf_err(format!("symbol `{sym}` not found")))?;
                    let off = vaddr_to_offset(&file, addr).ok_or_else(|| {
                        elf_err(format!("symbol `{sym}` is not in a loadable segment"))
                    })?;
                    (off, sym.clone())
                }
                (None, Some(off)) => (off, format!("{off:#x}")),
                _ => return Err(invalid("exactly one of `symbol` or `offset` is required")),
            };
            (off, 0, None, label)
        }
        PlacementKind::Usdt => {
            if spec.symbol.is_some() || spec.offset.is_some() || spec.on_return {
                return Err(invalid(
                    "usdt probes take only `usdt`, not `symbol`/`offset`/`return`",
                ));
            }
            let name = spec
                .usdt
                .as_deref()
                .ok_or_else(|| invalid("`usdt` (provider:name) is required"))?;
            let (provider, marker) = name
                .split_once(':')
                .ok_or_else(|| invalid(format!("`{name}` is not provider:name")))?;
            let notes = usdt_notes(&file).map_err(elf_err)?;
            let note = notes
                .iter()
                .find(|n| n.provider == provider && n.name == marker)
                .ok_or_else(|| elf_err(format!("no USDT marker `{name}`")))?;
            let off = vaddr_to_offset(&file, note.pc)
                .ok_or_else(|| elf_err(format!("marker `{name}` is not mapped")))?;
            let sema = if note.semaphore == 0 {
                0
            } else {
                vaddr_to_offset(&file, note.semaphore)
                    .ok_or_else(|| elf_err(format!("semaphore of `{name}` is not mapped")))?
            };
            (off, sema, Some(note.args.clone()), name.to_string())
        }
    };

    let value = spec
        .value
        .as_deref()
        .map(|v| value_source(v, spec.on_return, args.as_deref()))
        .transpose()
        .map_err(invalid)?;

    Ok(ResolvedProbe {
        hook: spec.event,
        binary: fs::canonicalize(&spec.binary).unwrap_or_else(|_| spec.binary.clone()),
        file_offset,
        ref_ctr_offset,
        on_return: spec.on_return,
        value,
        label,
    })
}

fn symbol_address(file: &object::File<'_>, name: &str) -> Option<u64> {
    file.symbols()
        .chain(file.dynamic_symbols())
        .find(|s| s.is_definition() && s.address() != 0 && s.name() == Ok(name))
        .map(|s| s.address())
}

/// File offset of a virtual address inside a loadable segment.
pub fn vaddr_to_offset(file: &object::File<'_>, vaddr: u64) -> Option<u64> {
    file.segments().find_map(|seg| {
        let (off, size) = seg.file_range();
        let start = seg.address();
        (vaddr >= start && vaddr < start + size).then(|| vaddr - start + off)
    })
}

/// One `.note.stapsdt` entry with its address already adjusted for
/// prelinking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsdtNote {
    pub provider: String,
    pub name: String,
    pub pc: u64,
    pub semaphore: u64,
    pub args: String,
}

fn usdt_notes(file: &object::File<'_>) -> Result<Vec<UsdtNote>, String> {
    let section = file
        .section_by_name(".note.stapsdt")
        .ok_or_else(|| "no .note.stapsdt section".to_string())?;
    let data = section.data().map_err(|e| e.to_string())?;
    let base = file.section_by_name(".stapsdt.base").map(|s| s.address());
    parse_stapsdt_notes(data, file.is_64(), file.is_little_endian(), base)
}

/// Parses the raw contents of a `.note.stapsdt` section. `base_addr` is the
/// runtime address of `.stapsdt.base`, used to undo prelink shifts.
pub fn parse_stapsdt_notes(
    data: &[u8],
    is_64: bool,
    little_endian: bool,
    base_addr: Option<u64>,
) -> Result<Vec<UsdtNote>, String> {
    let u32_at = |b: &[u8]| {
        let a: [u8; 4] = b.try_into().unwrap();
        if little_endian {
            u32::from_le_bytes(a)
        } else {
            u32::from_be_bytes(a)
        }
    };
    let addr_at = |b: &[u8]| -> u64 {
        if is_64 {
            let a: [u8; 8] = b.try_into().unwrap();
            if little_endian {
                u64::from_le_bytes(a)
            } else {
                u64::from_be_bytes(a)
            }
        } else {
            u32_at(b) as u64
        }
    };
    let align4 = |n: usize| (n + 3) & !3;
    let asz = if is_64 { 8 } else { 4 };
    let truncated = || "truncated stapsdt note".to_string();

    let mut notes = Vec::new();
    let mut pos = 0;
    while pos + 12 <= data.len() {
        let namesz = u32_at(&data[pos..pos + 4]) as usize;
        let descsz = u32_at(&data[pos + 4..pos + 8]) as usize;
        let ntype = u32_at(&data[pos + 8..pos + 12]);
        let name_start = pos + 12;
        let desc_start = name_start + align4(namesz);
        let next = desc_start + align4(descsz);
        if desc_start + descsz > data.len() {
            return Err(truncated());
        }
        let owner = &data[name_start..name_start + namesz];
        pos = next;
        if ntype != 3 || owner != b"stapsdt\0" {
            continue;
        }
        let desc = &data[desc_start..desc_start + descsz];
        if desc.len() < 3 * asz {
            return Err(truncated());
        }
        let mut pc = addr_at(&desc[..asz]);
        let note_base = addr_at(&desc[asz..2 * asz]);
        let semaphore = addr_at(&desc[2 * asz..3 * asz]);
        if let Some(actual) = base_addr {
            pc = pc.wrapping_add(actual).wrapping_sub(note_base);
        }
        let mut strings = desc[3 * asz..]
            .split(|&b| b == 0)
            .map(|s| String::from_utf8_lossy(s).into_owned());
        let provider = strings.next().ok_or_else(truncated)?;
        let name = strings.next().ok_or_else(truncated)?;
        let args = strings.next().unwrap_or_default();
        notes.push(UsdtNote {
            provider,
            name,
            pc,
            semaphore,
            args,
        });
    }
    Ok(notes)
}

/// One operand of a USDT argument string such as `-4@%esi`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UsdtArg {
    Register {
        name: String,
        bytes: u8,
        signed: bool,
    },
    Constant(i64),
    Memory,
}

pub fn parse_usdt_args(args: &str) -> Vec<UsdtArg> {
    args.split_whitespace()
        .map(|a| {
            let Some((size, loc)) = a.split_once('@') else {
                return UsdtArg::Memory;
            };
            let size: i32 = size.parse().unwrap_or(8);
            let (bytes, signed) = (size.unsigned_abs().clamp(1, 8) as u8, size < 0);
            if let Some(c) = loc.strip_prefix('$') {
                c.parse().map(UsdtArg::Constant).unwrap_or(UsdtArg::Memory)
            } else if let Some(r) = loc.strip_prefix('%') {
                UsdtArg::Register {
                    name: r.to_string(),
                    bytes,
                    signed,
                }
            } else if loc.starts_with('x') || loc.starts_with('w') {
                UsdtArg::Register {
                    name: loc.to_string(),
                    bytes,
                    signed,
                }
            } else {
                UsdtArg::Memory
            }
        })
        .collect()
}

/// perf register index of an argument register name.
#[cfg(target_arch = "x86_64")]
pub fn register_bit(name: &str) -> Option<u32> {
    let base = match name {
        "rax" | "eax" | "ax" | "al" => 0,
        "rbx" | "ebx" | "bx" | "bl" => 1,
        "rcx" | "ecx" | "cx" | "cl" => 2,
        "rdx" | "edx" | "dx" | "dl" => 3,
        "rsi" | "esi" | "si" | "sil" => 4,
        "rdi" | "edi" | "di" | "dil" => 5,
        "rbp" | "ebp" | "bp" | "bpl" => 6,
        "rsp" | "esp" | "sp" | "spl" => 7,
        "rip" => 8,
        _ => {
            let n: u32 = name
                .strip_prefix('r')?
                .trim_end_matches(['d', 'w', 'b'])
                .parse()
                .ok()?;
            return (8..=15).contains(&n).then_some(n + 8);
        }
    };
    Some(base)
}

#[cfg(target_arch = "aarch64")]
pub fn register_bit(name: &str) -> Option<u32> {
    let n: u32 = name.strip_prefix(['x', 'w'])?.parse().ok()?;
    (n <= 30).then_some(n)
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
pub fn register_bit(_name: &str) -> Option<u32> {
    None
}

#[cfg(target_arch = "x86_64")]
const CALL_ARGS: [&str; 6] = ["rdi", "rsi", "rdx", "rcx", "r8", "r9"];
#[cfg(target_arch = "x86_64")]
const RETURN_REG: &str = "rax";
#[cfg(target_arch = "aarch64")]
const CALL_ARGS: [&str; 8] = ["x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7"];
#[cfg(target_arch = "aarch64")]
const RETURN_REG: &str = "x0";
#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
const CALL_ARGS: [&str; 0] = [];
#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
const RETURN_REG: &str = "";

/// Resolves a `value` spec (`argN` or `ret`). For USDT probes `usdt_args`
/// holds the marker's argument string.
pub fn value_source(
    spec: &str,
    on_return: bool,
    usdt_args: Option<&str>,
) -> Result<ValueSource, String> {
    let reg = |name: &str, bytes, signed| {
        register_bit(name)
            .map(|bit| ValueSource::Register { bit, bytes, signed })
            .ok_or_else(|| format!("register `{name}` cannot be sampled on this platform"))
    };
    if spec == "ret" {
        if !on_return {
            return Err("`ret` needs `\"return\": true`".into());
        }
        return reg(RETURN_REG, 8, true);
    }
    let n: usize = spec
        .strip_prefix("arg")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| format!("value `{spec}` is not argN or ret"))?;
    match usdt_args {
        Some(args) => match parse_usdt_args(args).into_iter().nth(n) {
            Some(UsdtArg::Register {
                name,
                bytes,
                signed,
            }) => reg(&name, bytes, signed),
            Some(UsdtArg::Constant(c)) => Ok(ValueSource::Constant(c)),
            Some(UsdtArg::Memory) => Err(format!("USDT argument {n} is a memory operand")),
            None => Err(format!("USDT marker has no argument {n}")),
        },
        None => {
            if on_return {
                return Err("arguments are not available at function return".into());
            }
            let name = CALL_ARGS
                .get(n)
                .ok_or_else(|| format!("argument {n} is not passed in a register"))?;
            reg(name, 8, true)
        }
    }
}
