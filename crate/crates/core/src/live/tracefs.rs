//! tracefs discovery and tracepoint format descriptions.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// One field of a tracepoint's raw record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub offset: usize,
    pub size: usize,
    pub data_loc: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Format {
    pub fields: Vec<Field>,
}

impl Format {
    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// Parses the text of an `events/<sys>/<name>/format` file.
pub fn parse_format(text: &str) -> Format {
    let mut fields = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix("field:") else {
            continue;
        };
        let mut decl = None;
        let mut offset = None;
        let mut size = None;
        for (i, part) in rest.split(';').enumerate() {
            let part = part.trim();
            if i == 0 {
                decl = Some(part);
            } else if let Some(v) = part.strip_prefix("offset:") {
                offset = v.trim().parse().ok();
            } else if let Some(v) = part.strip_prefix("size:") {
                size = v.trim().parse().ok();
            }
        }
        let (Some(decl), Some(offset), Some(size)) = (decl, offset, size) else {
            continue;
        };
        let name = decl
            .split_whitespace()
            .last()
            .unwrap_or("")
            .split('[')
            .next()
            .unwrap_or("")
            .to_string();
        if name.is_empty() {
            continue;
        }
        fields.push(Field {
            name,
            offset,
            size,
            data_loc: decl.contains("__data_loc"),
        });
    }
    Format { fields }
}

impl Field {
    /// Reads this field from a raw tracepoint record, sign-extending when
    /// `signed`.
    pub fn read_int(&self, raw: &[u8], signed: bool) -> Option<i64> {
        let b = raw.get(self.offset..self.offset + self.size)?;
        Some(match (self.size, signed) {
            (1, false) => b[0] as i64,
            (1, true) => b[0] as i8 as i64,
            (2, false) => u16::from_ne_bytes(b.try_into().ok()?) as i64,
            (2, true) => i16::from_ne_bytes(b.try_into().ok()?) as i64,
            (4, false) => u32::from_ne_bytes(b.try_into().ok()?) as i64,
            (4, true) => i32::from_ne_bytes(b.try_into().ok()?) as i64,
            (8, _) => i64::from_ne_bytes(b.try_into().ok()?),
            _ => return None,
        })
    }

    /// Reads a `__data_loc char[]` field.
    pub fn read_str(&self, raw: &[u8]) -> Option<String> {
        if !self.data_loc {
            return None;
        }
        let loc = self.read_int(raw, false)? as u32;
        let off = (loc & 0xffff) as usize;
        let len = (loc >> 16) as usize;
        let bytes = raw.get(off..off + len)?;
        let end = bytes.iter().position(|&c| c == 0).unwrap_or(bytes.len());
        Some(String::from_utf8_lossy(&bytes[..end]).into_owned())
    }
}

/// Finds a mounted tracefs by scanning `mounts_text` (the contents of
/// `/proc/mounts`). Falls back to debugfs' `tracing` directory.
pub fn find_mount(mounts_text: &str) -> Option<PathBuf> {
    let mut debugfs = None;
    for line in mounts_text.lines() {
        let mut it = line.split_whitespace();
        let (Some(_dev), Some(dir), Some(fstype)) = (it.next(), it.next(), it.next()) else {
            continue;
        };
        let dir = dir.replace("\\040", " ");
        match fstype {
            "tracefs" => return Some(PathBuf::from(dir)),
            "debugfs" if debugfs.is_none() => debugfs = Some(PathBuf::from(dir).join("tracing")),
            _ => {}
        }
    }
    debugfs
}

/// The tracefs mount of this host, if any has the events directory.
pub fn tracefs_root() -> Option<PathBuf> {
    let mounts = fs::read_to_string("/proc/mounts").ok()?;
    find_mount(&mounts).filter(|p| p.join("events").is_dir())
}

/// A tracepoint's perf `config` value and record format.
#[derive(Debug, Clone)]
pub struct Tracepoint {
    pub id: u64,
    pub format: Format,
}

pub fn load_tracepoint(root: &Path, system: &str, name: &str) -> io::Result<Tracepoint> {
    let dir = root.join("events").join(system).join(name);
    let id = fs::read_to_string(dir.join("id"))?
        .trim()
        .parse()
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad tracepoint id"))?;
    let format = parse_format(&fs::read_to_string(dir.join("format"))?);
    Ok(Tracepoint { id, format })
}

/// Uprobes defined through `uprobe_events`, removed again on drop. Unlike
/// PMU uprobes they are plain tracepoints, so perf can inherit them into
/// forked children.
#[derive(Debug)]
pub struct DynamicProbes {
    root: PathBuf,
    group: String,
    names: Vec<String>,
}

/// The `uprobe_events` line defining one probe.
pub fn uprobe_definition(
    group: &str,
    name: &str,
    binary: &Path,
    offset: u64,
    ref_ctr_offset: u64,
    retprobe: bool,
) -> io::Result<String> {
    let path = binary
        .to_str()
        .filter(|p| !p.contains(char::is_whitespace))
        .ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("cannot probe path {}", binary.display()),
            )
        })?;
    let kind = if retprobe { 'r' } else { 'p' };
    let mut line = format!("{kind}:{group}/{name} {path}:{offset:#x}");
    if ref_ctr_offset != 0 {
        line.push_str(&format!("({ref_ctr_offset:#x})"));
    }
    Ok(line)
}

impl DynamicProbes {
    pub fn new(root: &Path, group: String) -> Self {
        DynamicProbes {
            root: root.to_path_buf(),
            group,
            names: Vec::new(),
        }
    }

    /// Whether this host lets us define probes.
    pub fn supported(root: &Path) -> bool {
        let Ok(c) =
            std::ffi::CString::new(root.join("uprobe_events").as_os_str().as_encoded_bytes())
        else {
            return false;
        };
        // SAFETY: c is a valid NUL-terminated path.
        unsafe { libc::access(c.as_ptr(), libc::W_OK) == 0 }
    }

    fn append(&self, line: &str) -> io::Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(self.root.join("uprobe_events"))?;
        f.write_all(format!("{line}\n").as_bytes())
    }

    pub fn add(
        &mut self,
        binary: &Path,
        offset: u64,
        ref_ctr_offset: u64,
        retprobe: bool,
    ) -> io::Result<Tracepoint> {
        let name = format!("p{}", self.names.len());
        let line = uprobe_definition(&self.group, &name, binary, offset, ref_ctr_offset, retprobe)?;
        self.append(&line)?;
        self.names.push(name.clone());
        load_tracepoint(&self.root, &self.group, &name)
    }
}

impl Drop for DynamicProbes {
    fn drop(&mut self) {
        for name in std::mem::take(&mut self.names) {
            if let Err(e) = self.append(&format!("-:{}/{name}", self.group)) {
                log::warn!("could not remove uprobe {}/{name}: {e}", self.group);
            }
        }
    }
}
