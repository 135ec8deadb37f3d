use std::io::{self, BufRead};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymbolMapError {
    #[error("symbol map line {0}: expected `HEXSTART HEXSIZE NAME`")]
    MalformedLine(usize),
    #[error("symbol ranges starting at {0:#x} and {1:#x} overlap")]
    OverlappingRange(u64, u64),
    #[error("read error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub start: u64,
    pub size: u64,
    pub name: String,
}

impl Symbol {
    pub fn end(&self) -> u64 {
        self.start + self.size
    }
}

/// Address-range table, sorted by start with no overlaps.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolMap {
    entries: Vec<Symbol>,
}

impl SymbolMap {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts and validates `entries`.
    pub fn from_entries(mut entries: Vec<Symbol>) -> Result<Self, SymbolMapError> {
        entries.sort_by_key(|e| e.start);
        for pair in entries.windows(2) {
            if pair[1].start < pair[0].end() {
                return Err(SymbolMapError::OverlappingRange(
                    pair[0].start,
                    pair[1].start,
                ));
            }
        }
        Ok(SymbolMap { entries })
    }

    pub fn entries(&self) -> &[Symbol] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, addr: u64) -> Option<&Symbol> {
        let idx = self.entries.partition_point(|e| e.start <= addr);
        let candidate = self.entries.get(idx.checked_sub(1)?)?;
        (addr < candidate.end()).then_some(candidate)
    }

    /// Frame name for `addr`; total over all addresses.
    pub fn symbolize(&self, addr: u64) -> String {
        match self.lookup(addr) {
            Some(sym) => sym.name.clone(),
            None => format!("[unknown:{addr:#x}]"),
        }
    }
}

pub fn symbolize(addr: u64, map: &SymbolMap) -> String {
    map.symbolize(addr)
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if digits.is_empty() || digits.starts_with('+') {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses perf-map style text: `HEXSTART HEXSIZE NAME` per line. The name
/// is the rest of the line and may contain spaces. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_symbol_map<R: BufRead>(reader: R) -> Result<SymbolMap, SymbolMapError> {
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = || SymbolMapError::MalformedLine(line_no);
        let (start, rest) = trimmed.split_once(char::is_whitespace).ok_or_else(bad)?;
        let (size, name) = rest
            .trim_start()
            .split_once(char::is_whitespace)
            .ok_or_else(bad)?;
        let name = name.trim();
        let start = parse_hex(start).ok_or_else(bad)?;
        let size = parse_hex(size).ok_or_else(bad)?;
        if size == 0 || name.is_empty() || start.checked_add(size).is_none() {
            return Err(bad());
        }
        entries.push(Symbol {
            start,
            size,
            name: name.to_string(),
        });
    }
    SymbolMap::from_entries(entries)
}
