use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::proctree::NodeKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    OnCpu,
    OffCpu,
}

/// Root-first stack of frame names.
pub type Stack = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ProfileWarning {
    SamplesOutOfScope { count: u64 },
    UnmatchedSwitchIn { count: u64 },
    RepeatedSwitchOut { count: u64 },
    EmptyIntervals { count: u64 },
}

impl fmt::Display for ProfileWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileWarning::SamplesOutOfScope { count } => {
                write!(
                    f,
                    "{count} samples outside the scoped lifetimes were skipped"
                )
            }
            ProfileWarning::UnmatchedSwitchIn { count } => {
                write!(
                    f,
                    "{count} switch-ins without an open interval were dropped"
                )
            }
            ProfileWarning::RepeatedSwitchOut { count } => {
                write!(
                    f,
                    "{count} switch-outs arrived while an interval was already open"
                )
            }
            ProfileWarning::EmptyIntervals { count } => {
                write!(f, "{count} zero-length off-cpu intervals were dropped")
            }
        }
    }
}

/// Stack-indexed weights in nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub kind: ProfileKind,
    pub entries: BTreeMap<Stack, u64>,
    pub scope: Option<NodeKey>,
    pub warnings: Vec<ProfileWarning>,
}

impl Profile {
    pub fn new(kind: ProfileKind) -> Self {
        Profile {
            kind,
            entries: BTreeMap::new(),
            scope: None,
            warnings: Vec::new(),
        }
    }

    pub fn total_weight(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Folded-stack text: `frame;frame weight` per entry, sorted by the
    /// joined stack string, with a trailing newline.
    pub fn to_folded(&self) -> String {
        let mut lines: Vec<(String, u64)> = self
            .entries
            .iter()
            .map(|(stack, w)| (stack.join(";"), *w))
            .collect();
        lines.sort();
        let mut out = String::new();
        for (stack, w) in lines {
            out.push_str(&stack);
            out.push(' ');
            out.push_str(&w.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            stack: &'a [String],
            weight_ns: u64,
        }
        #[derive(Serialize)]
        struct Export<'a> {
            kind: ProfileKind,
            #[serde(skip_serializing_if = "Option::is_none")]
            scope: Option<NodeKey>,
            entries: Vec<Entry<'a>>,
            warnings: &'a [ProfileWarning],
        }
        let export = Export {
            kind: self.kind,
            scope: self.scope,
            entries: self
                .entries
                .iter()
                .map(|(stack, w)| Entry {
                    stack,
                    weight_ns: *w,
                })
                .collect(),
            warnings: &self.warnings,
        };
        let mut s = serde_json::to_string_pretty(&export).expect("profile serializes");
        s.push('\n');
        s
    }
}

pub fn to_folded(profile: &Profile) -> String {
    profile.to_folded()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FoldedError {
    #[error("folded line {0}: expected `frames weight`")]
    MalformedLine(usize),
}

/// Reads folded text back into a profile. Repeated stacks are summed.
pub fn parse_folded(text: &str, kind: ProfileKind) -> Result<Profile, FoldedError> {
    let mut profile = Profile::new(kind);
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || FoldedError::MalformedLine(idx + 1);
        let (stack, weight) = line.rsplit_once(' ').ok_or_else(bad)?;
        let weight: u64 = weight.parse().map_err(|_| bad())?;
        if weight == 0 || stack.is_empty() {
            return Err(bad());
        }
        let frames: Stack = stack.split(';').map(str::to_string).collect();
        if frames.iter().any(String::is_empty) {
            return Err(bad());
        }
        let slot = profile.entries.entry(frames).or_insert(0);
        *slot = slot.checked_add(weight).ok_or_else(bad)?;
    }
    Ok(profile)
}

/// Frame names must not contain the folded separator.
pub(crate) fn sanitize_frame(name: String) -> String {
    if name.contains(';') {
        name.replace(';', ":")
    } else {
        name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(frames: &[&str]) -> Stack {
        frames.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn folded_single_entry() {
        let mut p = Profile::new(ProfileKind::OnCpu);
        p.entries.insert(stack(&["main", "work"]), 42);
        assert_eq!(p.to_folded(), "main;work 42\n");
    }

    #[test]
    fn folded_empty() {
        assert_eq!(to_folded(&Profile::new(ProfileKind::OffCpu)), "");
    }

    #[test]
    fn folded_sorts_by_joined_string() {
        let mut p = Profile::new(ProfileKind::OnCpu);
        p.entries.insert(stack(&["a", "x"]), 1);
        p.entries.insert(stack(&["a-"]), 2);
        // '-' sorts before ';'
        assert_eq!(p.to_folded(), "a- 2\na;x 1\n");
    }

    #[test]
    fn parse_back_with_spaces_in_frames() {
        let text = "main;operator new(unsigned long) 7\nmain 3\n";
        let p = parse_folded(text, ProfileKind::OnCpu).unwrap();
        assert_eq!(
            p.entries[&stack(&["main", "operator new(unsigned long)"])],
            7
        );
        assert_eq!(
            p.to_folded(),
            "main 3\nmain;operator new(unsigned long) 7\n"
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        for bad in ["main", "main x", "main 0", " 5", "a;;b 5", "main -1"] {
            assert_eq!(
                parse_folded(bad, ProfileKind::OnCpu),
                Err(FoldedError::MalformedLine(1)),
                "{bad}"
            );
        }
    }

    #[test]
    fn sanitize_replaces_separator() {
        assert_eq!(sanitize_frame("Lfoo;bar".into()), "Lfoo:bar");
    }
}
