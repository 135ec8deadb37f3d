//! Offline analysis of a JSONL trace into the four replay artifacts.

use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::Path;

use anyhow::Context;
use log::warn;
use serde::Serialize;

use tracehound::par::Execution;
use tracehound::proctree::{KeySpec, NodeKey, ProcessTree, Scope};
use tracehound::profiles::{
    aggregate_samples_with, build_offcpu_profile_with, pair_context_switches, parse_symbol_map,
    walltime_accounting, Accounting, AggregateOptions, Profile, SymbolMap,
};
use tracehound::trace::{order_events, parse_event_stream, validate_trace};

use crate::failure::{Classify, Failure};

pub const ONCPU_FILE: &str = "oncpu.folded";
pub const OFFCPU_FILE: &str = "offcpu.folded";
pub const TREE_FILE: &str = "tree.json";
pub const ACCOUNTING_FILE: &str = "accounting.json";

pub struct ReplayInput<'a> {
    pub events: &'a Path,
    pub symbols: Option<&'a Path>,
    pub scope: Option<KeySpec>,
    pub exec: Execution,
}

#[derive(Debug)]
pub struct ReplaySummary {
    pub events: usize,
    pub tasks: usize,
    pub on_ns: u64,
    pub off_ns: u64,
    pub warnings: usize,
}

#[derive(Serialize)]
struct AccountingFile<'a> {
    scope: Option<NodeKey>,
    accounts: &'a [Accounting],
    warnings: &'a [String],
}

fn load_symbols(path: Option<&Path>) -> Result<SymbolMap, Failure> {
    let Some(path) = path else {
        return Ok(SymbolMap::empty());
    };
    match File::open(path) {
        Ok(f) => parse_symbol_map(BufReader::new(f))
            .with_context(|| path.display().to_string())
            .input(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            warn!(
                "symbol map {} not found, frames stay unresolved",
                path.display()
            );
            Ok(SymbolMap::empty())
        }
        Err(e) => Err(e).with_context(|| path.display().to_string()).input(),
    }
}

fn scoped_profiles(
    events: &[tracehound::trace::TraceEvent],
    map: &SymbolMap,
    scope: Option<&Scope>,
    exec: Execution,
) -> (Profile, Profile) {
    let on = aggregate_samples_with(
        events,
        map,
        scope,
        AggregateOptions {
            exec,
            ..Default::default()
        },
    );
    let pairing = pair_context_switches(events);
    let mut off = build_offcpu_profile_with(&pairing.intervals, map, scope, exec);
    off.warnings.extend(pairing.warnings());
    (on, off)
}

/// Runs the replay pipeline and writes its artifacts into `out`.
pub fn run(input: &ReplayInput<'_>, out: &Path) -> Result<ReplaySummary, Failure> {
    let path = input.events;
    let file = File::open(path)
        .with_context(|| path.display().to_string())
        .input()?;
    let parsed = parse_event_stream(BufReader::new(file))
        .with_context(|| path.display().to_string())
        .input()?;
    let events = order_events(parsed);
    let map = load_symbols(input.symbols)?;

    let mut warnings: Vec<String> = validate_trace(&events)
        .iter()
        .map(ToString::to_string)
        .collect();
    let tree = ProcessTree::from_events(&events)
        .with_context(|| format!("{}: inconsistent lifecycle events", path.display()))
        .input()?;

    let scope = match input.scope {
        Some(spec) => {
            let key = tree
                .resolve(spec)
                .with_context(|| format!("scope {}", spec.task))
                .input()?;
            Some(Scope::new(&tree, key).runtime()?)
        }
        None => None,
    };
    let (on, off) = scoped_profiles(&events, &map, scope.as_ref(), input.exec);
    warnings.extend(on.warnings.iter().map(ToString::to_string));
    warnings.extend(off.warnings.iter().map(ToString::to_string));

    let accounts = match &scope {
        Some(s) => vec![walltime_accounting(&on, &off, &tree, &s.root()).runtime()?],
        None => {
            let mut accounts = Vec::new();
            for root in tree.roots() {
                let s = Scope::new(&tree, *root).runtime()?;
                let (on, off) = scoped_profiles(&events, &map, Some(&s), input.exec);
                accounts.push(walltime_accounting(&on, &off, &tree, root).runtime()?);
            }
            accounts
        }
    };
    warnings.extend(accounts.iter().filter_map(|a| a.warning.clone()));
    for w in &warnings {
        warn!("{w}");
    }

    let mut accounting = serde_json::to_string_pretty(&AccountingFile {
        scope: scope.as_ref().map(Scope::root),
        accounts: &accounts,
        warnings: &warnings,
    })
    .runtime()?;
    accounting.push('\n');

    fs::create_dir_all(out)
        .with_context(|| out.display().to_string())
        .runtime()?;
    for (name, body) in [
        (ONCPU_FILE, on.to_folded()),
        (OFFCPU_FILE, off.to_folded()),
        (TREE_FILE, tree.to_json()),
        (ACCOUNTING_FILE, accounting),
    ] {
        let target = out.join(name);
        fs::write(&target, body)
            .with_context(|| target.display().to_string())
            .runtime()?;
    }

    Ok(ReplaySummary {
        events: events.len(),
        tasks: tree.len(),
        on_ns: on.total_weight(),
        off_ns: off.total_weight(),
        warnings: warnings.len(),
    })
}
