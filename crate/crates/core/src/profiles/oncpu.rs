use crate::par::{fold_weights, Execution, Step};
use crate::proctree::Scope;
use crate::trace::{Payload, TraceEvent};

use super::profile::{sanitize_frame, Profile, ProfileKind, ProfileWarning, Stack};
use super::symbols::SymbolMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleWeight {
    /// Each sample weighs its sampling period in ns.
    #[default]
    Period,
    /// Each sample weighs 1.
    Count,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AggregateOptions {
    pub weight: SampleWeight,
    pub exec: Execution,
}

/// Symbolizes a leaf-first address stack into a root-first frame list.
pub fn symbolize_stack(stack: &[u64], map: &SymbolMap) -> Stack {
    stack
        .iter()
        .rev()
        .map(|&addr| sanitize_frame(map.symbolize(addr)))
        .collect()
}

/// On-CPU profile from sample events, weighted by sampling period.
pub fn aggregate_samples(events: &[TraceEvent], map: &SymbolMap, scope: Option<&Scope>) -> Profile {
    aggregate_samples_with(events, map, scope, AggregateOptions::default())
}

pub fn aggregate_samples_with(
    events: &[TraceEvent],
    map: &SymbolMap,
    scope: Option<&Scope>,
    opts: AggregateOptions,
) -> Profile {
    let (weights, skipped) = fold_weights(opts.exec, events, |ev| match &ev.payload {
        Payload::Sample { stack, period } => {
            if scope.is_some_and(|s| !s.contains(ev.task(), ev.ts)) {
                return Step::Skip;
            }
            let w = match opts.weight {
                SampleWeight::Period => *period,
                SampleWeight::Count => 1,
            };
            Step::Add(symbolize_stack(stack, map), w)
        }
        _ => Step::Ignore,
    });

    let mut profile = Profile::new(ProfileKind::OnCpu);
    profile.entries = weights.into_iter().collect();
    profile.scope = scope.map(Scope::root);
    if skipped > 0 {
        profile
            .warnings
            .push(ProfileWarning::SamplesOutOfScope { count: skipped });
    }
    profile
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proctree::{NodeKey, ProcessTree};
    use crate::trace::TaskId;

    fn sample(ts: u64, tid: u64, stack: Vec<u64>, period: u64) -> TraceEvent {
        TraceEvent::new(
            ts,
            TaskId::new(tid, tid),
            0,
            Payload::Sample { stack, period },
        )
    }

    fn map() -> SymbolMap {
        SymbolMap::from_entries(vec![
            super::super::Symbol {
                start: 0x100,
                size: 0x10,
                name: "main".into(),
            },
            super::super::Symbol {
                start: 0x200,
                size: 0x10,
                name: "work".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn three_identical_samples() {
        let evs: Vec<_> = (0..3)
            .map(|i| sample(i, 1, vec![0x204, 0x108], 250_000))
            .collect();
        let p = aggregate_samples(&evs, &map(), None);
        assert_eq!(p.entries.len(), 1);
        assert_eq!(
            p.entries[&vec!["main".to_string(), "work".to_string()]],
            750_000
        );
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn no_samples() {
        let evs = vec![TraceEvent::new(1, TaskId::new(1, 1), 0, Payload::SwitchIn)];
        assert!(aggregate_samples(&evs, &map(), None).is_empty());
    }

    #[test]
    fn count_mode() {
        let evs: Vec<_> = (0..3).map(|i| sample(i, 1, vec![0x204], 99)).collect();
        let opts = AggregateOptions {
            weight: SampleWeight::Count,
            ..Default::default()
        };
        assert_eq!(
            aggregate_samples_with(&evs, &map(), None, opts).total_weight(),
            3
        );
    }

    #[test]
    fn scope_skips_outside_samples() {
        let evs = vec![
            TraceEvent::new(
                0,
                TaskId::new(1, 1),
                0,
                Payload::Fork {
                    child_pid: 2,
                    child_tid: 2,
                },
            ),
            TraceEvent::new(
                0,
                TaskId::new(1, 1),
                0,
                Payload::Fork {
                    child_pid: 3,
                    child_tid: 3,
                },
            ),
            sample(1, 2, vec![0x100], 10),
            sample(2, 3, vec![0x100], 10),
            TraceEvent::new(3, TaskId::new(2, 2), 0, Payload::Exit { exit_code: 0 }),
            sample(4, 2, vec![0x100], 10),
        ];
        let tree = ProcessTree::from_events(&evs).unwrap();
        let scope = Scope::new(&tree, NodeKey::new(2, 2, 0)).unwrap();
        let p = aggregate_samples(&evs, &map(), Some(&scope));
        assert_eq!(p.total_weight(), 10);
        assert_eq!(
            p.warnings,
            vec![ProfileWarning::SamplesOutOfScope { count: 2 }]
        );
        assert_eq!(p.scope, Some(NodeKey::new(2, 2, 0)));
    }
}
