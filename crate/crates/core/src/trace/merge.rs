use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use super::TraceEvent;

/// K-way merge of individually time-ordered streams.
///
/// Output is sorted by `(ts, cpu, stream index, position)`, so equal keys
/// keep their origin order and the result is deterministic.
pub fn merge_streams(streams: Vec<Vec<TraceEvent>>) -> Vec<TraceEvent> {
    let total = streams.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut iters: Vec<_> = streams
        .into_iter()
        .map(|mut s| {
            // A stream may mix cpus; equal-ts runs must be in cpu order
            // for the heap key to describe the whole stream.
            if !s.is_sorted_by_key(|e| (e.ts, e.cpu)) {
                s.sort_by_key(|e| (e.ts, e.cpu));
            }
            s.into_iter()
        })
        .collect();

    // (ts, cpu, stream) is unique per head since each stream contributes
    // one head at a time.
    let mut heap = BinaryHeap::with_capacity(iters.len());
    let mut heads: Vec<Option<TraceEvent>> = Vec::with_capacity(iters.len());
    for (idx, it) in iters.iter_mut().enumerate() {
        let head = it.next();
        if let Some(ev) = &head {
            heap.push(Reverse((ev.ts, ev.cpu, idx)));
        }
        heads.push(head);
    }

    while let Some(Reverse((_, _, idx))) = heap.pop() {
        let ev = heads[idx].take().expect("heap entry has a head");
        debug_assert!(
            out.last().is_none_or(|p: &TraceEvent| p.ts <= ev.ts),
            "input stream {idx} is not time-ordered"
        );
        out.push(ev);
        if let Some(next) = iters[idx].next() {
            heap.push(Reverse((next.ts, next.cpu, idx)));
            heads[idx] = Some(next);
        }
    }
    out
}

/// Splits a parsed file into per-cpu streams (ascending cpu), each in
/// file order.
pub fn split_by_cpu(events: Vec<TraceEvent>) -> Vec<Vec<TraceEvent>> {
    let mut per_cpu: BTreeMap<u32, Vec<TraceEvent>> = BTreeMap::new();
    for ev in events {
        per_cpu.entry(ev.cpu).or_default().push(ev);
    }
    per_cpu.into_values().collect()
}

/// Puts a parsed replay file (monotone per cpu) into global analysis order.
pub fn order_events(events: Vec<TraceEvent>) -> Vec<TraceEvent> {
    merge_streams(split_by_cpu(events))
}
