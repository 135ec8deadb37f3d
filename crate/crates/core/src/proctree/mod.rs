//! Process/thread lifetime forest built from fork, exec and exit events.
//!
//! Linux reuses tids, so every node is keyed by `(pid, tid, generation)`
//! where `generation` counts earlier nodes that carried the same tid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::trace::{EventKind, Payload, TaskId, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub pid: u64,
    pub tid: u64,
    pub generation: u32,
}

impl NodeKey {
    pub fn new(pid: u64, tid: u64, generation: u32) -> Self {
        NodeKey {
            pid,
            tid,
            generation,
        }
    }

    pub fn task(&self) -> TaskId {
        TaskId::new(self.pid, self.tid)
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.pid, self.tid, self.generation)
    }
}

impl Serialize for NodeKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid node key `{0}`, expected PID:TID or PID:TID:GEN")]
pub struct KeyParseError(String);

/// A key as written on the command line. The generation is optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub task: TaskId,
    pub generation: Option<u32>,
}

impl FromStr for KeySpec {
    type Err = KeyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || KeyParseError(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<u64>().ok().filter(|v| *v > 0);
        match parts.as_slice() {
            [pid, tid] => Ok(KeySpec {
                task: TaskId::new(num(pid).ok_or_else(err)?, num(tid).ok_or_else(err)?),
                generation: None,
            }),
            [pid, tid, generation] => Ok(KeySpec {
                task: TaskId::new(num(pid).ok_or_else(err)?, num(tid).ok_or_else(err)?),
                generation: Some(generation.parse().map_err(|_| err())?),
            }),
            _ => Err(err()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageChange {
    pub ts: u64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskNode {
    pub pid: u64,
    pub tid: u64,
    pub generation: u32,
    pub parent: Option<NodeKey>,
    pub spawn_ts: u64,
    pub exit_ts: Option<u64>,
    pub exit_code: Option<i32>,
    pub images: Vec<ImageChange>,
    pub children: Vec<NodeKey>,
    /// Created for a task first seen mid-trace rather than at its fork.
    pub synthesized: bool,
}

impl TaskNode {
    pub fn key(&self) -> NodeKey {
        NodeKey::new(self.pid, self.tid, self.generation)
    }

    /// Whether the task runs at instant `ts`. Un-exited tasks stay alive
    /// past the end of the trace.
    pub fn alive_at(&self, ts: u64) -> bool {
        ts >= self.spawn_ts && self.exit_ts.is_none_or(|end| ts < end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Lifetime {
    pub start: u64,
    pub end: u64,
    /// The task had not exited by the end of the trace.
    pub truncated: bool,
}

impl Lifetime {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("exit of tid {0} which has no live task")]
    ExitWithoutSpawn(u64),
    #[error("fork of tid {0} which is already alive")]
    DuplicateLiveTid(u64),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{0:?} is not a lifecycle event")]
    NotLifecycle(EventKind),
    #[error("event at {ts} precedes already applied event at {last}")]
    TimeRegression { ts: u64, last: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct ProcessTree {
    roots: Vec<NodeKey>,
    nodes: BTreeMap<NodeKey, TaskNode>,
    live: HashMap<u64, NodeKey>,
    generations: HashMap<u64, u32>,
    trace_end: u64,
    last_applied: u64,
}

impl ProcessTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the tree from a time-ordered trace. Non-lifecycle events
    /// only extend the trace end.
    pub fn from_events(events: &[TraceEvent]) -> Result<Self, TreeError> {
        let mut tree = ProcessTree::new();
        for ev in events {
            if ev.kind().is_lifecycle() {
                tree.apply_lifecycle_event(ev)?;
            } else {
                tree.observe(ev.ts);
            }
        }
        Ok(tree)
    }

    /// Records that the trace reaches at least `ts`.
    pub fn observe(&mut self, ts: u64) {
        self.trace_end = self.trace_end.max(ts);
    }

    pub fn trace_end(&self) -> u64 {
        self.trace_end
    }

    pub fn roots(&self) -> &[NodeKey] {
        &self.roots
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TaskNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, key: &NodeKey) -> Result<&TaskNode, TreeError> {
        self.nodes
            .get(key)
            .ok_or_else(|| TreeError::UnknownNode(key.to_string()))
    }

    /// The node currently alive for `tid`, if any.
    pub fn live_node(&self, tid: u64) -> Option<NodeKey> {
        self.live.get(&tid).copied()
    }

    /// Resolves a command-line key; without a generation the earliest
    /// node of that task is chosen.
    pub fn resolve(&self, spec: KeySpec) -> Result<NodeKey, TreeError> {
        match spec.generation {
            Some(g) => {
                let key = NodeKey::new(spec.task.pid, spec.task.tid, g);
                self.node(&key).map(TaskNode::key)
            }
            None => self
                .nodes
                .keys()
                .find(|k| k.task() == spec.task)
                .copied()
                .ok_or_else(|| TreeError::UnknownNode(spec.task.to_string())),
        }
    }

    fn next_key(&mut self, task: TaskId) -> NodeKey {
        let gen = self.generations.entry(task.tid).or_insert(0);
        let key = NodeKey::new(task.pid, task.tid, *gen);
        *gen += 1;
        key
    }

    fn insert_node(
        &mut self,
        task: TaskId,
        parent: Option<NodeKey>,
        ts: u64,
        synthesized: bool,
    ) -> NodeKey {
        let key = self.next_key(task);
        self.nodes.insert(
            key,
            TaskNode {
                pid: task.pid,
                tid: task.tid,
                generation: key.generation,
                parent,
                spawn_ts: ts,
                exit_ts: None,
                exit_code: None,
                images: Vec::new(),
                children: Vec::new(),
                synthesized,
            },
        );
        match parent {
            Some(p) => self
                .nodes
                .get_mut(&p)
                .expect("parent exists")
                .children
                .push(key),
            None => self.roots.push(key),
        }
        self.live.insert(task.tid, key);
        key
    }

    /// Applies one fork, exec or exit event. On error the tree is left
    /// unchanged.
    pub fn apply_lifecycle_event(&mut self, ev: &TraceEvent) -> Result<(), TreeError> {
        if ev.ts < self.last_applied {
            return Err(TreeError::TimeRegression {
                ts: ev.ts,
                last: self.last_applied,
            });
        }
        match &ev.payload {
            Payload::Fork {
                child_pid,
                child_tid,
            } => {
                if self.live.contains_key(child_tid) || *child_tid == ev.tid {
                    return Err(TreeError::DuplicateLiveTid(*child_tid));
                }
                let parent = match self.live.get(&ev.tid) {
                    Some(k) => *k,
                    None => self.insert_node(ev.task(), None, ev.ts, true),
                };
                self.insert_node(
                    TaskId::new(*child_pid, *child_tid),
                    Some(parent),
                    ev.ts,
                    false,
                );
            }
            Payload::Exec { image } => {
                let key = match self.live.get(&ev.tid) {
                    Some(k) => *k,
                    None => self.insert_node(ev.task(), None, ev.ts, true),
                };
                self.nodes
                    .get_mut(&key)
                    .expect("live node exists")
                    .images
                    .push(ImageChange {
                        ts: ev.ts,
                        image: image.clone(),
                    });
            }
            Payload::Exit { exit_code } => {
                let key = self
                    .live
                    .remove(&ev.tid)
                    .ok_or(TreeError::ExitWithoutSpawn(ev.tid))?;
                let node = self.nodes.get_mut(&key).expect("live node exists");
                node.exit_ts = Some(ev.ts);
                node.exit_code = Some(*exit_code);
            }
            _ => return Err(TreeError::NotLifecycle(ev.kind())),
        }
        self.last_applied = ev.ts;
        self.observe(ev.ts);
        Ok(())
    }

    /// Transitive children of `root` (excluding `root`); with `at`, only
    /// those alive at that instant.
    pub fn descendants_of(
        &self,
        root: &NodeKey,
        at: Option<u64>,
    ) -> Result<BTreeSet<NodeKey>, TreeError> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<NodeKey> = self.node(root)?.children.clone();
        while let Some(key) = stack.pop() {
            let node = &self.nodes[&key];
            stack.extend(node.children.iter().copied());
            if at.is_none_or(|t| node.alive_at(t)) {
                out.insert(key);
            }
        }
        Ok(out)
    }

    /// Half-open `[spawn, exit)`; tasks still alive are cut at trace end.
    pub fn lifetime_of(&self, key: &NodeKey) -> Result<Lifetime, TreeError> {
        let node = self.node(key)?;
        Ok(match node.exit_ts {
            Some(end) => Lifetime {
                start: node.spawn_ts,
                end,
                truncated: false,
            },
            None => Lifetime {
                start: node.spawn_ts,
                end: self.trace_end.max(node.spawn_ts),
                truncated: true,
            },
        })
    }

    /// Checks parent/child links describe a forest: every non-root node has
    /// exactly one parent that lists it, and no parent chain loops.
    pub fn verify_forest(&self) -> bool {
        let mut listed: HashMap<NodeKey, usize> = HashMap::new();
        for node in self.nodes.values() {
            for c in &node.children {
                *listed.entry(*c).or_default() += 1;
            }
        }
        for node in self.nodes.values() {
            let key = node.key();
            match node.parent {
                None => {
                    if listed.contains_key(&key) || !self.roots.contains(&key) {
                        return false;
                    }
                }
                Some(p) => {
                    if listed.get(&key) != Some(&1) || !self.nodes[&p].children.contains(&key) {
                        return false;
                    }
                }
            }
            let mut cur = node.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if p == key || steps > self.nodes.len() {
                    return false;
                }
                cur = self.nodes[&p].parent;
            }
        }
        true
    }

    /// JSON export with node keys rendered as `pid:tid:gen`, sorted.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            roots: &'a [NodeKey],
            nodes: BTreeMap<String, &'a TaskNode>,
        }
        let nodes = self.nodes.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut s = serde_json::to_string_pretty(&Export {
            roots: &self.roots,
            nodes,
        })
        .expect("tree serializes");
        s.push('\n');
        s
    }
}

/// The set of tasks a profile is restricted to: a root plus everything it
/// spawned, each with its own lifetime.
#[derive(Debug, Clone)]
pub struct Scope {
    root: NodeKey,
    members: HashMap<TaskId, Vec<(u64, Option<u64>)>>,
    keys: BTreeSet<NodeKey>,
}

impl Scope {
    pub fn new(tree: &ProcessTree, root: NodeKey) -> Result<Self, TreeError> {
        let mut keys = tree.descendants_of(&root, None)?;
        keys.insert(root);
        let mut members: HashMap<TaskId, Vec<(u64, Option<u64>)>> = HashMap::new();
        for key in &keys {
            let n = &tree.nodes[key];
            members
                .entry(key.task())
                .or_default()
                .push((n.spawn_ts, n.exit_ts));
        }
        Ok(Scope {
            root,
            members,
            keys,
        })
    }

    pub fn root(&self) -> NodeKey {
        self.root
    }

    pub fn keys(&self) -> &BTreeSet<NodeKey> {
        &self.keys
    }

    /// Whether `task` is a scope member alive at `ts`.
    pub fn contains(&self, task: TaskId, ts: u64) -> bool {
        self.members.get(&task).is_some_and(|lives| {
            lives
                .iter()
                .any(|&(start, end)| ts >= start && end.is_none_or(|e| ts < e))
        })
    }

    /// Like [`Scope::contains`] but ignoring pid, for events that only
    /// carry a tid.
    pub fn contains_tid(&self, tid: u64, ts: u64) -> bool {
        self.members.iter().any(|(task, lives)| {
            task.tid == tid
                && lives
                    .iter()
                    .any(|&(start, end)| ts >= start && end.is_none_or(|e| ts < e))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fork(ts: u64, parent: (u64, u64), child: (u64, u64)) -> TraceEvent {
        TraceEvent::new(
            ts,
            TaskId::new(parent.0, parent.1),
            0,
            Payload::Fork {
                child_pid: child.0,
                child_tid: child.1,
            },
        )
    }

    fn exit(ts: u64, task: (u64, u64), code: i32) -> TraceEvent {
        TraceEvent::new(
            ts,
            TaskId::new(task.0, task.1),
            0,
            Payload::Exit { exit_code: code },
        )
    }

    #[test]
    fn fork_from_unknown_parent_then_exit() {
        let mut tree = ProcessTree::new();
        tree.apply_lifecycle_event(&fork(0, (1, 1), (2, 2)))
            .unwrap();
        tree.apply_lifecycle_event(&exit(5, (2, 2), 0)).unwrap();

        assert_eq!(tree.roots(), &[NodeKey::new(1, 1, 0)]);
        let root = tree.node(&NodeKey::new(1, 1, 0)).unwrap();
        assert!(root.synthesized);
        assert_eq!(root.children, vec![NodeKey::new(2, 2, 0)]);

        let child = NodeKey::new(2, 2, 0);
        assert_eq!(
            tree.lifetime_of(&child).unwrap(),
            Lifetime {
                start: 0,
                end: 5,
                truncated: false
            }
        );
        assert_eq!(tree.node(&child).unwrap().exit_code, Some(0));
        assert_eq!(tree.len(), 2);
    }

    #[test]
    fn exit_on_empty_tree() {
        let mut tree = ProcessTree::new();
        assert_eq!(
            tree.apply_lifecycle_event(&exit(3, (9, 9), 0)),
            Err(TreeError::ExitWithoutSpawn(9))
        );
        assert!(tree.is_empty());
    }

    #[test]
    fn fork_collides_with_live_tid() {
        let mut tree = ProcessTree::new();
        tree.apply_lifecycle_event(&fork(0, (1, 1), (2, 2)))
            .unwrap();
        let before = tree.len();
        assert_eq!(
            tree.apply_lifecycle_event(&fork(1, (1, 1), (2, 2))),
            Err(TreeError::DuplicateLiveTid(2))
        );
        assert_eq!(tree.len(), before);
        assert_eq!(
            tree.apply_lifecycle_event(&fork(2, (7, 7), (7, 7))),
            Err(TreeError::DuplicateLiveTid(7))
        );
    }

    #[test]
    fn tid_reuse_bumps_generation() {
        let mut tree = ProcessTree::new();
        tree.apply_lifecycle_event(&fork(0, (1, 1), (2, 2)))
            .unwrap();
        tree.apply_lifecycle_event(&exit(1, (2, 2), 0)).unwrap();
        tree.apply_lifecycle_event(&fork(2, (1, 1), (2, 2)))
            .unwrap();
        assert_eq!(tree.live_node(2), Some(NodeKey::new(2, 2, 1)));
        assert_eq!(tree.node(&NodeKey::new(1, 1, 0)).unwrap().children.len(), 2);
    }

    #[test]
    fn exec_appends_image_without_new_node() {
        let mut tree = ProcessTree::new();
        tree.apply_lifecycle_event(&fork(0, (1, 1), (2, 2)))
            .unwrap();
        let exec = TraceEvent::new(
            3,
            TaskId::new(2, 2),
            0,
            Payload::Exec {
                image: "/bin/true".into(),
            },
        );
        tree.apply_lifecycle_event(&exec).unwrap();
        assert_eq!(tree.len(), 2);
        assert_eq!(
            tree.node(&NodeKey::new(2, 2, 0)).unwrap().images,
            vec![ImageChange {
                ts: 3,
                image: "/bin/true".into()
            }]
        );
    }

    #[test]
    fn rejects_time_regression_and_non_lifecycle() {
        let mut tree = ProcessTree::new();
        tree.apply_lifecycle_event(&fork(5, (1, 1), (2, 2)))
            .unwrap();
        assert!(matches!(
            tree.apply_lifecycle_event(&exit(4, (2, 2), 0)),
            Err(TreeError::TimeRegression { ts: 4, last: 5 })
        ));
        let sw = TraceEvent::new(6, TaskId::new(2, 2), 0, Payload::SwitchIn);
        assert_eq!(
            tree.apply_lifecycle_event(&sw),
            Err(TreeError::NotLifecycle(EventKind::SchedSwitchIn))
        );
    }

    #[test]
    fn descendants_of_chain_and_leaf() {
        let tree =
            ProcessTree::from_events(&[fork(0, (1, 1), (2, 2)), fork(1, (2, 2), (3, 3))]).unwrap();
        let a = NodeKey::new(1, 1, 0);
        let b = NodeKey::new(2, 2, 0);
        let c = NodeKey::new(3, 3, 0);
        assert_eq!(
            tree.descendants_of(&a, None).unwrap(),
            BTreeSet::from([b, c])
        );
        assert!(tree.descendants_of(&c, None).unwrap().is_empty());
        assert!(matches!(
            tree.descendants_of(&NodeKey::new(9, 9, 0), None),
            Err(TreeError::UnknownNode(_))
        ));
    }

    #[test]
    fn descendants_at_instant() {
        let tree = ProcessTree::from_events(&[
            fork(0, (1, 1), (2, 2)),
            fork(1, (2, 2), (3, 3)),
            exit(4, (2, 2), 0),
        ])
        .unwrap();
        let a = NodeKey::new(1, 1, 0);
        assert_eq!(tree.descendants_of(&a, Some(2)).unwrap().len(), 2);
        assert_eq!(
            tree.descendants_of(&a, Some(4)).unwrap(),
            BTreeSet::from([NodeKey::new(3, 3, 0)])
        );
    }

    #[test]
    fn unexited_lifetime_is_truncated_at_trace_end() {
        let mut tree = ProcessTree::from_events(&[fork(2, (1, 1), (5, 5))]).unwrap();
        tree.observe(10);
        assert_eq!(
            tree.lifetime_of(&NodeKey::new(5, 5, 0)).unwrap(),
            Lifetime {
                start: 2,
                end: 10,
                truncated: true
            }
        );
    }

    #[test]
    fn key_spec_parsing() {
        assert_eq!(
            "12:13".parse::<KeySpec>().unwrap(),
            KeySpec {
                task: TaskId::new(12, 13),
                generation: None
            }
        );
        assert_eq!("1:2:3".parse::<KeySpec>().unwrap().generation, Some(3));
        assert!("1".parse::<KeySpec>().is_err());
        assert!("0:1".parse::<KeySpec>().is_err());
        assert!("a:b".parse::<KeySpec>().is_err());
    }

    #[test]
    fn export_uses_sorted_string_keys() {
        let tree = ProcessTree::from_events(&[fork(0, (10, 10), (2, 2))]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&tree.to_json()).unwrap();
        assert_eq!(v["roots"], serde_json::json!(["10:10:0"]));
        let keys: Vec<_> = v["nodes"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["10:10:0", "2:2:0"]);
        assert_eq!(v["nodes"]["2:2:0"]["parent"], "10:10:0");
    }
}
