mod common;

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use tracehound::proctree::{NodeKey, ProcessTree, Scope};
use tracehound::trace::TaskId;

use common::{lifecycle_stream, tree_corpus, tree_oracle, OracleNode};

fn key_of(n: &OracleNode) -> NodeKey {
    NodeKey::new(n.pid, n.tid, n.generation)
}

fn dfs(tree: &ProcessTree, key: &NodeKey, out: &mut BTreeSet<NodeKey>) {
    for c in &tree.node(key).unwrap().children {
        out.insert(*c);
        dfs(tree, c, out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn tree_matches_naive_bookkeeping(events in tree_corpus()) {
        let oracle = tree_oracle(&events);
        let tree = ProcessTree::from_events(&events);
        match (oracle, tree) {
            (Err(_), Err(_)) => {}
            (Ok(nodes), Ok(tree)) => {
                prop_assert_eq!(tree.len(), nodes.len());
                for n in &nodes {
                    let got = tree.node(&key_of(n)).unwrap();
                    prop_assert_eq!(got.parent, n.parent.map(|p| key_of(&nodes[p])));
                    prop_assert_eq!(got.spawn_ts, n.spawn);
                    prop_assert_eq!(got.exit_ts, n.exit);
                    prop_assert_eq!(got.exit_code, n.code);
                    prop_assert_eq!(got.synthesized, n.synthesized);
                    let images: Vec<(u64, String)> = got.images.iter().map(|i| (i.ts, i.image.clone())).collect();
                    prop_assert_eq!(&images, &n.images);
                    let children: Vec<NodeKey> = nodes
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| c.parent.is_some_and(|p| key_of(&nodes[p]) == key_of(n)))
                        .map(|(_, c)| key_of(c))
                        .collect();
                    prop_assert_eq!(&got.children, &children);
                }
                let roots: Vec<NodeKey> = nodes.iter().filter(|n| n.parent.is_none()).map(key_of).collect();
                prop_assert_eq!(tree.roots(), &roots[..]);
            }
            (o, t) => prop_assert!(false, "oracle {:?} vs tree {:?}", o.map(|n| n.len()), t.map(|t| t.len())),
        }
    }

    #[test]
    fn valid_streams_give_forests_with_disjoint_lifetimes(events in lifecycle_stream(120, 6, true)) {
        let tree = ProcessTree::from_events(&events).unwrap();
        prop_assert!(tree.verify_forest());

        let mut by_tid: HashMap<u64, Vec<NodeKey>> = HashMap::new();
        for n in tree.nodes() {
            by_tid.entry(n.tid).or_default().push(n.key());
        }
        for keys in by_tid.values_mut() {
            keys.sort_by_key(|k| k.generation);
            for pair in keys.windows(2) {
                let a = tree.lifetime_of(&pair[0]).unwrap();
                let b = tree.lifetime_of(&pair[1]).unwrap();
                prop_assert!(!a.truncated);
                prop_assert!(a.end <= b.start, "{:?} overlaps {:?}", a, b);
            }
            for k in keys.iter() {
                let lt = tree.lifetime_of(k).unwrap();
                prop_assert!(lt.start <= lt.end);
            }
        }
    }

    #[test]
    fn descendants_match_recursive_walk(events in lifecycle_stream(100, 6, true), at_pick in any::<prop::sample::Index>()) {
        let tree = ProcessTree::from_events(&events).unwrap();
        let at = events.get(at_pick.index(events.len().max(1))).map(|e| e.ts);
        for n in tree.nodes() {
            let key = n.key();
            let mut all = BTreeSet::new();
            dfs(&tree, &key, &mut all);
            prop_assert_eq!(&tree.descendants_of(&key, None).unwrap(), &all);
            if let Some(t) = at {
                let alive: BTreeSet<NodeKey> = all.iter().copied().filter(|k| tree.node(k).unwrap().alive_at(t)).collect();
                prop_assert_eq!(tree.descendants_of(&key, Some(t)).unwrap(), alive);
            }
        }
    }

    #[test]
    fn scope_membership_follows_member_lifetimes(events in lifecycle_stream(60, 5, true), probe_ts in 0u64..200) {
        let tree = ProcessTree::from_events(&events).unwrap();
        for root in tree.roots() {
            let scope = Scope::new(&tree, *root).unwrap();
            let mut members = tree.descendants_of(root, None).unwrap();
            members.insert(*root);
            prop_assert_eq!(scope.keys(), &members);
            for tid in 1..=5u64 {
                for pid in 1..=5u64 {
                    let expected = members.iter().any(|k| {
                        k.pid == pid && k.tid == tid && tree.node(k).unwrap().alive_at(probe_ts)
                    });
                    prop_assert_eq!(scope.contains(TaskId::new(pid, tid), probe_ts), expected);
                }
            }
        }
    }
}
