//! Execution strategy for the data-parallel folds.
//!
//! With the `parallel` feature (default) folds run on the rayon pool;
//! without it every strategy runs sequentially. Results are identical
//! either way since all merged weights are integers.

use std::collections::HashMap;
use std::hash::Hash;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// What a fold step does with one input item.
pub enum Step<K> {
    Add(K, u64),
    /// Counted in the skip tally.
    Skip,
    Ignore,
}

/// Items per rayon task; small inputs stay on one thread.
#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
const CHUNK: usize = 4096;

/// Sums weights per key over `items`, returning the map and the number of
/// skipped items.
pub fn fold_weights<T, K, F>(exec: Execution, items: &[T], step: F) -> (HashMap<K, u64>, u64)
where
    T: Sync,
    K: Eq + Hash + Send,
    F: Fn(&T) -> Step<K> + Sync,
{
    let fold_chunk = |chunk: &[T]| {
        let mut map: HashMap<K, u64> = HashMap::new();
        let mut skipped = 0u64;
        for item in chunk {
            match step(item) {
                Step::Add(k, w) => *map.entry(k).or_insert(0) += w,
                Step::Skip => skipped += 1,
                Step::Ignore => {}
            }
        }
        (map, skipped)
    };

    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel if items.len() > CHUNK => items
            .par_chunks(CHUNK)
            .map(fold_chunk)
            .reduce(|| (HashMap::new(), 0), merge),
        _ => fold_chunk(items),
    }
}

#[cfg(feature = "parallel")]
fn merge<K: Eq + Hash>(
    a: (HashMap<K, u64>, u64),
    b: (HashMap<K, u64>, u64),
) -> (HashMap<K, u64>, u64) {
    let ((mut big, s1), (small, s2)) = if a.0.len() >= b.0.len() {
        (a, b)
    } else {
        (b, a)
    };
    for (k, w) in small {
        *big.entry(k).or_insert(0) += w;
    }
    (big, s1 + s2)
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}
