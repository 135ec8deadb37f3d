use serde::Serialize;

use crate::proctree::{NodeKey, ProcessTree, TreeError};

use super::profile::Profile;

/// Deficits up to this fraction of the lifetime are sampling quantization
/// and pass without a warning.
pub const ACCOUNTING_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Accounting {
    pub key: NodeKey,
    pub on_ns: u64,
    pub off_ns: u64,
    /// Summed lifetimes of the task and everything it spawned.
    pub lifetime_ns: u64,
    pub unattributed_ns: u64,
    /// How far on + off exceeded the lifetime before clamping.
    pub overrun_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Splits the task-time of `key`'s subtree into on-CPU, off-CPU and
/// unattributed parts. Both profiles are expected to be scoped to `key`.
pub fn walltime_accounting(
    on: &Profile,
    off: &Profile,
    tree: &ProcessTree,
    key: &NodeKey,
) -> Result<Accounting, TreeError> {
    let mut lifetime_ns = tree.lifetime_of(key)?.duration();
    for d in tree.descendants_of(key, None)? {
        lifetime_ns += tree.lifetime_of(&d)?.duration();
    }
    let on_ns = on.total_weight();
    let off_ns = off.total_weight();

    let balance = lifetime_ns as i128 - on_ns as i128 - off_ns as i128;
    let (unattributed_ns, overrun_ns) = if balance >= 0 {
        (balance as u64, 0)
    } else {
        (0, balance.unsigned_abs() as u64)
    };
    let warning = (overrun_ns as f64 > ACCOUNTING_TOLERANCE * lifetime_ns as f64).then(|| {
        format!("on-cpu plus off-cpu time exceeds the lifetime of {key} by {overrun_ns} ns")
    });

    Ok(Accounting {
        key: *key,
        on_ns,
        off_ns,
        lifetime_ns,
        unattributed_ns,
        overrun_ns,
        warning,
    })
}
