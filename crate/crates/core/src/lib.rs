//! Profiling pipelines (on-CPU sampling, off-CPU context-switch pairing,
//! process lifecycle tracing) over a replayable trace format, and a
//! benchmark harness for measuring instrumentation overhead.

pub mod bench;
pub mod live;
pub mod par;
pub mod proctree;
pub mod profiles;
pub mod trace;
