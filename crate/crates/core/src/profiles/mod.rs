//! On-CPU and off-CPU activity profiles, symbolization and folded-stack
//! export.

mod accounting;
mod offcpu;
mod oncpu;
mod profile;
mod symbols;

pub use accounting::{walltime_accounting, Accounting, ACCOUNTING_TOLERANCE};
pub use offcpu::{
    build_offcpu_profile, build_offcpu_profile_with, pair_context_switches, OffCpuInterval,
    SwitchPairing, NO_STACK_FRAME,
};
pub use oncpu::{
    aggregate_samples, aggregate_samples_with, symbolize_stack, AggregateOptions, SampleWeight,
};
pub use profile::{
    parse_folded, to_folded, FoldedError, Profile, ProfileKind, ProfileWarning, Stack,
};
pub use symbols::{parse_symbol_map, symbolize, Symbol, SymbolMap, SymbolMapError};
