//! Trace-driven simulation of speculative MoE decoding with expert offloading.
//!
//! The crate is split into four layers: [`trace`] (routing traces, fidelity
//! and entropy statistics, a synthetic generator), [`scheduler`] (lookahead
//! buffer, prefetch planning, eviction), [`perfmodel`] (cycle-time model and
//! draft-length governor) and [`sim`] (the cycle-level replay engine).

pub mod perfmodel;
pub mod scheduler;
pub mod sim;
pub mod trace;

pub use perfmodel::{AcceptanceModel, GovernorConfig, HardwareProfile};
pub use scheduler::{CacheState, CapacityMode, ExpertLookaheadBuffer, PhaseBoundaries, Policy};
pub use sim::{
    run_simulation, run_simulation_with_plans, CyclePlans, KPolicy, SimConfig, SimReport,
};
pub use trace::{ExpertKey, ModelShape, Trace};
