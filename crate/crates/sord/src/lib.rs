//! Self-organising resource discovery (SORD) over a small-world overlay.
//!
//! The crate is split into three layers:
//!
//! * [`topology`] builds and characterises the static base overlay graph.
//! * [`protocol`] is the per-node state machine: queries, replies,
//!   advertisements and the per-resource caches. Handlers never perform I/O;
//!   they return explicit effect lists for an execution engine to apply.
//! * [`sim`] is a deterministic discrete-event engine that drives the
//!   protocol under a synthetic job load and scores placements against a
//!   centralised least-loaded oracle.

pub mod protocol;
pub mod sim;
pub mod topology;

/// Node identifier inside one overlay (dense, `0..n`).
pub type NodeId = usize;

/// Simulation time in ticks. One message hop takes exactly one tick.
pub type Tick = u64;
