//! Scheduling core for multi-DNN workloads on tile-spatial multi-engine
//! accelerators.
//!
//! The crate is organised around the compile-time pipeline:
//!
//! 1. [`graph`] — task DAGs of DNN layers and boolean CSR matrices.
//! 2. [`tile`] — per-tile latency model and the global timeslot.
//! 3. [`lcs`] — pipeline construction and Layer Concatenate/Split balancing.
//! 4. [`platform`] — engine mesh geometry, XY routing, link bandwidth.
//! 5. [`sched`] — sparse compute/communication schedules and the
//!    constraint validator.
//! 6. [`mcu`] — MCTS-accelerated Ullmann subgraph isomorphism over CSR.
//! 7. [`scheduler`] — the preemptive scheduler: preemptible-DAG
//!    construction, victim selection by latency slack, plan scoring,
//!    schedule commits.
//! 8. [`sim`] — timeslot replay, SLA/LBT/energy metrics, reference
//!    baselines.

pub mod csr;
pub mod graph;
pub mod lcs;
pub mod mcu;
pub mod platform;
pub mod sched;
pub mod scheduler;
pub mod seed;
pub mod sim;
pub mod tile;
