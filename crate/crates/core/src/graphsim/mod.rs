//! Discrete-event simulator of a multi-tier microservice deployment.
//!
//! Each tier is a bounded FCFS station with one server per allocated core;
//! service demand is exponential with rate `base_rate * rel_freq^beta` per
//! core. A request that finishes at a tier whose downstream queue is full
//! keeps its server blocked until a slot frees up. Queues survive interval
//! boundaries, so under-provisioning shows up in latency only as backlog
//! accumulates.

mod cluster;
mod combinatorics;
mod spec;
mod stats;

pub use cluster::{build_cluster, Arrival, ClusterState, StallFault, Totals};
pub use combinatorics::{action_space_size, binomial};
pub use spec::{
    service_rate, uniform_freq_levels, Allocation, Edge, GraphSpec, TierSpec, Topology, COMPOSE, INDEX_STORE,
    READ_HOME, READ_USER, STALL_DIRTY_SPAN,
};
pub use stats::{IntervalStats, StatsCsvWriter, TierStats};
