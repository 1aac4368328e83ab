//! Discrete-event simulator for GPU training clusters: fabric topology,
//! collectives, failures, checkpointing, monitoring and power.

pub mod simcore;
pub mod topology;
pub mod network;
pub mod collectives;
pub mod workload;
pub mod faults;
pub mod power;
pub mod resilience;
pub mod monitoring;
pub mod scheduler;
pub mod scenario;
