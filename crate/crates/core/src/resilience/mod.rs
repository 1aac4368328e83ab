//! Checkpoint policy, storage backends, the hot-spare buffer pool, restart
//! timelines and lost-time accounting.

mod storage;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::MONTH;
use crate::topology::NodeId;
use crate::workload::JobPhase;

pub use storage::{
    steady_state_index, step_spread, storage_step_series, StorageBackend, StorageKind, StorageParams, Variance,
    WriteOutcome,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResilienceError {
    #[error("{0} must be > 0")]
    NonPositiveInput(&'static str),
    #[error("object of {size} bytes exceeds cache capacity {capacity}")]
    CacheFull { size: f64, capacity: f64 },
    #[error("cannot checkpoint in phase {0:?}")]
    WrongPhase(JobPhase),
    #[error("buffer pool has {available} nodes, {needed} needed")]
    PoolExhausted { needed: usize, available: usize },
    #[error("invalid storage parameters: {0}")]
    InvalidStorage(String),
}

/// Optimal checkpoint interval `sqrt(2 * delta * mtbf)`.
pub fn young_interval(delta: f64, mtbf: f64) -> Result<f64, ResilienceError> {
    if !(delta > 0.0) {
        return Err(ResilienceError::NonPositiveInput("delta"));
    }
    if !(mtbf > 0.0) {
        return Err(ResilienceError::NonPositiveInput("mtbf"));
    }
    Ok((2.0 * delta * mtbf).sqrt())
}

/// Job MTBF from a per-node failure rate (events per node-month) under
/// independent exponential failures.
pub fn job_mtbf(rate_per_node_month: f64, nodes: usize) -> Result<f64, ResilienceError> {
    if !(rate_per_node_month > 0.0) || nodes == 0 {
        return Err(ResilienceError::NonPositiveInput("failure rate"));
    }
    Ok(MONTH / rate_per_node_month / nodes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntervalPolicy {
    Young,
    Fixed { interval: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointPolicy {
    pub interval: f64,
    pub delta: f64,
    pub mtbf_job: f64,
    pub young: bool,
}

impl CheckpointPolicy {
    pub fn new(policy: IntervalPolicy, delta: f64, mtbf_job: f64) -> Result<Self, ResilienceError> {
        let interval = match policy {
            IntervalPolicy::Young => young_interval(delta, mtbf_job)?,
            IntervalPolicy::Fixed { interval } if interval > 0.0 => interval,
            IntervalPolicy::Fixed { .. } => return Err(ResilienceError::NonPositiveInput("interval")),
        };
        Ok(CheckpointPolicy { interval, delta, mtbf_job, young: matches!(policy, IntervalPolicy::Young) })
    }

    /// Feeds back a measured checkpoint cost. A Young policy re-derives its
    /// interval when the measurement drifts more than 20% from the assumption.
    pub fn observe_delta(&mut self, measured: f64) -> bool {
        if !self.young || !(measured > 0.0) || (measured - self.delta).abs() <= 0.2 * self.delta {
            return false;
        }
        self.delta = measured;
        self.interval = (2.0 * measured * self.mtbf_job).sqrt();
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub job: usize,
    pub start: f64,
    pub delta: f64,
    pub steps: u64,
    pub flush_done_at: Option<f64>,
}

impl CheckpointRecord {
    pub const HEADER: &'static str = "job\tstart_s\tdelta_s\tsteps\tflush_done_s";

    pub fn row(&self) -> String {
        format!(
            "{}\t{:.3}\t{:.3}\t{}\t{}",
            self.job,
            self.start,
            self.delta,
            self.steps,
            self.flush_done_at.map_or("-".into(), |t| format!("{t:.3}"))
        )
    }
}

/// Writes a checkpoint; only a stepping job may checkpoint.
pub fn checkpoint(
    job: usize,
    phase: JobPhase,
    steps: u64,
    backend: &mut StorageBackend,
    state_size: f64,
    now: f64,
) -> Result<CheckpointRecord, ResilienceError> {
    if phase != JobPhase::Stepping {
        return Err(ResilienceError::WrongPhase(phase));
    }
    let w = backend.write(&format!("job{job}/ckpt{steps}"), state_size, now)?;
    Ok(CheckpointRecord { job, start: now, delta: w.blocking, steps, flush_done_at: w.flush_done_at })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferPool {
    pub target_fraction: f64,
    pub cluster_nodes: usize,
    available: BTreeSet<NodeId>,
}

impl BufferPool {
    pub fn new(target_fraction: f64, cluster_nodes: usize) -> Self {
        BufferPool { target_fraction, cluster_nodes, available: BTreeSet::new() }
    }

    pub fn target_size(&self) -> usize {
        (self.target_fraction * self.cluster_nodes as f64).round() as usize
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn below_target(&self) -> bool {
        self.available.len() < self.target_size()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.available.contains(&n)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.available.iter().copied()
    }

    pub fn add(&mut self, n: NodeId) {
        self.available.insert(n);
    }

    pub fn remove(&mut self, n: NodeId) -> bool {
        self.available.remove(&n)
    }

    /// Takes `k` spares, lowest `rank` first.
    pub fn take(&mut self, k: usize, rank: impl Fn(NodeId) -> usize) -> Result<Vec<NodeId>, ResilienceError> {
        if self.available.len() < k {
            return Err(ResilienceError::PoolExhausted { needed: k, available: self.available.len() });
        }
        let mut v: Vec<NodeId> = self.available.iter().copied().collect();
        v.sort_by_key(|&n| (rank(n), n));
        let out: Vec<NodeId> = v.into_iter().take(k).collect();
        for n in &out {
            self.available.remove(n);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct RestartTimeline {
    pub detect: f64,
    pub reschedule: f64,
    pub reload: f64,
    pub recompute: f64,
}

impl RestartTimeline {
    pub fn total(&self) -> f64 {
        self.detect + self.reschedule + self.reload + self.recompute
    }
}

/// Restart after a crash at `crash_time` whose last completed checkpoint
/// ended at `last_checkpoint`: replacements come from the pool, the state is
/// reloaded and the lost steps are replayed.
pub fn restart_job(
    crash_time: f64,
    last_checkpoint: f64,
    detect: f64,
    reschedule: f64,
    reload: f64,
    pool: &mut BufferPool,
    replacements: usize,
    rank: impl Fn(NodeId) -> usize,
) -> Result<(RestartTimeline, Vec<NodeId>), ResilienceError> {
    let nodes = pool.take(replacements, rank)?;
    let timeline = RestartTimeline { detect, reschedule, reload, recompute: (crash_time - last_checkpoint).max(0.0) };
    Ok((timeline, nodes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LostTime {
    pub productive: f64,
    pub checkpoint: f64,
    pub recompute: f64,
    pub detect_debug: f64,
    pub pend: f64,
}

impl LostTime {
    pub const LABELS: [&'static str; 5] = ["productive", "checkpoint", "recompute", "detect_debug", "pend"];

    pub fn total(&self) -> f64 {
        self.productive + self.checkpoint + self.recompute + self.detect_debug + self.pend
    }

    pub fn values(&self) -> [f64; 5] {
        [self.productive, self.checkpoint, self.recompute, self.detect_debug, self.pend]
    }

    pub fn add(&mut self, o: &LostTime) {
        self.productive += o.productive;
        self.checkpoint += o.checkpoint;
        self.recompute += o.recompute;
        self.detect_debug += o.detect_debug;
        self.pend += o.pend;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LostTimeReport {
    pub seconds: LostTime,
    pub fractions: LostTime,
    pub lost_fraction: f64,
    pub goodput: f64,
}

/// Normalizes a decomposition so the five fractions sum to one. A run with
/// no accounted time at all reports full goodput.
pub fn lost_time_report(t: &LostTime) -> LostTimeReport {
    let total = t.total();
    if total <= 0.0 {
        let f = LostTime { productive: 1.0, ..Default::default() };
        return LostTimeReport { seconds: *t, fractions: f, lost_fraction: 0.0, goodput: 1.0 };
    }
    let f = LostTime {
        productive: t.productive / total,
        checkpoint: t.checkpoint / total,
        recompute: t.recompute / total,
        detect_debug: t.detect_debug / total,
        pend: t.pend / total,
    };
    LostTimeReport { seconds: *t, fractions: f, lost_fraction: 1.0 - f.productive, goodput: f.productive }
}
