//! Gang scheduler: node states, a priority FIFO queue, restart refills from
//! the buffer pool and proactive drains.

use serde::Serialize;
use thiserror::Error;

use crate::resilience::{BufferPool, ResilienceError};
use crate::topology::{ClusterTopology, NodeId};
use crate::workload::{plan_parallelism, stages_of, JobSpec, Placement, WorkloadError};

pub type JobId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} is not running")]
    NotRunning(JobId),
    #[error(transparent)]
    Pool(#[from] ResilienceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Open,
    Closed,
    Braked,
    Down,
    ReservedBuffer,
}

impl NodeState {
    pub fn label(self) -> &'static str {
        match self {
            NodeState::Open => "open",
            NodeState::Closed => "closed",
            NodeState::Braked => "braked",
            NodeState::Down => "down",
            NodeState::ReservedBuffer => "reserved_buffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeStatus {
    pub node: NodeId,
    pub state: NodeState,
    pub reason: String,
    pub job: Option<JobId>,
    /// Closed by an alert; leaves its job at the next restart boundary.
    pub drain_pending: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusChange {
    pub time: f64,
    pub node: NodeId,
    pub from: NodeState,
    pub to: NodeState,
    pub reason: String,
}

impl StatusChange {
    pub const HEADER: &'static str = "time_s\tnode\tfrom\tto\treason";

    pub fn row(&self) -> String {
        format!("{:.3}\t{}\t{}\t{}\t{}", self.time, self.node, self.from.label(), self.to.label(), self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Pending,
    Running,
    /// Waiting for replacement nodes.
    Restarting,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobEntry {
    pub id: JobId,
    pub spec: JobSpec,
    pub priority: i32,
    pub lifecycle: Lifecycle,
    pub placement: Option<Placement>,
    /// Placement slots lost to failures or drains, with the node that held them.
    pub holes: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct QueueCounts {
    pub submitted: usize,
    pub pending: usize,
    pub running: usize,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    status: Vec<NodeStatus>,
    pub pool: BufferPool,
    jobs: Vec<JobEntry>,
    log: Vec<StatusChange>,
    gpus_per_node: u32,
}

impl Scheduler {
    pub fn new(nodes: usize, gpus_per_node: u32, pool_fraction: f64) -> Self {
        Scheduler {
            status: (0..nodes)
                .map(|node| NodeStatus { node, state: NodeState::Open, reason: String::new(), job: None, drain_pending: false })
                .collect(),
            pool: BufferPool::new(pool_fraction, nodes),
            jobs: Vec::new(),
            log: Vec::new(),
            gpus_per_node,
        }
    }

    pub fn status(&self, n: NodeId) -> &NodeStatus {
        &self.status[n]
    }

    pub fn statuses(&self) -> &[NodeStatus] {
        &self.status
    }

    pub fn job(&self, id: JobId) -> Option<&JobEntry> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> &[JobEntry] {
        &self.jobs
    }

    pub fn log(&self) -> &[StatusChange] {
        &self.log
    }

    fn set_state(&mut self, n: NodeId, to: NodeState, reason: &str, t: f64) {
        let s = &mut self.status[n];
        if s.state == to {
            return;
        }
        self.log.push(StatusChange { time: t, node: n, from: s.state, to, reason: reason.to_string() });
        if s.state == NodeState::ReservedBuffer {
            self.pool.remove(n);
        }
        if to == NodeState::ReservedBuffer {
            self.pool.add(n);
        }
        s.state = to;
        s.reason = reason.to_string();
    }

    fn idle_open(&self) -> Vec<NodeId> {
        self.status.iter().filter(|s| s.state == NodeState::Open && s.job.is_none()).map(|s| s.node).collect()
    }

    /// Queues a job. `gpus`, when given, must match `tp * pp * dp`.
    pub fn submit(
        &mut self,
        spec: JobSpec,
        gpus: Option<usize>,
        priority: i32,
        topo: &ClusterTopology,
        t: f64,
    ) -> Result<JobId, SchedulerError> {
        spec.validate(self.gpus_per_node).map_err(|e| SchedulerError::InvalidSpec(e.to_string()))?;
        if let Some(g) = gpus {
            if g != spec.gpu_count() {
                return Err(SchedulerError::InvalidSpec(format!(
                    "requested {g} GPUs but tp*pp*dp = {}",
                    spec.gpu_count()
                )));
            }
        }
        let id = self.jobs.len();
        self.jobs.push(JobEntry { id, spec, priority, lifecycle: Lifecycle::Pending, placement: None, holes: Vec::new() });
        self.schedule(topo, t);
        Ok(id)
    }

    /// Places pending jobs in priority-then-FIFO order; the first job that
    /// does not fit blocks the rest. Returns the jobs started.
    pub fn schedule(&mut self, topo: &ClusterTopology, _t: f64) -> Vec<JobId> {
        let mut order: Vec<JobId> =
            self.jobs.iter().filter(|j| j.lifecycle == Lifecycle::Pending).map(|j| j.id).collect();
        order.sort_by_key(|&id| (-self.jobs[id].priority, id));
        let mut started = Vec::new();
        for id in order {
            let avail = self.idle_open();
            match plan_parallelism(&self.jobs[id].spec, topo, &avail) {
                Ok(p) => {
                    for &n in &p.nodes {
                        self.status[n].job = Some(id);
                    }
                    self.jobs[id].placement = Some(p);
                    self.jobs[id].lifecycle = Lifecycle::Running;
                    started.push(id);
                }
                Err(WorkloadError::InsufficientNodes { .. }) => break,
                Err(_) => {
                    self.jobs[id].lifecycle = Lifecycle::Failed;
                }
            }
        }
        started
    }

    /// Moves idle open nodes into the buffer pool until it reaches target.
    pub fn replenish_pool(&mut self, t: f64) {
        let mut idle = self.idle_open();
        idle.reverse();
        while self.pool.below_target() {
            let Some(n) = idle.pop() else { break };
            self.set_state(n, NodeState::ReservedBuffer, "pool replenish", t);
        }
    }

    fn vacate(&mut self, job: JobId, n: NodeId) {
        self.status[n].job = None;
        self.status[n].drain_pending = false;
        let j = &mut self.jobs[job];
        if let Some(p) = &j.placement {
            if let Some(i) = p.nodes.iter().position(|&m| m == n) {
                if !j.holes.iter().any(|&(k, _)| k == i) {
                    j.holes.push((i, n));
                }
            }
        }
        if j.lifecycle == Lifecycle::Running {
            j.lifecycle = Lifecycle::Restarting;
        }
    }

    /// A node went down. Returns the job that crashed with it, if any.
    pub fn node_down(&mut self, n: NodeId, reason: &str, t: f64) -> Option<JobId> {
        self.set_state(n, NodeState::Down, reason, t);
        let job = self.status[n].job?;
        self.vacate(job, n);
        Some(job)
    }

    /// A job crashed because of `n` without the node going down (escalated
    /// soft fault): the node leaves the job and is closed for repair.
    pub fn node_faulted(&mut self, n: NodeId, reason: &str, t: f64) -> Option<JobId> {
        self.set_state(n, NodeState::Closed, reason, t);
        let job = self.status[n].job?;
        self.vacate(job, n);
        Some(job)
    }

    /// An alert closes a node. Idle nodes close at once; a node inside a job
    /// is marked and leaves at the job's next restart boundary. Returns that job.
    pub fn close(&mut self, n: NodeId, reason: &str, t: f64) -> Option<JobId> {
        if self.status[n].state == NodeState::Down {
            return None;
        }
        match self.status[n].job {
            Some(job) => {
                self.status[n].drain_pending = true;
                self.status[n].reason = reason.to_string();
                Some(job)
            }
            None => {
                self.set_state(n, NodeState::Closed, reason, t);
                None
            }
        }
    }

    /// Nodes of a job awaiting a drain.
    pub fn drain_pending(&self, job: JobId) -> Vec<NodeId> {
        self.status.iter().filter(|s| s.job == Some(job) && s.drain_pending).map(|s| s.node).collect()
    }

    /// Restart boundary: closes the job's drain-marked nodes.
    pub fn drain(&mut self, job: JobId, t: f64) -> Vec<NodeId> {
        let nodes = self.drain_pending(job);
        for &n in &nodes {
            let reason = self.status[n].reason.clone();
            self.set_state(n, NodeState::Closed, &reason, t);
            self.vacate(job, n);
        }
        nodes
    }

    pub fn brake(&mut self, n: NodeId, t: f64) {
        if matches!(self.status[n].state, NodeState::Open | NodeState::ReservedBuffer) {
            self.set_state(n, NodeState::Braked, "power brake", t);
        }
    }

    pub fn unbrake(&mut self, n: NodeId, t: f64) {
        if self.status[n].state == NodeState::Braked {
            let to = if self.status[n].job.is_none() && self.pool.below_target() {
                NodeState::ReservedBuffer
            } else {
                NodeState::Open
            };
            self.set_state(n, to, "brake released", t);
        }
    }

    /// A repaired node rejoins: the pool first while it is below target.
    pub fn node_repaired(&mut self, n: NodeId, t: f64) -> NodeState {
        if matches!(self.status[n].state, NodeState::Down | NodeState::Closed) && self.status[n].job.is_none() {
            let to = if self.pool.below_target() { NodeState::ReservedBuffer } else { NodeState::Open };
            self.set_state(n, to, "repaired", t);
        }
        self.status[n].state
    }

    /// Fills a restarting job's holes from the pool, then from idle open
    /// nodes, nearest rack first. All-or-nothing.
    pub fn refill(&mut self, job: JobId, topo: &ClusterTopology, t: f64) -> Result<Vec<NodeId>, SchedulerError> {
        let j = self.jobs.get(job).ok_or(SchedulerError::UnknownJob(job))?;
        if !matches!(j.lifecycle, Lifecycle::Running | Lifecycle::Restarting) {
            return Err(SchedulerError::NotRunning(job));
        }
        let holes = j.holes.clone();
        if holes.is_empty() {
            if j.lifecycle == Lifecycle::Restarting {
                self.jobs[job].lifecycle = Lifecycle::Running;
            }
            return Ok(Vec::new());
        }
        let need = holes.len();
        let idle = self.idle_open();
        let available = self.pool.len() + idle.len();
        if available < need {
            return Err(ResilienceError::PoolExhausted { needed: need, available }.into());
        }
        let rack_of = |n: NodeId| topo.nodes[n].rack;
        let target_rack = rack_of(holes[0].1);
        let rank = |n: NodeId| rack_of(n).abs_diff(target_rack);
        let from_pool = need.min(self.pool.len());
        let mut fresh = self.pool.take(from_pool, rank)?;
        let mut idle = idle;
        idle.sort_by_key(|&n| (rank(n), n));
        fresh.extend(idle.into_iter().take(need - from_pool));
        for &n in &fresh {
            self.set_state(n, NodeState::Open, "replacement", t);
            self.status[n].job = Some(job);
        }
        let gpn = self.gpus_per_node;
        let j = &mut self.jobs[job];
        let p = j.placement.as_mut().expect("running job has a placement");
        for (&(slot, _), &n) in holes.iter().zip(&fresh) {
            p.nodes[slot] = n;
        }
        p.stages = stages_of(&j.spec, gpn, &p.nodes);
        j.holes.clear();
        j.lifecycle = Lifecycle::Running;
        Ok(fresh)
    }

    pub fn complete(&mut self, job: JobId, t: f64) -> Result<(), SchedulerError> {
        self.finish(job, Lifecycle::Completed, t)
    }

    pub fn fail(&mut self, job: JobId, t: f64) -> Result<(), SchedulerError> {
        self.finish(job, Lifecycle::Failed, t)
    }

    fn finish(&mut self, job: JobId, to: Lifecycle, _t: f64) -> Result<(), SchedulerError> {
        let j = self.jobs.get_mut(job).ok_or(SchedulerError::UnknownJob(job))?;
        j.lifecycle = to;
        j.holes.clear();
        for s in self.status.iter_mut().filter(|s| s.job == Some(job)) {
            s.job = None;
            s.drain_pending = false;
        }
        Ok(())
    }

    pub fn counts(&self) -> QueueCounts {
        let mut c = QueueCounts { submitted: self.jobs.len(), ..Default::default() };
        for j in &self.jobs {
            match j.lifecycle {
                Lifecycle::Pending => c.pending += 1,
                Lifecycle::Running | Lifecycle::Restarting => c.running += 1,
                Lifecycle::Completed => c.completed += 1,
                Lifecycle::Failed => c.failed += 1,
            }
        }
        c
    }

    /// Placement and queue invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for s in &self.status {
            if let Some(job) = s.job {
                if matches!(s.state, NodeState::Down | NodeState::Closed | NodeState::ReservedBuffer) {
                    return Err(format!("node {} is {} but assigned to job {job}", s.node, s.state.label()));
                }
            }
            if (s.state == NodeState::ReservedBuffer) != self.pool.contains(s.node) {
                return Err(format!("node {} pool membership disagrees with its state", s.node));
            }
        }
        for j in &self.jobs {
            if j.lifecycle == Lifecycle::Running {
                let p = j.placement.as_ref().ok_or(format!("running job {} has no placement", j.id))?;
                if p.nodes.iter().any(|&n| self.status[n].job != Some(j.id)) {
                    return Err(format!("job {} placement disagrees with node assignment", j.id));
                }
                if p.nodes.len() * self.gpus_per_node as usize != j.spec.gpu_count() {
                    return Err(format!("job {} lost GPUs", j.id));
                }
            }
        }
        let c = self.counts();
        if c.submitted != c.pending + c.running + c.completed + c.failed {
            return Err("queue conservation violated".into());
        }
        Ok(())
    }
}
