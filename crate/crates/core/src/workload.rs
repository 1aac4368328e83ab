//! Training jobs: parallelism plan, per-step time with straggler semantics,
//! and throughput accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{
    analytic_context, nvlink_allreduce_time, ring_allreduce_time, CollectiveError, CollectiveMode, RingContext,
};
use crate::network::{
    allocate_rates, route_all, Endpoint, FlowState, NetworkError, PathModelParams, Protocol,
};
use crate::simcore::DAY;
use crate::topology::{ClusterTopology, LinkKind, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("need {need} healthy nodes, have {have}")]
    InsufficientNodes { need: usize, have: usize },
    #[error("job crashed: node {0} is down")]
    JobCrashed(NodeId),
    #[error("no productive time in phase {0:?}; throughput undefined")]
    NoProgress(JobPhase),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

impl From<NetworkError> for WorkloadError {
    fn from(e: NetworkError) -> Self {
        WorkloadError::Collective(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobSpec {
    pub name: String,
    pub params: f64,
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    pub global_batch_tokens: f64,
    pub bytes_per_grad_element: f64,
    /// Seconds per step at full GPU power.
    pub base_step_compute: f64,
    pub checkpoint_state_size: f64,
    pub target_tokens: f64,
    pub protocol: Protocol,
    /// Fraction of communication hidden behind compute, in [0, 1].
    pub overlap: f64,
    /// Bytes all-reduced inside each TP group per step.
    pub tp_bytes_per_step: f64,
    /// Bytes sent across each pipeline boundary per step.
    pub pp_bytes_per_step: f64,
    /// Host-side I/O per node per step (data loading, CPU-staged copies).
    pub host_io_bytes_per_step: f64,
    /// Bytes read from storage per node per step.
    pub read_bytes_per_step: f64,
    pub flops_per_token_factor: f64,
}

impl Default for JobSpec {
    fn default() -> Self {
        JobSpec {
            name: "llm-20b".into(),
            params: 20e9,
            tp: 4,
            pp: 4,
            dp: 48,
            global_batch_tokens: 4.0 * 1048576.0,
            bytes_per_grad_element: 2.0,
            base_step_compute: 20.0,
            checkpoint_state_size: 4.5e12,
            target_tokens: f64::INFINITY,
            protocol: Protocol::Gdr,
            overlap: 0.0,
            tp_bytes_per_step: 0.0,
            pp_bytes_per_step: 0.0,
            host_io_bytes_per_step: 0.0,
            read_bytes_per_step: 0.0,
            flops_per_token_factor: 6.0,
        }
    }
}

impl JobSpec {
    pub fn gpu_count(&self) -> usize {
        (self.tp * self.pp * self.dp) as usize
    }

    pub fn nodes_needed(&self, gpus_per_node: u32) -> usize {
        self.gpu_count().div_ceil(gpus_per_node as usize)
    }

    /// Gradient bytes each GPU all-reduces across its DP group per step.
    pub fn dp_shard_bytes(&self) -> f64 {
        self.params / (self.tp * self.pp) as f64 * self.bytes_per_grad_element
    }

    pub fn validate(&self, gpus_per_node: u32) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.tp == 0 || self.pp == 0 || self.dp == 0 {
            return bad("tp, pp and dp must be >= 1".into());
        }
        if self.tp > gpus_per_node || gpus_per_node % self.tp != 0 {
            return bad(format!("tp={} must divide gpus_per_node={gpus_per_node}", self.tp));
        }
        if self.gpu_count() > gpus_per_node as usize && self.gpu_count() % gpus_per_node as usize != 0 {
            return bad(format!("{} GPUs do not fill whole {gpus_per_node}-GPU nodes", self.gpu_count()));
        }
        if !(self.params > 0.0 && self.global_batch_tokens > 0.0 && self.base_step_compute > 0.0) {
            return bad("params, global_batch_tokens and base_step_compute must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(self.bytes_per_grad_element > 0.0 && self.checkpoint_state_size >= 0.0) {
            return bad("bytes_per_grad_element must be > 0 and checkpoint_state_size >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobPhase {
    Pending,
    Loading,
    Stepping,
    Checkpointing,
    Crashed,
    Restarting,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Placement {
    pub nodes: Vec<NodeId>,
    /// Nodes hosting each pipeline stage.
    pub stages: Vec<Vec<NodeId>>,
}

/// Ranks are laid out TP-innermost, then DP, then PP, so TP groups stay on a
/// node and each stage's DP ring covers a contiguous, rack-ordered node range.
pub fn plan_parallelism(
    spec: &JobSpec,
    topo: &ClusterTopology,
    available: &[NodeId],
) -> Result<Placement, WorkloadError> {
    let gpn = topo.node_spec.gpus_per_node;
    spec.validate(gpn)?;
    let need = spec.nodes_needed(gpn);
    if available.len() < need {
        return Err(WorkloadError::InsufficientNodes { need, have: available.len() });
    }
    let mut pool: Vec<NodeId> = available.to_vec();
    pool.sort_by_key(|&n| (topo.nodes[n].rack, n));
    // Prefer the rack-contiguous window with the fewest racks.
    let racks_in = |w: &[NodeId]| {
        let mut r: Vec<usize> = w.iter().map(|&n| topo.nodes[n].rack).collect();
        r.dedup();
        r.len()
    };
    let best = (0..=pool.len() - need).min_by_key(|&s| (racks_in(&pool[s..s + need]), s)).unwrap_or(0);
    let nodes = pool[best..best + need].to_vec();
    Ok(Placement { stages: stages_of(spec, gpn, &nodes), nodes })
}

pub(crate) fn stages_of(spec: &JobSpec, gpn: u32, nodes: &[NodeId]) -> Vec<Vec<NodeId>> {
    let per_stage = (spec.tp * spec.dp) as usize;
    (0..spec.pp as usize)
        .map(|s| {
            let mut v: Vec<NodeId> = (s * per_stage..(s + 1) * per_stage).map(|r| nodes[r / gpn as usize]).collect();
            v.dedup();
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobState {
    pub id: usize,
    pub spec: JobSpec,
    pub placement: Placement,
    pub phase: JobPhase,
    pub steps_done: u64,
    pub tokens_done: f64,
    pub step_times: Vec<f64>,
}

impl JobState {
    pub fn new(id: usize, spec: JobSpec, placement: Placement) -> Self {
        JobState { id, spec, placement, phase: JobPhase::Loading, steps_done: 0, tokens_done: 0.0, step_times: Vec::new() }
    }

    pub fn record_steps(&mut self, steps: u64) {
        self.steps_done += steps;
        self.tokens_done = self.steps_done as f64 * self.spec.global_batch_tokens;
    }
}

/// Cluster conditions a step sees.
pub struct StepEnv<'a> {
    pub topo: &'a ClusterTopology,
    pub params: &'a PathModelParams,
    pub mode: CollectiveMode,
    /// Compute slowdown per cluster node (>= 1).
    pub slowdown: &'a [f64],
    pub node_up: &'a [bool],
    /// Extra seconds per step from storage reads.
    pub storage_extra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepBreakdown {
    pub per_node: Vec<f64>,
    pub compute: f64,
    pub host_io: f64,
    pub tp_comm: f64,
    pub pp_comm: f64,
    pub dp_comm: f64,
    pub exposed_comm: f64,
    pub total: f64,
}

/// Node-level ring context for a DP ring, simulated or closed-form.
pub fn dp_ring_context(
    topo: &ClusterTopology,
    nodes: &[NodeId],
    protocol: Protocol,
    params: &PathModelParams,
    mode: CollectiveMode,
) -> Result<RingContext, WorkloadError> {
    if nodes.len() < 2 || mode == CollectiveMode::Analytic {
        return Ok(analytic_context(topo, nodes, protocol, params)?);
    }
    let spec = &topo.node_spec;
    let channels = spec.ports();
    let line = spec.nic_port_gbps / 8.0;
    let mut flows = Vec::with_capacity(channels as usize * nodes.len());
    for c in 0..channels {
        for i in 0..nodes.len() {
            let ep = |n| Endpoint::new(n, c / spec.ports_per_nic, c % spec.ports_per_nic);
            let id = ((c as u64) << 32) | i as u64;
            flows.push(FlowState::new(id, ep(nodes[i]), ep(nodes[(i + 1) % nodes.len()]), 1.0, protocol, line));
        }
    }
    route_all(&mut flows, topo, 0)?;
    allocate_rates(&mut flows, topo, params);
    let mut b_eff = f64::INFINITY;
    for c in 0..channels as usize {
        let ring = &flows[c * nodes.len()..(c + 1) * nodes.len()];
        let r = ring.iter().map(|f| f.allocated_rate).fold(f64::INFINITY, f64::min);
        b_eff = b_eff.min(r * channels as f64);
    }
    let lat = flows.iter().filter_map(|f| f.path.as_ref()).map(|p| p.latency).fold(0.0, f64::max);
    Ok(RingContext { b_eff: b_eff.min(spec.nvlink_bw), l_hop: lat + params.get(protocol).per_message_overhead })
}

/// Host-link bandwidth of a node, GB/s.
pub fn host_bandwidth(topo: &ClusterTopology, node: NodeId) -> f64 {
    topo.out_links(crate::topology::Vertex::Host(node))
        .iter()
        .map(|&l| topo.link(l))
        .filter(|l| matches!(l.kind, LinkKind::Host { .. }))
        .map(|l| l.capacity_gbytes())
        .sum()
}

/// Per-node step time is compute (scaled by slowdown and virtualization
/// overhead) plus host I/O plus exposed communication; the job step is the
/// maximum over its nodes plus the storage term.
pub fn step_time(spec: &JobSpec, placement: &Placement, env: &StepEnv) -> Result<StepBreakdown, WorkloadError> {
    if let Some(&down) = placement.nodes.iter().find(|&&n| !env.node_up[n]) {
        return Err(WorkloadError::JobCrashed(down));
    }
    let node = &env.topo.node_spec;
    let tp_comm = if spec.tp_bytes_per_step > 0.0 {
        nvlink_allreduce_time(spec.tp_bytes_per_step, spec.tp, node)?
    } else {
        0.0
    };

    let mut dp_comm: f64 = 0.0;
    if spec.dp > 1 {
        let v = spec.dp_shard_bytes() * spec.tp as f64;
        for stage in &placement.stages {
            let ctx = if stage.len() < 2 {
                RingContext { b_eff: node.nvlink_bw, l_hop: 0.0 }
            } else {
                dp_ring_context(env.topo, stage, spec.protocol, env.params, env.mode)?
            };
            dp_comm = dp_comm.max(ring_allreduce_time(v, spec.dp as usize, &ctx)?.duration);
        }
    }
    let mut pp_comm = 0.0;
    if spec.pp > 1 && spec.pp_bytes_per_step > 0.0 {
        let ctx = analytic_context(env.topo, &placement.nodes[..2.min(placement.nodes.len())], spec.protocol, env.params)?;
        pp_comm = 2.0 * (spec.pp - 1) as f64 * (spec.pp_bytes_per_step / (ctx.b_eff * 1e9) + ctx.l_hop);
    }
    let exposed = (1.0 - spec.overlap) * (tp_comm + dp_comm + pp_comm);
    let mut per_node = Vec::with_capacity(placement.nodes.len());
    let mut compute: f64 = 0.0;
    let mut host_io: f64 = 0.0;
    for &n in &placement.nodes {
        let c = spec.base_step_compute * env.slowdown[n].max(1.0) * (1.0 + node.virt_overhead);
        let h = if spec.host_io_bytes_per_step > 0.0 {
            spec.host_io_bytes_per_step / (host_bandwidth(env.topo, n) * 1e9)
        } else {
            0.0
        };
        compute = compute.max(c);
        host_io = host_io.max(h);
        per_node.push(c + h + exposed);
    }
    let total = per_node.iter().copied().fold(0.0, f64::max) + env.storage_extra;
    Ok(StepBreakdown { per_node, compute, host_io, tp_comm, pp_comm, dp_comm, exposed_comm: exposed, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub tokens_per_day: f64,
    pub tflops_per_gpu: f64,
    pub gpu_hours: f64,
    pub goodput: f64,
}

/// `tflops_per_gpu = flops_per_token * tokens_per_second / gpus`, with
/// `flops_per_token = factor * params`.
pub fn throughput_report(
    tokens_done: f64,
    params: f64,
    gpus: usize,
    wall_seconds: f64,
    productive_seconds: f64,
    flops_per_token_factor: f64,
    phase: JobPhase,
) -> Result<ThroughputReport, WorkloadError> {
    if !(wall_seconds > 0.0) || !(productive_seconds > 0.0) || tokens_done <= 0.0 || gpus == 0 {
        return Err(WorkloadError::NoProgress(phase));
    }
    let rate = tokens_done / wall_seconds;
    Ok(ThroughputReport {
        tokens_per_day: rate * DAY,
        tflops_per_gpu: flops_per_token_factor * params * rate / gpus as f64 / 1e12,
        gpu_hours: gpus as f64 * wall_seconds / 3600.0,
        goodput: (productive_seconds / wall_seconds).min(1.0),
    })
}

/// Closed-form tokens per day for a fixed step time.
pub fn analytic_tokens_per_day(spec: &JobSpec, step_seconds: f64) -> f64 {
    spec.global_batch_tokens / step_seconds * DAY
}
