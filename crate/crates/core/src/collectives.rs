//! Ring all-reduce, point-to-point and NVLink cost models with
//! nccl-tests style bandwidth reporting.
//!
//! `duration = 2(N-1) * ((S/N) / B_eff + L_hop)`,
//! `algbw = S / duration`, `busbw = algbw * 2(N-1)/N`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    allocate_rates, path_model_cap, route_all, select_path_ecmp, Endpoint, FlowState, NetworkError, PathModelParams,
    Protocol,
};
use crate::topology::{ClusterTopology, NodeId, NodeSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("tensor-parallel degree {tp} exceeds {gpus} GPUs per node")]
    TPExceedsNode { tp: u32, gpus: u32 },
    #[error("invalid collective: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllreduceRing,
    P2p,
    AllreduceNvlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveSpec {
    pub kind: CollectiveKind,
    /// GPU count.
    pub participants: usize,
    /// Bytes.
    pub message_size: f64,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollectiveResult {
    pub duration: f64,
    pub algbw: f64,
    pub busbw: f64,
}

/// Transport seen by one ring step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RingContext {
    /// Bottleneck rate of the ring, GB/s.
    pub b_eff: f64,
    /// Latency per ring step, seconds.
    pub l_hop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveMode {
    Analytic,
    Simulated,
}

pub fn ring_factor(n: usize) -> f64 {
    2.0 * (n as f64 - 1.0) / n as f64
}

pub fn ring_allreduce_time(size: f64, n: usize, ctx: &RingContext) -> Result<CollectiveResult, CollectiveError> {
    if n < 2 {
        return Err(CollectiveError::InvalidSpec(format!("all-reduce needs >= 2 participants, got {n}")));
    }
    if !(size > 0.0) || !(ctx.b_eff > 0.0) || !(ctx.l_hop >= 0.0) {
        return Err(CollectiveError::InvalidSpec("size and bandwidth must be > 0".into()));
    }
    let steps = 2.0 * (n as f64 - 1.0);
    let duration = steps * ((size / n as f64) / (ctx.b_eff * 1e9) + ctx.l_hop);
    Ok(from_duration(size, n, duration))
}

fn from_duration(size: f64, n: usize, duration: f64) -> CollectiveResult {
    let algbw = size / duration / 1e9;
    CollectiveResult { duration, algbw, busbw: algbw * ring_factor(n) }
}

/// Intra-node all-reduce over NVLink; a singleton group costs nothing.
pub fn nvlink_allreduce_time(size: f64, tp: u32, node: &NodeSpec) -> Result<f64, CollectiveError> {
    if tp == 0 || tp > node.gpus_per_node {
        return Err(CollectiveError::TPExceedsNode { tp, gpus: node.gpus_per_node });
    }
    if tp == 1 {
        return Ok(0.0);
    }
    let ctx = RingContext { b_eff: node.nvlink_bw, l_hop: 0.0 };
    Ok(ring_allreduce_time(size, tp as usize, &ctx)?.duration)
}

/// Single transfer on an otherwise idle fabric.
pub fn p2p_time(
    size: f64,
    src: Endpoint,
    dst: Endpoint,
    protocol: Protocol,
    topo: &ClusterTopology,
    params: &PathModelParams,
) -> Result<f64, CollectiveError> {
    if !(size >= 1.0) {
        return Err(CollectiveError::InvalidSpec(format!("p2p size must be >= 1 byte, got {size}")));
    }
    if src.node == dst.node {
        return Err(CollectiveError::InvalidSpec("p2p endpoints must be distinct nodes".into()));
    }
    let line = topo.node_spec.nic_port_gbps / 8.0;
    let mut flows = vec![FlowState::new(0, src, dst, size, protocol, line)];
    route_all(&mut flows, topo, 0)?;
    allocate_rates(&mut flows, topo, params);
    let f = &flows[0];
    let latency = f.path.as_ref().map_or(0.0, |p| p.latency);
    Ok(size / (f.allocated_rate * 1e9) + latency + params.get(protocol).per_message_overhead)
}

fn port_endpoint(spec: &NodeSpec, node: NodeId, channel: u32) -> Endpoint {
    Endpoint::new(node, channel / spec.ports_per_nic, channel % spec.ports_per_nic)
}

/// Largest path latency over the node-level ring hops.
pub fn ring_hop_latency(topo: &ClusterTopology, nodes: &[NodeId], salt: u64) -> Result<f64, CollectiveError> {
    let mut worst: f64 = 0.0;
    let line = topo.node_spec.nic_port_gbps / 8.0;
    for i in 0..nodes.len() {
        let (a, b) = (nodes[i], nodes[(i + 1) % nodes.len()]);
        if a == b {
            continue;
        }
        let e = port_endpoint(&topo.node_spec, a, 0);
        let f = FlowState::new(i as u64, e, Endpoint { node: b, ..e }, 1.0, Protocol::Gdr, line);
        worst = worst.max(select_path_ecmp(&f, topo, salt)?.latency);
    }
    Ok(worst)
}

/// Closed-form context for a ring over `nodes` on a healthy fabric.
pub fn analytic_context(
    topo: &ClusterTopology,
    nodes: &[NodeId],
    protocol: Protocol,
    params: &PathModelParams,
) -> Result<RingContext, CollectiveError> {
    if nodes.len() < 2 {
        return Ok(RingContext { b_eff: topo.node_spec.nvlink_bw, l_hop: 0.0 });
    }
    let cap = path_model_cap(protocol, &topo.node_spec, params);
    let b_eff = cap.rate.min(topo.node_spec.nvlink_bw);
    Ok(RingContext { b_eff, l_hop: cap.per_message_overhead + ring_hop_latency(topo, nodes, 0)? })
}

/// Ring all-reduce over every GPU of `nodes`. The node-level ring is split
/// into one channel per NIC port; channel `c` leaves each node on port `c`
/// and enters the next node on port `c`. In simulated mode the channel flows
/// are routed and given max-min fair rates alongside `background` flows, and
/// the slowest channel gates each step.
pub fn ring_allreduce(
    topo: &ClusterTopology,
    nodes: &[NodeId],
    size: f64,
    protocol: Protocol,
    params: &PathModelParams,
    mode: CollectiveMode,
    background: &[FlowState],
    salt: u64,
) -> Result<CollectiveResult, CollectiveError> {
    let spec = &topo.node_spec;
    let n = nodes.len() * spec.gpus_per_node as usize;
    if nodes.len() < 2 || mode == CollectiveMode::Analytic {
        let ctx = analytic_context(topo, nodes, protocol, params)?;
        return ring_allreduce_time(size, n, &ctx);
    }
    let channels = spec.ports();
    let line = spec.nic_port_gbps / 8.0;
    let mut flows: Vec<FlowState> = background.to_vec();
    let first = flows.len();
    for c in 0..channels {
        for i in 0..nodes.len() {
            let src = port_endpoint(spec, nodes[i], c);
            let dst = port_endpoint(spec, nodes[(i + 1) % nodes.len()], c);
            let id = ((c as u64) << 32) | i as u64;
            flows.push(FlowState::new(id, src, dst, size, protocol, line));
        }
    }
    route_all(&mut flows[first..], topo, salt)?;
    allocate_rates(&mut flows, topo, params);
    let per_node = nodes.len();
    let mut l_hop: f64 = 0.0;
    let mut step: f64 = 0.0;
    let chunk = size / n as f64 / channels as f64;
    for c in 0..channels as usize {
        let ring = &flows[first + c * per_node..first + (c + 1) * per_node];
        let rate = ring.iter().map(|f| f.allocated_rate).fold(spec.nvlink_bw, f64::min);
        if !(rate > 0.0) {
            return Err(CollectiveError::Network(NetworkError::NoPath { src: ring[0].src.node, dst: ring[0].dst.node }));
        }
        let lat = ring.iter().filter_map(|f| f.path.as_ref()).map(|p| p.latency).fold(0.0, f64::max);
        l_hop = l_hop.max(lat);
        step = step.max(chunk / (rate * 1e9));
    }
    let l_hop = l_hop + params.get(protocol).per_message_overhead;
    let duration = 2.0 * (n as f64 - 1.0) * (step + l_hop);
    Ok(from_duration(size, n, duration))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusbwRow {
    pub size: f64,
    pub participants: usize,
    pub duration: f64,
    pub algbw: f64,
    pub busbw: f64,
}

impl BusbwRow {
    pub const HEADER: &'static str = "size_bytes\tparticipants\ttime_us\talgbw_gbps\tbusbw_gbps";

    pub fn to_tsv(&self) -> String {
        format!(
            "{:.0}\t{}\t{:.3}\t{:.4}\t{:.4}",
            self.size,
            self.participants,
            self.duration * 1e6,
            self.algbw,
            self.busbw
        )
    }
}

pub fn busbw_report(spec: &CollectiveSpec, result: &CollectiveResult) -> BusbwRow {
    BusbwRow {
        size: spec.message_size,
        participants: spec.participants,
        duration: result.duration,
        algbw: result.algbw,
        busbw: result.busbw,
    }
}

pub fn busbw_table(rows: &[BusbwRow]) -> String {
    let mut out = String::from(BusbwRow::HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_tsv());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_vela_topology, VelaParams};

    #[test]
    fn eight_way_ring_by_hand() {
        let r = ring_allreduce_time(1e9, 8, &RingContext { b_eff: 20.0, l_hop: 5e-6 }).unwrap();
        assert!((r.duration - 0.08757).abs() < 1e-5, "{}", r.duration);
        assert!((r.busbw - 20.0).abs() < 0.05);
    }

    #[test]
    fn two_participants_busbw_is_beff() {
        let r = ring_allreduce_time(1e15, 2, &RingContext { b_eff: 12.0, l_hop: 1e-6 }).unwrap();
        assert!((r.busbw - 12.0).abs() / 12.0 < 1e-6);
        assert_eq!(r.algbw * ring_factor(2), r.busbw);
    }

    #[test]
    fn degenerate_inputs() {
        let ctx = RingContext { b_eff: 1.0, l_hop: 0.0 };
        assert!(ring_allreduce_time(1.0, 1, &ctx).is_err());
        assert!(ring_allreduce_time(0.0, 4, &ctx).is_err());
    }

    #[test]
    fn nvlink_cases() {
        let n = NodeSpec::vela();
        assert_eq!(nvlink_allreduce_time(64e6, 1, &n).unwrap(), 0.0);
        let t = nvlink_allreduce_time(64e6, 4, &n).unwrap();
        assert!((t - 0.32e-3).abs() < 1e-9, "{t}");
        assert_eq!(nvlink_allreduce_time(1.0, 9, &n), Err(CollectiveError::TPExceedsNode { tp: 9, gpus: 8 }));
    }

    #[test]
    fn p2p_small_message_is_latency_bound() {
        let t = build_vela_topology(&VelaParams::new(2, 6, 4, 4)).unwrap();
        let p = PathModelParams::default();
        let d = p2p_time(1.0, Endpoint::new(0, 0, 0), Endpoint::new(7, 0, 0), Protocol::Gdr, &t, &p).unwrap();
        assert!(d < 5e-6 && d > 1.9e-6, "{d}");
        assert!(p2p_time(0.0, Endpoint::new(0, 0, 0), Endpoint::new(7, 0, 0), Protocol::Gdr, &t, &p).is_err());
    }

    #[test]
    fn simulated_matches_analytic_on_idle_fabric() {
        let t = build_vela_topology(&VelaParams::new(3, 6, 4, 4)).unwrap();
        let nodes: Vec<_> = (0..16).collect();
        let p = PathModelParams::default();
        for proto in Protocol::ALL {
            for size in [8.0 * 1048576.0, 1073741824.0] {
                let a = ring_allreduce(&t, &nodes, size, proto, &p, CollectiveMode::Analytic, &[], 0).unwrap();
                let s = ring_allreduce(&t, &nodes, size, proto, &p, CollectiveMode::Simulated, &[], 0).unwrap();
                assert!((a.busbw - s.busbw).abs() / a.busbw < 0.05, "{proto:?} {size}: {a:?} {s:?}");
            }
        }
    }

    #[test]
    fn report_row_identity() {
        let spec = CollectiveSpec { kind: CollectiveKind::AllreduceRing, participants: 64, message_size: 8e6, protocol: Protocol::Gdr };
        let r = ring_allreduce_time(8e6, 64, &RingContext { b_eff: 25.0, l_hop: 3e-6 }).unwrap();
        let row = busbw_report(&spec, &r);
        assert_eq!(row.algbw * ring_factor(64), row.busbw);
        assert!(busbw_table(&[row]).starts_with("size_bytes\t"));
    }
}
