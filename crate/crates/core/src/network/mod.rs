//! Flow-level transport: ECMP routing, max-min rate allocation, WRED marking
//! and DCQCN-style sender control, plus the TCP / RoCE / GDR data-path models.
//!
//! Rates are GB/s (1e9 bytes per second); link capacities in the topology are
//! Gb/s and converted at the boundary.

mod alloc;
mod congestion;
mod routing;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ClusterTopology, LinkId, NodeId, NodeSpec, TopologyError};

pub use alloc::{allocate_rates, check_link_conservation, max_min_allocate, Demand};
pub use congestion::{
    ecn_decision, on_cnp_received, recover_rate, simulate_incast, CongestionState, DcqcnParams, EcnDecision,
    IncastConfig, IncastResult, PortQueue, QueueSample, WredParams,
};
pub use routing::{select_path_ecmp, Path};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("no path from node {src} to node {dst}")]
    NoPath { src: NodeId, dst: NodeId },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Tcp,
    Roce,
    Gdr,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tcp, Protocol::Roce, Protocol::Gdr];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Roce => "roce",
            Protocol::Gdr => "gdr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Sustained per-port rate the protocol stack can drive, GB/s.
    pub attach_cap: f64,
    /// Fixed software cost per message, seconds.
    pub per_message_overhead: f64,
    /// Host-link traversals per byte.
    pub copy_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathModelParams {
    pub tcp: ProtocolParams,
    pub roce: ProtocolParams,
    pub gdr: ProtocolParams,
}

impl Default for PathModelParams {
    fn default() -> Self {
        PathModelParams {
            tcp: ProtocolParams { attach_cap: 0.75, per_message_overhead: 35.9e-6, copy_penalty: 2.0 },
            roce: ProtocolParams { attach_cap: 1.5, per_message_overhead: 8.0e-6, copy_penalty: 1.0 },
            gdr: ProtocolParams { attach_cap: 3.125, per_message_overhead: 1.7e-6, copy_penalty: 0.0 },
        }
    }
}

impl PathModelParams {
    pub fn get(&self, p: Protocol) -> &ProtocolParams {
        match p {
            Protocol::Tcp => &self.tcp,
            Protocol::Roce => &self.roce,
            Protocol::Gdr => &self.gdr,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        for p in Protocol::ALL {
            let q = self.get(p);
            if !(q.attach_cap > 0.0) || !(q.per_message_overhead >= 0.0) || !(q.copy_penalty >= 0.0) {
                return Err(NetworkError::InvalidParameter(format!("{} path parameters", p.label())));
            }
        }
        if self.tcp.copy_penalty != 2.0 || self.gdr.copy_penalty != 0.0 {
            return Err(NetworkError::InvalidParameter(
                "tcp.copy_penalty must be 2 and gdr.copy_penalty 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathCap {
    /// Per-node rate ceiling, GB/s.
    pub rate: f64,
    pub per_message_overhead: f64,
}

/// Per-node bandwidth ceiling of a protocol on a healthy node.
pub fn path_model_cap(protocol: Protocol, node: &NodeSpec, params: &PathModelParams) -> PathCap {
    let q = params.get(protocol);
    let nic = node.nic_aggregate_gbytes();
    let attach = q.attach_cap * node.ports() as f64;
    let mut rate = nic.min(attach);
    if q.copy_penalty > 0.0 {
        rate = rate.min(node.host_link_bw * node.nic_count as f64 / q.copy_penalty);
    }
    PathCap { rate, per_message_overhead: q.per_message_overhead }
}

/// A NIC port on a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: NodeId,
    pub nic: u32,
    pub port: u32,
}

impl Endpoint {
    pub fn new(node: NodeId, nic: u32, port: u32) -> Self {
        Endpoint { node, nic, port }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowState {
    pub id: u64,
    /// Preferred endpoints; the route may fall back to other ports.
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes_total: f64,
    pub bytes_done: f64,
    pub protocol: Protocol,
    pub path: Option<Path>,
    pub allocated_rate: f64,
    /// Sender-side ceiling such as a congestion-controlled rate, GB/s.
    pub rate_limit: f64,
    pub sender_cc: CongestionState,
}

impl FlowState {
    pub fn new(id: u64, src: Endpoint, dst: Endpoint, bytes: f64, protocol: Protocol, line_rate: f64) -> Self {
        FlowState {
            id,
            src,
            dst,
            bytes_total: bytes,
            bytes_done: 0.0,
            protocol,
            path: None,
            allocated_rate: 0.0,
            rate_limit: f64::INFINITY,
            sender_cc: CongestionState::new(line_rate),
        }
    }

    pub fn remaining(&self) -> f64 {
        (self.bytes_total - self.bytes_done).max(0.0)
    }
}

/// Resolves every flow's path. Fails on the first partitioned flow.
pub fn route_all(
    flows: &mut [FlowState],
    topo: &ClusterTopology,
    salt: u64,
) -> Result<(), NetworkError> {
    for f in flows.iter_mut() {
        f.path = Some(select_path_ecmp(f, topo, salt)?);
    }
    Ok(())
}

pub(crate) fn links_of(path: &Path) -> impl Iterator<Item = LinkId> + '_ {
    path.links.iter().copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vela_caps() {
        let n = NodeSpec::vela();
        let p = PathModelParams::default();
        assert_eq!(path_model_cap(Protocol::Tcp, &n, &p).rate, 6.0);
        assert_eq!(path_model_cap(Protocol::Roce, &n, &p).rate, 12.0);
        assert_eq!(path_model_cap(Protocol::Gdr, &n, &p).rate, 25.0);
    }

    #[test]
    fn tcp_cap_tracks_host_link() {
        let n = NodeSpec { host_link_bw: 1.0, ..NodeSpec::vela() };
        let p = PathModelParams::default();
        assert_eq!(path_model_cap(Protocol::Tcp, &n, &p).rate, 2.0);
        assert_eq!(path_model_cap(Protocol::Roce, &n, &p).rate, 4.0);
        assert_eq!(path_model_cap(Protocol::Gdr, &n, &p).rate, 25.0);
    }

    #[test]
    fn copy_penalty_contract_enforced() {
        let mut p = PathModelParams::default();
        assert!(p.validate().is_ok());
        p.gdr.copy_penalty = 1.0;
        assert!(p.validate().is_err());
    }
}
