//! Cluster topologies: dual-homed two-level Clos (Vela style) and
//! rail-optimized non-blocking fat tree pods (Blue Vela style).
//!
//! The graph is made of host, NIC, switch and storage-fabric vertices joined by
//! directed links. Every physical cable becomes two links with consecutive ids
//! (`2k` and `2k + 1`), so a failure applied to either direction takes down both.

mod build;
mod maxflow;
mod validate;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{build_fat_tree, build_vela_topology, FatTreeParams, VelaParams};
pub use maxflow::FlowNetwork;
pub use validate::{
    bisection_check, validate_topology, DualHomingCheck, NonBlockingCheck, ValidationReport,
};

pub type NodeId = usize;
pub type SwitchId = usize;
pub type LinkId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("infeasible switch radix: {0}")]
    InfeasibleRadix(String),
    #[error("unknown component {0:?}")]
    UnknownComponent(ComponentId),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeSpec {
    pub gpus_per_node: u32,
    pub gpu_peak_tflops: f64,
    pub gpu_power_max_w: f64,
    pub gpu_power_min_w: f64,
    pub gpu_idle_w: f64,
    /// Per-GPU NVLink bandwidth, GB/s.
    pub nvlink_bw: f64,
    /// PCIe bandwidth between a NIC and the CPU complex, GB/s (one link per NIC).
    pub host_link_bw: f64,
    pub nic_count: u32,
    pub ports_per_nic: u32,
    pub nic_port_gbps: f64,
    /// NICs attached to the separate storage fabric.
    pub storage_nic_count: u32,
    pub storage_nic_gbps: f64,
    pub dram_gb: f64,
    pub local_nvme_gb: f64,
    /// Fractional compute overhead from the virtualization layer.
    pub virt_overhead: f64,
}

impl Default for NodeSpec {
    fn default() -> Self {
        NodeSpec::vela()
    }
}

impl NodeSpec {
    /// Eight A100-80GB, four dual-port 100G NICs, PCIe Gen4 host links.
    pub fn vela() -> Self {
        NodeSpec {
            gpus_per_node: 8,
            gpu_peak_tflops: 312.0,
            gpu_power_max_w: 400.0,
            gpu_power_min_w: 150.0,
            gpu_idle_w: 60.0,
            nvlink_bw: 300.0,
            host_link_bw: 32.0,
            nic_count: 4,
            ports_per_nic: 2,
            nic_port_gbps: 100.0,
            storage_nic_count: 0,
            storage_nic_gbps: 0.0,
            dram_gb: 1536.0,
            local_nvme_gb: 4.0 * 3200.0,
            virt_overhead: 0.05,
        }
    }

    /// Eight H100, eight 400G compute HCAs (one per rail), two 400G storage HCAs.
    pub fn blue_vela() -> Self {
        NodeSpec {
            gpus_per_node: 8,
            gpu_peak_tflops: 989.0,
            gpu_power_max_w: 700.0,
            gpu_power_min_w: 200.0,
            gpu_idle_w: 70.0,
            nvlink_bw: 450.0,
            host_link_bw: 64.0,
            nic_count: 8,
            ports_per_nic: 1,
            nic_port_gbps: 400.0,
            storage_nic_count: 2,
            storage_nic_gbps: 400.0,
            dram_gb: 2048.0,
            local_nvme_gb: 8.0 * 3400.0,
            virt_overhead: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |m: &str| Err(TopologyError::InvalidParameter(m.to_string()));
        if self.gpus_per_node == 0 {
            return bad("gpus_per_node must be > 0");
        }
        if !(self.nvlink_bw > 0.0 && self.host_link_bw > 0.0 && self.nic_port_gbps > 0.0) {
            return bad("bandwidths must be > 0");
        }
        if !(self.gpu_power_min_w < self.gpu_power_max_w) {
            return bad("gpu_power_min_w must be below gpu_power_max_w");
        }
        if !(0.0..=1.0).contains(&self.virt_overhead) {
            return bad("virt_overhead must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn ports(&self) -> u32 {
        self.nic_count * self.ports_per_nic
    }

    /// Aggregate compute-fabric injection bandwidth, GB/s.
    pub fn nic_aggregate_gbytes(&self) -> f64 {
        self.ports() as f64 * self.nic_port_gbps / 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchRole {
    Tor,
    Spine,
    Leaf,
    Core,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSpec {
    pub port_count: u32,
    pub port_gbps: f64,
    pub buffer_per_port: f64,
    pub forwarding_latency: f64,
}

impl SwitchSpec {
    pub fn ethernet_100g() -> Self {
        SwitchSpec {
            port_count: 32,
            port_gbps: 100.0,
            buffer_per_port: 8.0 * 1024.0 * 1024.0,
            forwarding_latency: 500e-9,
        }
    }

    pub fn ethernet_spine_100g() -> Self {
        SwitchSpec {
            port_count: 128,
            ..Self::ethernet_100g()
        }
    }

    pub fn infiniband_ndr() -> Self {
        SwitchSpec {
            port_count: 64,
            port_gbps: 400.0,
            buffer_per_port: 16.0 * 1024.0 * 1024.0,
            forwarding_latency: 300e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vertex {
    Host(NodeId),
    Nic(NodeId, u32),
    Switch(SwitchId),
    StorageFabric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    /// PCIe between the CPU complex and a NIC.
    Host { node: NodeId, nic: u32 },
    /// NIC port cable to its first-hop switch.
    Access { node: NodeId, nic: u32, port: u32 },
    Fabric,
    Storage { node: NodeId, index: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub from: Vertex,
    pub to: Vertex,
    pub kind: LinkKind,
    pub nominal_gbps: f64,
    pub latency: f64,
    pub down_refs: u32,
    pub scale: f64,
}

impl Link {
    pub fn is_up(&self) -> bool {
        self.down_refs == 0
    }

    /// Usable capacity in Gb/s (zero when down).
    pub fn capacity_gbps(&self) -> f64 {
        if self.is_up() {
            self.nominal_gbps * self.scale
        } else {
            0.0
        }
    }

    pub fn capacity_gbytes(&self) -> f64 {
        self.capacity_gbps() / 8.0
    }

    pub fn reverse_id(&self) -> LinkId {
        self.id ^ 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub name: String,
    pub rack: usize,
    pub scalable_unit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchInfo {
    pub id: SwitchId,
    pub name: String,
    pub role: SwitchRole,
    pub spec: SwitchSpec,
    /// Rack for TORs, rail plane for fat-tree leaves and spines.
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Clos,
    FatTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentId {
    Link(LinkId),
    Switch(SwitchId),
    Port { node: NodeId, nic: u32, port: u32 },
    Nic { node: NodeId, nic: u32 },
    HostLink { node: NodeId, nic: u32 },
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaChange {
    LinkDown,
    LinkUp,
    BwScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyDelta {
    pub component: ComponentId,
    pub change: DeltaChange,
}

impl TopologyDelta {
    pub fn down(component: ComponentId) -> Self {
        TopologyDelta { component, change: DeltaChange::LinkDown }
    }
    pub fn up(component: ComponentId) -> Self {
        TopologyDelta { component, change: DeltaChange::LinkUp }
    }
    pub fn scale(component: ComponentId, factor: f64) -> Self {
        TopologyDelta { component, change: DeltaChange::BwScale(factor) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub kind: TopologyKind,
    pub node_spec: NodeSpec,
    pub nodes: Vec<NodeInfo>,
    pub switches: Vec<SwitchInfo>,
    pub links: Vec<Link>,
    pub racks: Vec<Vec<NodeId>>,
    /// Rail index to the leaf switches of that rail plane (fat tree only).
    pub rails: Vec<Vec<SwitchId>>,
    pub scalable_units: Vec<Vec<NodeId>>,
    #[serde(skip)]
    adjacency: HashMap<Vertex, Vec<LinkId>>,
    /// Bumped on every applied delta; route caches key on it.
    #[serde(skip)]
    version: u64,
}

impl ClusterTopology {
    pub(crate) fn empty(kind: TopologyKind, node_spec: NodeSpec) -> Self {
        ClusterTopology {
            kind,
            node_spec,
            nodes: Vec::new(),
            switches: Vec::new(),
            links: Vec::new(),
            racks: Vec::new(),
            rails: Vec::new(),
            scalable_units: Vec::new(),
            adjacency: HashMap::new(),
            version: 0,
        }
    }

    pub(crate) fn add_node(&mut self, rack: usize, scalable_unit: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(NodeInfo {
            id,
            name: format!("node{id:04}"),
            rack,
            scalable_unit,
        });
        id
    }

    pub(crate) fn add_switch(&mut self, role: SwitchRole, spec: SwitchSpec, group: usize, name: String) -> SwitchId {
        let id = self.switches.len();
        self.switches.push(SwitchInfo { id, name, role, spec, group });
        id
    }

    /// Adds a bidirectional cable, returning the forward link id.
    pub(crate) fn add_cable(&mut self, a: Vertex, b: Vertex, gbps: f64, latency: f64, kind: LinkKind) -> LinkId {
        let fwd = self.links.len();
        for (id, from, to) in [(fwd, a, b), (fwd + 1, b, a)] {
            self.links.push(Link {
                id,
                from,
                to,
                kind,
                nominal_gbps: gbps,
                latency,
                down_refs: 0,
                scale: 1.0,
            });
            self.adjacency.entry(from).or_default().push(id);
        }
        fwd
    }

    /// Recomputes the adjacency index, e.g. after deserializing.
    pub fn rebuild_adjacency(&mut self) {
        self.adjacency.clear();
        for l in &self.links {
            self.adjacency.entry(l.from).or_default().push(l.id);
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn gpu_count(&self) -> usize {
        self.nodes.len() * self.node_spec.gpus_per_node as usize
    }

    pub fn out_links(&self, v: Vertex) -> &[LinkId] {
        self.adjacency.get(&v).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn switch_latency(&self, v: Vertex) -> f64 {
        match v {
            Vertex::Switch(s) => self.switches[s].spec.forwarding_latency,
            _ => 0.0,
        }
    }

    /// Propagation plus forwarding latency along an ordered list of links.
    pub fn path_latency(&self, path: &[LinkId]) -> f64 {
        path.iter()
            .map(|&l| {
                let link = &self.links[l];
                link.latency + self.switch_latency(link.to)
            })
            .sum()
    }

    pub fn access_links(&self, node: NodeId) -> impl Iterator<Item = &Link> + '_ {
        self.links.iter().filter(move |l| {
            matches!(l.kind, LinkKind::Access { node: n, .. } if n == node) && matches!(l.from, Vertex::Nic(..))
        })
    }

    /// Sum of usable egress port capacity of one node, Gb/s.
    pub fn node_injection_gbps(&self, node: NodeId) -> f64 {
        self.access_links(node).map(Link::capacity_gbps).sum()
    }

    pub fn nic_injection_gbps(&self, node: NodeId, nic: u32) -> f64 {
        self.access_links(node)
            .filter(|l| matches!(l.kind, LinkKind::Access { nic: n, .. } if n == nic))
            .map(Link::capacity_gbps)
            .sum()
    }

    /// Egress link of a particular NIC port.
    pub fn port_link(&self, node: NodeId, nic: u32, port: u32) -> Option<LinkId> {
        self.out_links(Vertex::Nic(node, nic)).iter().copied().find(|&l| {
            matches!(self.links[l].kind, LinkKind::Access { port: p, .. } if p == port)
        })
    }

    pub fn host_link(&self, node: NodeId, nic: u32) -> Option<LinkId> {
        self.out_links(Vertex::Host(node))
            .iter()
            .copied()
            .find(|&l| self.links[l].to == Vertex::Nic(node, nic))
    }

    /// Switches one hop away from the node's NIC ports, considering only up links.
    pub fn first_hop_switches(&self, node: NodeId, nic: Option<u32>) -> Vec<SwitchId> {
        let mut out: Vec<SwitchId> = self
            .access_links(node)
            .filter(|l| l.is_up())
            .filter(|l| match (nic, l.kind) {
                (Some(want), LinkKind::Access { nic, .. }) => nic == want,
                _ => true,
            })
            .filter_map(|l| match l.to {
                Vertex::Switch(s) => Some(s),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Total capacity leaving a switch towards other switches, Gb/s.
    pub fn switch_uplink_gbps(&self, sw: SwitchId) -> f64 {
        self.out_links(Vertex::Switch(sw))
            .iter()
            .map(|&l| &self.links[l])
            .filter(|l| matches!(l.to, Vertex::Switch(_)))
            .map(Link::capacity_gbps)
            .sum()
    }

    /// Cross-rack capacity of one rack: the sum of its TORs' uplinks, Gb/s.
    pub fn rack_cross_capacity_gbps(&self, rack: usize) -> f64 {
        self.switches
            .iter()
            .filter(|s| s.role == SwitchRole::Tor && s.group == rack)
            .map(|s| self.switch_uplink_gbps(s.id))
            .sum()
    }

    fn links_of_component(&self, c: ComponentId) -> Result<Vec<LinkId>, TopologyError> {
        let unknown = || TopologyError::UnknownComponent(c);
        let both = |ids: &mut Vec<LinkId>| {
            let mut all: Vec<LinkId> = ids.iter().flat_map(|&l| [l, l ^ 1]).collect();
            all.sort_unstable();
            all.dedup();
            all
        };
        let mut ids: Vec<LinkId> = match c {
            ComponentId::Link(l) => {
                if l >= self.links.len() {
                    return Err(unknown());
                }
                vec![l]
            }
            ComponentId::Switch(s) => {
                if s >= self.switches.len() {
                    return Err(unknown());
                }
                self.out_links(Vertex::Switch(s)).to_vec()
            }
            ComponentId::Port { node, nic, port } => {
                vec![self.port_link(node, nic, port).ok_or_else(unknown)?]
            }
            ComponentId::Nic { node, nic } => {
                let v: Vec<LinkId> = self
                    .links
                    .iter()
                    .filter(|l| matches!(l.kind, LinkKind::Access { node: n, nic: i, .. } if n == node && i == nic))
                    .map(|l| l.id)
                    .collect();
                if v.is_empty() {
                    return Err(unknown());
                }
                v
            }
            ComponentId::HostLink { node, nic } => vec![self.host_link(node, nic).ok_or_else(unknown)?],
            ComponentId::Node(node) => {
                if node >= self.nodes.len() {
                    return Err(unknown());
                }
                self.links
                    .iter()
                    .filter(|l| match l.kind {
                        LinkKind::Access { node: n, .. } | LinkKind::Storage { node: n, .. } => n == node,
                        _ => false,
                    })
                    .map(|l| l.id)
                    .collect()
            }
        };
        Ok(both(&mut ids))
    }

    /// Applies a delta in place and returns the links it touched.
    pub fn apply_delta(&mut self, delta: &TopologyDelta) -> Result<Vec<LinkId>, TopologyError> {
        if let DeltaChange::BwScale(f) = delta.change {
            if !(f > 0.0 && f <= 1.0) {
                return Err(TopologyError::InvalidParameter(format!("scale factor {f} outside (0, 1]")));
            }
        }
        let ids = self.links_of_component(delta.component)?;
        for &id in &ids {
            let link = &mut self.links[id];
            match delta.change {
                DeltaChange::LinkDown => link.down_refs += 1,
                DeltaChange::LinkUp => link.down_refs = link.down_refs.saturating_sub(1),
                DeltaChange::BwScale(f) => link.scale = f,
            }
        }
        self.version += 1;
        Ok(ids)
    }

    /// Tabular text dump used by the `describe` command.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# topology kind={:?} nodes={} switches={} links={} gpus={}",
            self.kind, self.nodes.len(), self.switches.len(), self.links.len(), self.gpu_count());
        let _ = writeln!(out, "\n[nodes]\nid\tname\track\tscalable_unit\tinjection_gbps");
        for n in &self.nodes {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:.1}", n.id, n.name, n.rack, n.scalable_unit, self.node_injection_gbps(n.id));
        }
        let _ = writeln!(out, "\n[switches]\nid\tname\trole\tgroup\tports\tport_gbps\tbuffer_bytes");
        for s in &self.switches {
            let _ = writeln!(out, "{}\t{}\t{:?}\t{}\t{}\t{}\t{}", s.id, s.name, s.role, s.group,
                s.spec.port_count, s.spec.port_gbps, s.spec.buffer_per_port);
        }
        let _ = writeln!(out, "\n[links]\nid\tfrom\tto\tgbps\tlatency_s\tup\tscale");
        for l in &self.links {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:e}\t{}\t{}", l.id, self.vertex_name(l.from),
                self.vertex_name(l.to), l.nominal_gbps, l.latency, l.is_up(), l.scale);
        }
        out
    }

    pub fn vertex_name(&self, v: Vertex) -> String {
        match v {
            Vertex::Host(n) => self.nodes[n].name.clone(),
            Vertex::Nic(n, i) => format!("{}/nic{}", self.nodes[n].name, i),
            Vertex::Switch(s) => self.switches[s].name.clone(),
            Vertex::StorageFabric => "storage".to_string(),
        }
    }
}
