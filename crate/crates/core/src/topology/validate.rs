use std::collections::HashMap;

use serde::Serialize;

use super::{ClusterTopology, FlowNetwork, LinkKind, NodeId, TopologyKind, Vertex};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualHomingCheck {
    pub nics_checked: usize,
    /// `(node, nic)` pairs whose ports reach fewer than two distinct switches.
    pub violations: Vec<(NodeId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonBlockingCheck {
    pub side_a: Vec<NodeId>,
    /// Injection bandwidth of the lighter side, Gb/s.
    pub required_gbps: f64,
    pub max_flow_gbps: f64,
    /// `required / max_flow`; 1.0 means non-blocking.
    pub oversubscription: f64,
}

impl NonBlockingCheck {
    pub fn passed(&self) -> bool {
        self.max_flow_gbps >= self.required_gbps * (1.0 - 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub dual_homing: Option<DualHomingCheck>,
    pub non_blocking: Option<NonBlockingCheck>,
    pub orphans: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.dual_homing.as_ref().is_none_or(|d| d.violations.is_empty())
            && self.non_blocking.as_ref().is_none_or(NonBlockingCheck::passed)
            && self.orphans.is_empty()
    }
}

/// Dual-homing applies to Clos builds, the non-blocking cut check to fat trees.
pub fn validate_topology(topo: &ClusterTopology) -> ValidationReport {
    let dual_homing = (topo.kind == TopologyKind::Clos).then(|| dual_homing(topo));
    let non_blocking = (topo.kind == TopologyKind::FatTree && topo.node_count() >= 2).then(|| {
        let half: Vec<NodeId> = (0..topo.node_count() / 2).collect();
        bisection_check(topo, &half)
    });
    ValidationReport {
        dual_homing,
        non_blocking,
        orphans: orphans(topo),
    }
}

fn dual_homing(topo: &ClusterTopology) -> DualHomingCheck {
    let mut violations = Vec::new();
    let mut checked = 0;
    for n in 0..topo.node_count() {
        for nic in 0..topo.node_spec.nic_count {
            checked += 1;
            if topo.first_hop_switches(n, Some(nic)).len() < 2 {
                violations.push((n, nic));
            }
        }
    }
    DualHomingCheck { nics_checked: checked, violations }
}

fn orphans(topo: &ClusterTopology) -> Vec<String> {
    let mut out = Vec::new();
    for n in &topo.nodes {
        if topo.first_hop_switches(n.id, None).is_empty() {
            out.push(format!("node {} has no usable fabric port", n.name));
        }
    }
    for s in &topo.switches {
        if topo.out_links(Vertex::Switch(s.id)).is_empty() {
            out.push(format!("switch {} has no links", s.name));
        }
    }
    out
}

/// Max-flow from the nodes in `side_a` to all other nodes. Hosts and NICs
/// never carry transit traffic.
pub fn bisection_check(topo: &ClusterTopology, side_a: &[NodeId]) -> NonBlockingCheck {
    let in_a: Vec<bool> = {
        let mut v = vec![false; topo.node_count()];
        for &n in side_a {
            v[n] = true;
        }
        v
    };
    let mut net = FlowNetwork::new(0);
    let mut index: HashMap<Vertex, usize> = HashMap::new();
    let mut id = |v: Vertex, net: &mut FlowNetwork| *index.entry(v).or_insert_with(|| net.add_vertex());
    let source = net.add_vertex();
    let sink = net.add_vertex();

    for l in &topo.links {
        if !l.is_up() {
            continue;
        }
        let keep = match (l.kind, l.from) {
            (LinkKind::Storage { .. }, _) => false,
            (LinkKind::Host { node, .. }, Vertex::Host(_)) => in_a[node],
            (LinkKind::Host { node, .. }, _) => !in_a[node],
            (LinkKind::Access { node, .. }, Vertex::Nic(..)) => in_a[node],
            (LinkKind::Access { node, .. }, _) => !in_a[node],
            (LinkKind::Fabric, _) => true,
        };
        if keep {
            let a = id(l.from, &mut net);
            let b = id(l.to, &mut net);
            net.add_edge(a, b, l.capacity_gbps());
        }
    }
    let (mut inj_a, mut inj_b) = (0.0, 0.0);
    for n in 0..topo.node_count() {
        let inj = topo.node_injection_gbps(n);
        let h = id(Vertex::Host(n), &mut net);
        if in_a[n] {
            inj_a += inj;
            net.add_edge(source, h, inj);
        } else {
            inj_b += inj;
            net.add_edge(h, sink, inj);
        }
    }
    let required = f64::min(inj_a, inj_b);
    let flow = net.max_flow(source, sink);
    NonBlockingCheck {
        side_a: side_a.to_vec(),
        required_gbps: required,
        max_flow_gbps: flow,
        oversubscription: if flow > 0.0 { required / flow } else { f64::INFINITY },
    }
}
