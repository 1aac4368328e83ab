use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use super::{Endpoint, FlowState, NetworkError};
use crate::simcore::mix64;
use crate::topology::{ClusterTopology, LinkId, SwitchId, Vertex};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Path {
    /// Ports actually used, after any fallback.
    pub src: Endpoint,
    pub dst: Endpoint,
    /// Source NIC to destination NIC, in order.
    pub links: Vec<LinkId>,
    /// Host to NIC on the sender.
    pub host_src: LinkId,
    /// NIC to host on the receiver.
    pub host_dst: LinkId,
    pub latency: f64,
}

impl Path {
    pub fn switch_hops(&self) -> usize {
        self.links.len().saturating_sub(1)
    }
}

fn hash(flow: u64, salt: u64, hop: u64) -> u64 {
    mix64(flow ^ mix64(salt.wrapping_add(mix64(hop))))
}

/// Up ports usable for an endpoint: the preferred one first, then the NIC's
/// other ports, then every other NIC, each group rotated by the flow hash.
fn port_candidates(topo: &ClusterTopology, ep: Endpoint, h: u64) -> Vec<(Endpoint, LinkId)> {
    let spec = &topo.node_spec;
    let up = |nic: u32, port: u32| {
        topo.port_link(ep.node, nic, port)
            .filter(|&l| topo.link(l).is_up())
            .map(|l| (Endpoint::new(ep.node, nic, port), l))
    };
    let rotate = |mut v: Vec<(Endpoint, LinkId)>| {
        if !v.is_empty() {
            let k = (h % v.len() as u64) as usize;
            v.rotate_left(k);
        }
        v
    };
    let mut out: Vec<_> = up(ep.nic, ep.port).into_iter().collect();
    let same: Vec<_> = (0..spec.ports_per_nic).filter(|&p| p != ep.port).filter_map(|p| up(ep.nic, p)).collect();
    out.extend(rotate(same));
    let other: Vec<_> = (0..spec.nic_count)
        .filter(|&n| n != ep.nic)
        .flat_map(|n| (0..spec.ports_per_nic).map(move |p| (n, p)))
        .filter_map(|(n, p)| up(n, p))
        .collect();
    out.extend(rotate(other));
    out
}

/// Hop distance from every switch to `target` over live switch-to-switch links.
fn distances_to(topo: &ClusterTopology, target: SwitchId) -> Vec<u32> {
    let mut dist = vec![u32::MAX; topo.switches.len()];
    dist[target] = 0;
    let mut q = VecDeque::from([target]);
    while let Some(s) = q.pop_front() {
        for &l in topo.out_links(Vertex::Switch(s)) {
            let link = topo.link(l);
            if let Vertex::Switch(n) = link.to {
                if link.is_up() && dist[n] == u32::MAX {
                    dist[n] = dist[s] + 1;
                    q.push_back(n);
                }
            }
        }
    }
    dist
}

fn switch_of(topo: &ClusterTopology, l: LinkId) -> SwitchId {
    match topo.link(l).to {
        Vertex::Switch(s) => s,
        v => unreachable!("access link ends at {v:?}"),
    }
}

/// Shortest path over live links. Among equal-cost next hops the choice is a
/// hash of `(flow id, salt, hop index)`, so it is a pure function of those and
/// the live topology. Transit never crosses hosts, NICs or the storage fabric.
pub fn select_path_ecmp(flow: &FlowState, topo: &ClusterTopology, salt: u64) -> Result<Path, NetworkError> {
    let (src, dst) = (flow.src, flow.dst);
    if src.node == dst.node {
        return Err(NetworkError::InvalidParameter(format!("flow {} stays on node {}", flow.id, src.node)));
    }
    let no_path = || NetworkError::NoPath { src: src.node, dst: dst.node };
    if src.node >= topo.node_count() || dst.node >= topo.node_count() {
        return Err(no_path());
    }
    let srcs = port_candidates(topo, src, hash(flow.id, salt, u64::MAX));
    let dsts = port_candidates(topo, dst, hash(flow.id, salt, u64::MAX - 1));
    let mut cache: HashMap<SwitchId, Vec<u32>> = HashMap::new();
    for &(s_ep, s_link) in &srcs {
        let s_sw = switch_of(topo, s_link);
        for &(d_ep, d_link) in &dsts {
            let d_sw = switch_of(topo, d_link);
            let dist = cache.entry(d_sw).or_insert_with(|| distances_to(topo, d_sw));
            if dist[s_sw] == u32::MAX {
                continue;
            }
            let mut links = vec![s_link];
            let mut cur = s_sw;
            let mut hop = 0u64;
            while cur != d_sw {
                let next: Vec<LinkId> = topo
                    .out_links(Vertex::Switch(cur))
                    .iter()
                    .copied()
                    .filter(|&l| {
                        let link = topo.link(l);
                        link.is_up() && matches!(link.to, Vertex::Switch(n) if dist[n] + 1 == dist[cur])
                    })
                    .collect();
                let pick = next[(hash(flow.id, salt, hop) % next.len() as u64) as usize];
                links.push(pick);
                cur = switch_of(topo, pick);
                hop += 1;
            }
            links.push(d_link ^ 1);
            let host_src = topo.host_link(src.node, s_ep.nic).ok_or_else(no_path)?;
            let host_dst = topo.host_link(dst.node, d_ep.nic).ok_or_else(no_path)? ^ 1;
            let latency = topo.path_latency(&links);
            return Ok(Path { src: s_ep, dst: d_ep, links, host_src, host_dst, latency });
        }
    }
    Err(no_path())
}
