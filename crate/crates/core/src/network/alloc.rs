use std::collections::HashMap;

use super::{links_of, FlowState, PathModelParams, Protocol};
use crate::topology::{ClusterTopology, LinkId};

/// One flow's consumption of shared resources: `(resource index, weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    pub usage: Vec<(usize, f64)>,
    /// Sender-side ceiling; `f64::INFINITY` when unconstrained.
    pub limit: f64,
}

const REL_EPS: f64 = 1e-12;

/// Weighted progressive filling. A resource with capacity `c` constrains
/// `sum(weight * rate) <= c`. A flow with no positive-weight resource and no
/// limit gets an infinite rate.
pub fn max_min_allocate(capacity: &[f64], demands: &[Demand]) -> Vec<f64> {
    let n = demands.len();
    let mut rate = vec![0.0; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut used = vec![0.0; capacity.len()];
    loop {
        let mut weight = vec![0.0; capacity.len()];
        let mut any = false;
        for (f, d) in demands.iter().enumerate() {
            if active[f] {
                any = true;
                for &(r, w) in &d.usage {
                    weight[r] += w;
                }
            }
        }
        if !any {
            break;
        }
        let mut inc = f64::INFINITY;
        for r in 0..capacity.len() {
            if weight[r] > 0.0 {
                inc = inc.min(((capacity[r] - used[r]) / weight[r]).max(0.0));
            }
        }
        for (f, d) in demands.iter().enumerate() {
            if active[f] {
                inc = inc.min((d.limit - rate[f]).max(0.0));
            }
        }
        if inc.is_infinite() {
            for f in 0..n {
                if active[f] {
                    rate[f] = f64::INFINITY;
                }
            }
            break;
        }
        for (f, d) in demands.iter().enumerate() {
            if active[f] {
                rate[f] += inc;
                for &(r, w) in &d.usage {
                    used[r] += w * inc;
                }
            }
        }
        let saturated: Vec<bool> = (0..capacity.len())
            .map(|r| weight[r] > 0.0 && capacity[r] - used[r] <= REL_EPS * capacity[r].max(1.0))
            .collect();
        for (f, d) in demands.iter().enumerate() {
            if active[f]
                && (rate[f] >= d.limit * (1.0 - REL_EPS) || d.usage.iter().any(|&(r, w)| w > 0.0 && saturated[r]))
            {
                active[f] = false;
            }
        }
    }
    rate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Resource {
    Link(LinkId),
    AttachTx(usize, u32, u32, Protocol),
    AttachRx(usize, u32, u32, Protocol),
}

/// Max-min fair rates for routed flows, honouring link capacities, per-port
/// protocol attach caps and host-link copy penalties. Unrouted flows get 0.
pub fn allocate_rates(flows: &mut [FlowState], topo: &ClusterTopology, params: &PathModelParams) {
    let mut index: HashMap<Resource, usize> = HashMap::new();
    let mut capacity: Vec<f64> = Vec::new();
    let mut slot = |r: Resource, cap: f64, capacity: &mut Vec<f64>| {
        *index.entry(r).or_insert_with(|| {
            capacity.push(cap);
            capacity.len() - 1
        })
    };
    let mut demands = Vec::with_capacity(flows.len());
    for f in flows.iter() {
        let Some(path) = &f.path else {
            demands.push(Demand { usage: Vec::new(), limit: 0.0 });
            continue;
        };
        let q = params.get(f.protocol);
        let mut usage = Vec::new();
        for l in links_of(path) {
            usage.push((slot(Resource::Link(l), topo.link(l).capacity_gbytes(), &mut capacity), 1.0));
        }
        if q.copy_penalty > 0.0 {
            for l in [path.host_src, path.host_dst] {
                usage.push((slot(Resource::Link(l), topo.link(l).capacity_gbytes(), &mut capacity), q.copy_penalty));
            }
        }
        let (s, d) = (path.src, path.dst);
        usage.push((slot(Resource::AttachTx(s.node, s.nic, s.port, f.protocol), q.attach_cap, &mut capacity), 1.0));
        usage.push((slot(Resource::AttachRx(d.node, d.nic, d.port, f.protocol), q.attach_cap, &mut capacity), 1.0));
        demands.push(Demand { usage, limit: f.rate_limit });
    }
    let rates = max_min_allocate(&capacity, &demands);
    for (f, r) in flows.iter_mut().zip(rates) {
        f.allocated_rate = r;
    }
}

/// Checks that no link carries more than its capacity. Returns the first
/// violating link and its load.
pub fn check_link_conservation(
    flows: &[FlowState],
    topo: &ClusterTopology,
    params: &PathModelParams,
) -> Result<(), (LinkId, f64)> {
    let mut load: HashMap<LinkId, f64> = HashMap::new();
    for f in flows {
        let Some(path) = &f.path else { continue };
        for l in links_of(path) {
            *load.entry(l).or_default() += f.allocated_rate;
        }
        let w = params.get(f.protocol).copy_penalty;
        if w > 0.0 {
            for l in [path.host_src, path.host_dst] {
                *load.entry(l).or_default() += w * f.allocated_rate;
            }
        }
    }
    let mut links: Vec<_> = load.into_iter().collect();
    links.sort_by_key(|&(l, _)| l);
    for (l, v) in links {
        let cap = topo.link(l).capacity_gbytes();
        if v > cap * (1.0 + 1e-9) + 1e-12 {
            return Err((l, v));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::topology::{build_vela_topology, ComponentId, TopologyDelta, VelaParams};

    fn d(usage: &[(usize, f64)]) -> Demand {
        Demand { usage: usage.to_vec(), limit: f64::INFINITY }
    }

    #[test]
    fn single_flow_saturates() {
        assert_eq!(max_min_allocate(&[12.5], &[d(&[(0, 1.0)])]), vec![12.5]);
    }

    #[test]
    fn two_flows_split_a_bottleneck() {
        assert_eq!(max_min_allocate(&[10.0], &[d(&[(0, 1.0)]), d(&[(0, 1.0)])]), vec![5.0, 5.0]);
    }

    #[test]
    fn limits_release_capacity_to_others() {
        let mut a = d(&[(0, 1.0)]);
        a.limit = 2.0;
        assert_eq!(max_min_allocate(&[10.0], &[a, d(&[(0, 1.0)])]), vec![2.0, 8.0]);
    }

    #[test]
    fn weights_count_double() {
        let r = max_min_allocate(&[12.0], &[d(&[(0, 2.0)]), d(&[(0, 1.0)])]);
        assert!((r[0] - 4.0).abs() < 1e-12 && (r[1] - 4.0).abs() < 1e-12);
    }

    fn gdr(id: u64, a: usize, b: usize, nic: u32, port: u32) -> FlowState {
        FlowState::new(id, Endpoint::new(a, nic, port), Endpoint::new(b, nic, port), 1e9, Protocol::Gdr, 12.5)
    }

    #[test]
    fn idle_port_gives_line_rate_when_attach_cap_is_high() {
        let t = build_vela_topology(&VelaParams::new(1, 2, 4, 4)).unwrap();
        let mut params = PathModelParams::default();
        params.gdr.attach_cap = 100.0;
        let mut flows = vec![gdr(0, 0, 1, 0, 0)];
        route_all(&mut flows, &t, 0).unwrap();
        allocate_rates(&mut flows, &t, &params);
        assert_eq!(flows[0].allocated_rate, 12.5);
    }

    #[test]
    fn attach_cap_is_shared_per_port() {
        let t = build_vela_topology(&VelaParams::new(1, 3, 4, 4)).unwrap();
        let params = PathModelParams::default();
        let mut flows = vec![gdr(0, 0, 1, 0, 0), gdr(1, 0, 2, 0, 0)];
        route_all(&mut flows, &t, 0).unwrap();
        allocate_rates(&mut flows, &t, &params);
        assert_eq!(flows[0].allocated_rate, 3.125 / 2.0);
        assert_eq!(flows[1].allocated_rate, 3.125 / 2.0);
    }

    #[test]
    fn port_loss_halves_nic_throughput() {
        let mut t = build_vela_topology(&VelaParams::new(1, 2, 4, 4)).unwrap();
        let params = PathModelParams::default();
        let mk = || vec![gdr(0, 0, 1, 0, 0), gdr(1, 0, 1, 0, 1)];
        let mut flows = mk();
        route_all(&mut flows, &t, 0).unwrap();
        allocate_rates(&mut flows, &t, &params);
        let before: f64 = flows.iter().map(|f| f.allocated_rate).sum();
        t.apply_delta(&TopologyDelta::down(ComponentId::Port { node: 0, nic: 0, port: 1 })).unwrap();
        let mut flows = mk();
        route_all(&mut flows, &t, 0).unwrap();
        allocate_rates(&mut flows, &t, &params);
        let after: f64 = flows.iter().map(|f| f.allocated_rate).sum();
        assert_eq!(after, before / 2.0);
        check_link_conservation(&flows, &t, &params).unwrap();
    }

    #[test]
    fn tcp_host_link_counts_twice() {
        let mut t = build_vela_topology(&VelaParams::new(1, 2, 4, 4)).unwrap();
        t.apply_delta(&TopologyDelta::scale(ComponentId::HostLink { node: 0, nic: 0 }, 0.125)).unwrap();
        let mut params = PathModelParams::default();
        params.tcp.attach_cap = 100.0;
        let mut flows = vec![FlowState::new(0, Endpoint::new(0, 0, 0), Endpoint::new(1, 0, 0), 1e9, Protocol::Tcp, 12.5)];
        route_all(&mut flows, &t, 0).unwrap();
        allocate_rates(&mut flows, &t, &params);
        assert!((flows[0].allocated_rate - 2.0).abs() < 1e-12);
    }
}
