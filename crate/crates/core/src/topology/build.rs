use serde::{Deserialize, Serialize};

use super::{
    ClusterTopology, LinkKind, NodeSpec, SwitchRole, SwitchSpec, TopologyError, TopologyKind, Vertex,
};

/// Cable propagation plus serialization latency, seconds.
const CABLE_LATENCY: f64 = 100e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelaParams {
    pub racks: usize,
    pub servers_per_rack: usize,
    pub spines: usize,
    /// Parallel links from every TOR to every spine.
    pub uplinks_per_spine: usize,
    pub node: NodeSpec,
    pub tor: SwitchSpec,
    pub spine: SwitchSpec,
}

impl VelaParams {
    pub fn new(racks: usize, servers_per_rack: usize, nics: u32, spines: usize) -> Self {
        VelaParams {
            racks,
            servers_per_rack,
            spines,
            uplinks_per_spine: 2,
            node: NodeSpec { nic_count: nics, ..NodeSpec::vela() },
            tor: SwitchSpec::ethernet_100g(),
            spine: SwitchSpec::ethernet_spine_100g(),
        }
    }
}

/// Two-level Clos. Port `p` of every NIC in a rack lands on that rack's TOR `p`,
/// so each NIC is dual-homed when it has two ports. Every TOR has
/// `uplinks_per_spine` links to every spine.
pub fn build_vela_topology(p: &VelaParams) -> Result<ClusterTopology, TopologyError> {
    p.node.validate()?;
    if p.racks == 0 || p.servers_per_rack == 0 || p.spines == 0 || p.node.nic_count == 0 || p.uplinks_per_spine == 0 {
        return Err(TopologyError::InfeasibleRadix("all counts must be > 0".into()));
    }
    let tors_per_rack = p.node.ports_per_nic as usize;
    let tor_down = p.servers_per_rack * p.node.nic_count as usize;
    let tor_up = p.spines * p.uplinks_per_spine;
    if tor_down + tor_up > p.tor.port_count as usize {
        return Err(TopologyError::InfeasibleRadix(format!(
            "TOR needs {tor_down} down + {tor_up} up ports, has {}",
            p.tor.port_count
        )));
    }
    let spine_ports = p.racks * tors_per_rack * p.uplinks_per_spine;
    if spine_ports > p.spine.port_count as usize {
        return Err(TopologyError::InfeasibleRadix(format!(
            "spine needs {spine_ports} ports, has {}",
            p.spine.port_count
        )));
    }

    let mut t = ClusterTopology::empty(TopologyKind::Clos, p.node.clone());
    let spines: Vec<_> = (0..p.spines)
        .map(|s| t.add_switch(SwitchRole::Spine, p.spine.clone(), 0, format!("spine{s}")))
        .collect();
    for rack in 0..p.racks {
        let tors: Vec<_> = (0..tors_per_rack)
            .map(|k| t.add_switch(SwitchRole::Tor, p.tor.clone(), rack, format!("tor{rack}{}", (b'a' + k as u8) as char)))
            .collect();
        let mut members = Vec::with_capacity(p.servers_per_rack);
        for _ in 0..p.servers_per_rack {
            let node = t.add_node(rack, 0);
            members.push(node);
            attach_node(&mut t, node, |_, port| tors[port as usize]);
        }
        t.racks.push(members);
        for &tor in &tors {
            for &spine in &spines {
                for _ in 0..p.uplinks_per_spine {
                    t.add_cable(Vertex::Switch(tor), Vertex::Switch(spine), p.tor.port_gbps, CABLE_LATENCY, LinkKind::Fabric);
                }
            }
        }
    }
    t.scalable_units = vec![(0..t.nodes.len()).collect()];
    Ok(t)
}

fn attach_node(t: &mut ClusterTopology, node: usize, mut switch_for: impl FnMut(u32, u32) -> usize) {
    let spec = t.node_spec.clone();
    for nic in 0..spec.nic_count {
        t.add_cable(
            Vertex::Host(node),
            Vertex::Nic(node, nic),
            spec.host_link_bw * 8.0,
            0.0,
            LinkKind::Host { node, nic },
        );
        for port in 0..spec.ports_per_nic {
            let sw = switch_for(nic, port);
            t.add_cable(
                Vertex::Nic(node, nic),
                Vertex::Switch(sw),
                spec.nic_port_gbps,
                CABLE_LATENCY,
                LinkKind::Access { node, nic, port },
            );
        }
    }
    for index in 0..spec.storage_nic_count {
        t.add_cable(
            Vertex::Host(node),
            Vertex::StorageFabric,
            spec.storage_nic_gbps,
            CABLE_LATENCY,
            LinkKind::Storage { node, index },
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FatTreeParams {
    pub su_count: usize,
    pub nodes_per_su: usize,
    pub rails: u32,
    pub node: NodeSpec,
    pub leaf: SwitchSpec,
    pub spine: SwitchSpec,
}

impl FatTreeParams {
    pub fn new(su_count: usize, nodes_per_su: usize, rails: u32) -> Self {
        FatTreeParams {
            su_count,
            nodes_per_su,
            rails,
            node: NodeSpec { nic_count: rails, ..NodeSpec::blue_vela() },
            leaf: SwitchSpec::infiniband_ndr(),
            spine: SwitchSpec::infiniband_ndr(),
        }
    }
}

/// Rail-optimized two-tier fat tree: NIC `r` of every node in scalable unit
/// `u` lands on leaf `(u, r)`; leaves of rail `r` connect to that rail's spine
/// group with as much uplink as downlink capacity. A single scalable unit needs
/// no spines.
pub fn build_fat_tree(p: &FatTreeParams) -> Result<ClusterTopology, TopologyError> {
    if p.rails == 0 || p.su_count == 0 || p.nodes_per_su == 0 {
        return Err(TopologyError::InfeasibleRadix("rails, su_count and nodes_per_su must be > 0".into()));
    }
    if p.node.nic_count != p.rails || p.node.ports_per_nic != 1 {
        return Err(TopologyError::InfeasibleRadix(format!(
            "rail-optimized wiring needs one single-port compute NIC per rail ({} rails, {} NICs x {} ports)",
            p.rails, p.node.nic_count, p.node.ports_per_nic
        )));
    }
    p.node.validate()?;
    let multi = p.su_count > 1;
    let leaf_needed = if multi { 2 * p.nodes_per_su } else { p.nodes_per_su };
    if leaf_needed > p.leaf.port_count as usize {
        return Err(TopologyError::InfeasibleRadix(format!(
            "leaf needs {leaf_needed} ports, has {}",
            p.leaf.port_count
        )));
    }
    let uplink_total = p.su_count * p.nodes_per_su;
    let spines_per_rail = if multi { uplink_total.div_ceil(p.spine.port_count as usize) } else { 0 };
    if spines_per_rail > p.nodes_per_su {
        return Err(TopologyError::InfeasibleRadix(format!(
            "{spines_per_rail} spines per rail exceed the {} uplinks per leaf; a third tier would be needed",
            p.nodes_per_su
        )));
    }
    if multi {
        let per_spine = p.su_count * p.nodes_per_su.div_ceil(spines_per_rail);
        if per_spine > p.spine.port_count as usize {
            return Err(TopologyError::InfeasibleRadix(format!(
                "spine needs {per_spine} ports, has {}",
                p.spine.port_count
            )));
        }
    }

    let mut t = ClusterTopology::empty(TopologyKind::FatTree, p.node.clone());
    let mut leaves = vec![vec![0usize; p.rails as usize]; p.su_count];
    t.rails = vec![Vec::new(); p.rails as usize];
    for (su, row) in leaves.iter_mut().enumerate() {
        for rail in 0..p.rails as usize {
            let id = t.add_switch(SwitchRole::Leaf, p.leaf.clone(), rail, format!("leaf-su{su}-r{rail}"));
            row[rail] = id;
            t.rails[rail].push(id);
        }
    }
    let spine_groups: Vec<Vec<usize>> = (0..p.rails as usize)
        .map(|rail| {
            (0..spines_per_rail)
                .map(|k| t.add_switch(SwitchRole::Spine, p.spine.clone(), rail, format!("spine-r{rail}-{k}")))
                .collect()
        })
        .collect();

    for (su, row) in leaves.iter().enumerate() {
        let mut members = Vec::with_capacity(p.nodes_per_su);
        for _ in 0..p.nodes_per_su {
            let node = t.add_node(su, su);
            members.push(node);
            attach_node(&mut t, node, |nic, _| row[nic as usize]);
        }
        t.racks.push(members.clone());
        t.scalable_units.push(members);
    }
    if multi {
        for row in &leaves {
            for (rail, &leaf) in row.iter().enumerate() {
                let group = &spine_groups[rail];
                for k in 0..p.nodes_per_su {
                    let spine = group[k % group.len()];
                    t.add_cable(Vertex::Switch(leaf), Vertex::Switch(spine), p.leaf.port_gbps, CABLE_LATENCY, LinkKind::Fabric);
                }
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vela_two_racks_shape() {
        let t = build_vela_topology(&VelaParams::new(2, 6, 4, 4)).unwrap();
        assert_eq!(t.node_count(), 12);
        assert_eq!(t.switches.len(), 4 + 4);
        assert_eq!(t.racks.len(), 2);
        for n in 0..12 {
            for nic in 0..4 {
                assert_eq!(t.first_hop_switches(n, Some(nic)).len(), 2);
            }
        }
    }

    #[test]
    fn vela_single_rack_is_valid() {
        let t = build_vela_topology(&VelaParams::new(1, 6, 4, 4)).unwrap();
        assert_eq!(t.node_count(), 6);
    }

    #[test]
    fn vela_radix_checked() {
        let mut p = VelaParams::new(2, 7, 4, 4);
        assert!(matches!(build_vela_topology(&p), Err(TopologyError::InfeasibleRadix(_))));
        p.servers_per_rack = 6;
        p.racks = 40;
        assert!(matches!(build_vela_topology(&p), Err(TopologyError::InfeasibleRadix(_))));
    }

    #[test]
    fn fat_tree_pod_shape() {
        let t = build_fat_tree(&FatTreeParams::new(4, 32, 8)).unwrap();
        assert_eq!(t.node_count(), 128);
        assert_eq!(t.rails.len(), 8);
        let spines = t.switches.iter().filter(|s| s.role == SwitchRole::Spine).count();
        assert_eq!(spines, 16);
        for s in &t.switches {
            let used = t.out_links(Vertex::Switch(s.id)).len();
            assert!(used <= s.spec.port_count as usize, "{} uses {used}", s.name);
        }
        for node in [0, 77, 127] {
            for rail in 0..8u32 {
                let sw = t.first_hop_switches(node, Some(rail));
                assert_eq!(sw.len(), 1);
                assert_eq!(t.switches[sw[0]].group, rail as usize);
            }
        }
    }

    #[test]
    fn fat_tree_rejects_zero_rails() {
        let err = build_fat_tree(&FatTreeParams::new(1, 2, 0)).unwrap_err();
        assert!(matches!(err, TopologyError::InfeasibleRadix(_)));
    }

    #[test]
    fn fat_tree_storage_attachment() {
        let t = build_fat_tree(&FatTreeParams::new(1, 2, 2)).unwrap();
        let storage = t.out_links(Vertex::Host(0)).iter()
            .filter(|&&l| t.link(l).to == Vertex::StorageFabric)
            .count();
        assert_eq!(storage, 2);
    }
}
