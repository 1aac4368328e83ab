use std::collections::{HashMap, VecDeque};

use proptest::prelude::*;

use clustersim::collectives::{analytic_context, ring_allreduce, ring_allreduce_time, CollectiveMode, RingContext};
use clustersim::faults::{
    apply_failure, repair, sample_failure_schedule, ClusterHealth, FailureEvent, FailureKind, FailureTarget, FaultModel,
};
use clustersim::monitoring::{
    detection_latency, evaluate_alert_rules, export_metrics, run_health_check, structural_latency, AlertRule, AlertState,
    CheckKind, Comparison, HealthCheck, HealthCheckResult, MetricClass, MetricSample, MetricStore, MonitoringConfig,
    MonitoringError, Posture, Tier,
};
use clustersim::network::{
    allocate_rates, check_link_conservation, route_all, select_path_ecmp, Endpoint, FlowState, PathModelParams, Protocol,
};
use clustersim::power::{check_surge_safety, on_psu_failure, PowerDomain, PowerParams};
use clustersim::resilience::{lost_time_report, LostTime, StorageBackend, StorageParams};
use clustersim::scenario::{parse_scenario_str, simulate_cluster};
use clustersim::scheduler::Scheduler;
use clustersim::simcore::{Engine, RngStream, SimTime, DAY, HOUR};
use clustersim::topology::{
    bisection_check, build_fat_tree, build_vela_topology, ClusterTopology, ComponentId, FatTreeParams, LinkKind, NodeId,
    SwitchRole, TopologyDelta, VelaParams, Vertex,
};
use clustersim::workload::{analytic_tokens_per_day, plan_parallelism, step_time, throughput_report, JobPhase, JobSpec, StepEnv};

fn vela(racks: usize) -> ClusterTopology {
    build_vela_topology(&VelaParams::new(racks, 6, 4, 4)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// simcore

proptest! {
    #[test]
    fn clock_never_goes_backwards(times in prop::collection::vec(0.0f64..1e6, 1..200)) {
        let mut e: Engine<u32> = Engine::new();
        for (i, &t) in times.iter().enumerate() {
            e.schedule(SimTime::from_secs(t), 0, i as u32).unwrap();
        }
        let mut last = 0.0;
        let mut seen = 0;
        e.run_until(SimTime::from_secs(2e6), |eng, rec| {
            assert!(rec.time.seconds() >= last);
            assert_eq!(eng.now(), rec.time);
            last = rec.time.seconds();
            seen += 1;
            if rec.event % 7 == 0 {
                eng.schedule_in(1.5, 1, 1_000_000 + rec.event);
            }
        });
        prop_assert!(seen >= times.len());
        prop_assert!(e.schedule(SimTime::from_secs(1.0), 0, 0).is_err());
    }

    #[test]
    fn equal_times_dispatch_in_insertion_order(n in 1usize..50, t in 0.0f64..10.0) {
        let mut e: Engine<usize> = Engine::new();
        for i in 0..n {
            e.schedule(SimTime::from_secs(t), 0, i).unwrap();
        }
        let mut order = Vec::new();
        e.run_until(SimTime::from_secs(t), |_, rec| order.push(rec.event));
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn replay_is_identical(seed in any::<u64>()) {
        let run = |seed: u64| {
            let mut rng = RngStream::new("replay", seed);
            let mut e: Engine<u64> = Engine::new().with_event_log();
            for i in 0..20 {
                e.schedule(SimTime::from_secs(rng.unit() * 100.0), i, i).unwrap();
            }
            e.run_until(SimTime::from_secs(1000.0), |eng, rec| {
                if rec.event < 60 {
                    let dt = rng.exponential(0.1).unwrap();
                    eng.schedule_in(dt, rec.target, rec.event + 20);
                }
            });
            e.take_event_log()
        };
        prop_assert_eq!(run(seed), run(seed));
    }

    #[test]
    fn distinct_stream_names_diverge(seed in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assume!(a != b);
        let mut x = RngStream::new(a.as_str(), seed);
        let mut y = RngStream::new(b.as_str(), seed);
        let xs: Vec<f64> = (0..8).map(|_| x.unit()).collect();
        let ys: Vec<f64> = (0..8).map(|_| y.unit()).collect();
        prop_assert_ne!(xs, ys);
        let mut s1 = RngStream::new("root", seed).substream(&a);
        let mut s2 = RngStream::new("root", seed).substream(&a);
        prop_assert_eq!(s1.unit(), s2.unit());
    }
}

// topology

/// Residual-graph Edmonds-Karp, written independently of the library solver.
struct Oracle {
    to: Vec<usize>,
    cap: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl Oracle {
    fn new() -> Self {
        Oracle { to: Vec::new(), cap: Vec::new(), adj: Vec::new() }
    }

    fn vertex(&mut self) -> usize {
        self.adj.push(Vec::new());
        self.adj.len() - 1
    }

    fn edge(&mut self, a: usize, b: usize, c: f64) {
        self.adj[a].push(self.to.len());
        self.to.push(b);
        self.cap.push(c);
        self.adj[b].push(self.to.len());
        self.to.push(a);
        self.cap.push(0.0);
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let mut via = vec![usize::MAX; self.adj.len()];
            let mut q = VecDeque::from([s]);
            let mut seen = vec![false; self.adj.len()];
            seen[s] = true;
            while let Some(v) = q.pop_front() {
                for &e in &self.adj[v] {
                    let w = self.to[e];
                    if !seen[w] && self.cap[e] > 1e-9 {
                        seen[w] = true;
                        via[w] = e;
                        q.push_back(w);
                    }
                }
            }
            if !seen[t] {
                return total;
            }
            let mut push = f64::INFINITY;
            let mut v = t;
            while v != s {
                let e = via[v];
                push = push.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            let mut v = t;
            while v != s {
                let e = via[v];
                self.cap[e] -= push;
                self.cap[e ^ 1] += push;
                v = self.to[e ^ 1];
            }
            total += push;
        }
    }
}

/// Host-to-host max flow from side A to side B where hosts inject at their
/// NIC rate and only switches carry transit.
fn oracle_cut(topo: &ClusterTopology, in_a: &[bool]) -> (f64, f64) {
    let mut g = Oracle::new();
    let mut ids: HashMap<Vertex, usize> = HashMap::new();
    let s = g.vertex();
    let t = g.vertex();
    let mut id = |v: Vertex, g: &mut Oracle| *ids.entry(v).or_insert_with(|| g.vertex());
    for l in topo.links.iter().filter(|l| l.is_up()) {
        let owner = match l.kind {
            LinkKind::Storage { .. } => continue,
            LinkKind::Fabric => None,
            LinkKind::Host { node, .. } | LinkKind::Access { node, .. } => Some(node),
        };
        // Node-attached links only point away from A or towards B.
        let outbound = match l.kind {
            LinkKind::Host { .. } => matches!(l.from, Vertex::Host(_)),
            _ => matches!(l.from, Vertex::Nic(..)),
        };
        if let Some(n) = owner {
            if outbound != in_a[n] {
                continue;
            }
        }
        let (a, b) = (id(l.from, &mut g), id(l.to, &mut g));
        g.edge(a, b, l.capacity_gbps());
    }
    let (mut inj_a, mut inj_b) = (0.0, 0.0);
    for n in 0..topo.node_count() {
        let inj: f64 = topo.access_links(n).map(|l| l.capacity_gbps()).sum::<f64>();
        let h = id(Vertex::Host(n), &mut g);
        if in_a[n] {
            inj_a += inj;
            g.edge(s, h, inj);
        } else {
            inj_b += inj;
            g.edge(h, t, inj);
        }
    }
    (g.max_flow(s, t), f64::min(inj_a, inj_b))
}

fn reachable_hosts(topo: &ClusterTopology, from: NodeId) -> usize {
    let mut seen: HashMap<Vertex, ()> = HashMap::new();
    let start = Vertex::Host(from);
    seen.insert(start, ());
    let mut q = VecDeque::from([start]);
    let mut hosts = 0;
    while let Some(v) = q.pop_front() {
        if matches!(v, Vertex::Host(_)) {
            hosts += 1;
        }
        // Only the source host, its NICs and switches forward traffic.
        let forwards = match v {
            Vertex::Switch(_) => true,
            Vertex::Host(n) | Vertex::Nic(n, _) => n == from,
            Vertex::StorageFabric => false,
        };
        for &l in topo.out_links(v) {
            let link = topo.link(l);
            // A remote NIC only delivers to its own host.
            let delivers = matches!((v, link.to), (Vertex::Nic(n, _), Vertex::Host(m)) if n == m);
            if (forwards || delivers)
                && link.is_up() && !matches!(link.kind, LinkKind::Storage { .. }) && seen.insert(link.to, ()).is_none() {
                q.push_back(link.to);
            }
        }
    }
    hosts
}

fn reaches_via_fabric(topo: &ClusterTopology, a: NodeId, b: NodeId) -> bool {
    let f = FlowState::new(0, Endpoint::new(a, 0, 0), Endpoint::new(b, 0, 0), 1.0, Protocol::Gdr, 12.5);
    select_path_ecmp(&f, topo, 0).is_ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vela_every_nic_is_dual_homed(racks in 1usize..6, servers in 1usize..8, nics in 1u32..5, spines in 1usize..5) {
        let built = build_vela_topology(&VelaParams::new(racks, servers, nics, spines));
        prop_assume!(built.is_ok());
        let topo = built.unwrap();
        for n in 0..topo.node_count() {
            for nic in 0..nics {
                let sw = topo.first_hop_switches(n, Some(nic));
                prop_assert_eq!(sw.len(), 2);
                prop_assert!(sw.iter().all(|&s| topo.switches[s].role == SwitchRole::Tor));
                prop_assert!(sw.iter().all(|&s| topo.switches[s].group == topo.nodes[n].rack));
            }
        }
    }

    #[test]
    fn fat_tree_bisections_match_oracle(
        su in 1usize..3,
        per_su in 2usize..33,
        rails in 1u32..9,
        mask in prop::collection::vec(any::<bool>(), 64),
    ) {
        let topo = build_fat_tree(&FatTreeParams::new(su, per_su, rails)).unwrap();
        prop_assume!(topo.node_count() <= 64);
        let n = topo.node_count();
        let in_a: Vec<bool> = (0..n).map(|i| mask[i]).collect();
        prop_assume!(in_a.iter().any(|&x| x) && in_a.iter().any(|&x| !x));
        let side_a: Vec<NodeId> = (0..n).filter(|&i| in_a[i]).collect();
        let lib = bisection_check(&topo, &side_a);
        let (flow, required) = oracle_cut(&topo, &in_a);
        prop_assert!(rel(lib.max_flow_gbps, flow) < 1e-9, "library {} oracle {}", lib.max_flow_gbps, flow);
        prop_assert!(rel(lib.required_gbps, required) < 1e-9);
        prop_assert!(flow >= required * (1.0 - 1e-9), "flow {flow} required {required}");
        prop_assert!(lib.passed());
    }

    #[test]
    fn single_component_failure_never_partitions(racks in 2usize..5, pick in any::<prop::sample::Index>(), which in 0u8..3) {
        let mut topo = vela(racks);
        let component = match which {
            0 => {
                let tors: Vec<usize> = topo.switches.iter().filter(|s| s.role == SwitchRole::Tor).map(|s| s.id).collect();
                ComponentId::Switch(*pick.get(&tors))
            }
            1 => {
                let spines: Vec<usize> = topo.switches.iter().filter(|s| s.role == SwitchRole::Spine).map(|s| s.id).collect();
                ComponentId::Switch(*pick.get(&spines))
            }
            _ => {
                let ports: Vec<(usize, u32, u32)> = (0..topo.node_count())
                    .flat_map(|n| (0..4).flat_map(move |nic| (0..2).map(move |p| (n, nic, p))))
                    .collect();
                let (node, nic, port) = *pick.get(&ports);
                ComponentId::Port { node, nic, port }
            }
        };
        topo.apply_delta(&TopologyDelta::down(component)).unwrap();
        let n = topo.node_count();
        for a in 0..n {
            prop_assert_eq!(reachable_hosts(&topo, a), n, "node {} cut off after {:?}", a, component);
        }
        prop_assert!(reaches_via_fabric(&topo, 0, n - 1));
    }
}

// network

fn random_flows(topo: &ClusterTopology, picks: &[(usize, usize, u32, u32, u8)]) -> Vec<FlowState> {
    let n = topo.node_count();
    picks
        .iter()
        .enumerate()
        .filter_map(|(i, &(a, b, nic, port, p))| {
            let (a, b) = (a % n, b % n);
            (a != b).then(|| {
                let proto = [Protocol::Tcp, Protocol::Roce, Protocol::Gdr][p as usize % 3];
                FlowState::new(i as u64, Endpoint::new(a, nic % 4, port % 2), Endpoint::new(b, nic % 4, port % 2), 1e6, proto, 12.5)
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn allocation_respects_every_link(
        picks in prop::collection::vec((0usize..100, 0usize..100, 0u32..4, 0u32..2, 0u8..3), 1..60),
        down in prop::option::of((0usize..24, 0u32..4, 0u32..2)),
    ) {
        let mut topo = vela(4);
        if let Some((node, nic, port)) = down {
            topo.apply_delta(&TopologyDelta::down(ComponentId::Port { node, nic, port })).unwrap();
        }
        let params = PathModelParams::default();
        let mut flows = random_flows(&topo, &picks);
        route_all(&mut flows, &topo, 3).unwrap();
        allocate_rates(&mut flows, &topo, &params);
        prop_assert!(flows.iter().all(|f| f.allocated_rate.is_finite() && f.allocated_rate > 0.0));
        prop_assert_eq!(check_link_conservation(&flows, &topo, &params), Ok(()));
        for f in &flows {
            let p = f.path.as_ref().unwrap();
            prop_assert!(p.links.iter().all(|&l| topo.link(l).is_up()));
        }
    }

    #[test]
    fn ecmp_choice_is_a_pure_function(id in any::<u64>(), salt in any::<u64>(), a in 0usize..24, b in 0usize..24) {
        prop_assume!(a != b);
        let topo = vela(4);
        let f = FlowState::new(id, Endpoint::new(a, 1, 0), Endpoint::new(b, 1, 0), 1.0, Protocol::Roce, 12.5);
        let p1 = select_path_ecmp(&f, &topo, salt).unwrap();
        let copy = topo.clone();
        let mut g = f.clone();
        g.bytes_done = 0.5;
        let p2 = select_path_ecmp(&g, &copy, salt).unwrap();
        prop_assert_eq!(&p1, &p2);
        prop_assert!(p1.links.windows(2).all(|w| topo.link(w[0]).to == topo.link(w[1]).from));
    }
}

// collectives

proptest! {
    #[test]
    fn busbw_grows_with_size(n in 2usize..2048, b in 0.1f64..100.0, l in 0.0f64..1e-4, s1 in 1.0f64..1e10, k in 1.0f64..100.0) {
        let ctx = RingContext { b_eff: b, l_hop: l };
        let small = ring_allreduce_time(s1, n, &ctx).unwrap();
        let large = ring_allreduce_time(s1 * k, n, &ctx).unwrap();
        prop_assert!(large.busbw >= small.busbw * (1.0 - 1e-12));
        prop_assert!(large.busbw <= b * (1.0 + 1e-12));
    }

    #[test]
    fn busbw_approaches_bottleneck_for_large_messages(n in 2usize..2048, b in 0.1f64..100.0, l in 0.0f64..1e-4) {
        let ctx = RingContext { b_eff: b, l_hop: l };
        // The latency term is under 1% of the transfer term once size/n/b > 100 l.
        let size = 200.0 * n as f64 * b * 1e9 * l.max(1e-9);
        let r = ring_allreduce_time(size, n, &ctx).unwrap();
        prop_assert!(rel(r.busbw, b) < 0.01, "busbw {} b_eff {}", r.busbw, b);
    }
}

#[test]
fn simulated_ring_busbw_matches_closed_form_at_large_sizes() {
    let topo = vela(4);
    let params = PathModelParams::default();
    let nodes: Vec<NodeId> = (0..12).collect();
    for proto in [Protocol::Tcp, Protocol::Roce, Protocol::Gdr] {
        let ctx = analytic_context(&topo, &nodes, proto, &params).unwrap();
        let r = ring_allreduce(&topo, &nodes, 8e9, proto, &params, CollectiveMode::Simulated, &[], 0).unwrap();
        assert!(rel(r.busbw, ctx.b_eff) < 0.01, "{proto:?}: {} vs {}", r.busbw, ctx.b_eff);
    }
}

// workload

fn small_job(dp: u32) -> JobSpec {
    JobSpec { tp: 8, pp: 1, dp, base_step_compute: 5.0, checkpoint_state_size: 1e11, ..JobSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn braking_one_node_slows_only_that_node(dp in 2u32..12, victim in any::<prop::sample::Index>(), s in 1.0f64..3.0) {
        let topo = vela(2);
        let spec = small_job(dp);
        let all: Vec<NodeId> = (0..topo.node_count()).collect();
        let placement = plan_parallelism(&spec, &topo, &all).unwrap();
        let v = *victim.get(&placement.nodes);
        let params = PathModelParams::default();
        let up = vec![true; topo.node_count()];
        let mut slow = vec![1.0; topo.node_count()];
        let env = |slow: &[f64]| {
            let e = StepEnv { topo: &topo, params: &params, mode: CollectiveMode::Analytic, slowdown: slow, node_up: &up, storage_extra: 0.0 };
            step_time(&spec, &placement, &e).unwrap()
        };
        let healthy = env(&slow);
        slow[v] = s;
        let braked = env(&slow);
        for (i, &n) in placement.nodes.iter().enumerate() {
            if n == v {
                let c = spec.base_step_compute * (1.0 + topo.node_spec.virt_overhead);
                prop_assert!(rel(braked.per_node[i] - healthy.per_node[i], (s - 1.0) * c) < 1e-9 || s == 1.0);
            } else {
                prop_assert_eq!(braked.per_node[i], healthy.per_node[i]);
            }
        }
        let expect = braked.per_node.iter().copied().fold(0.0, f64::max);
        prop_assert!(rel(braked.total, expect) < 1e-12);
    }

    #[test]
    fn compute_bound_step_scales_by_the_slowdown(s in 1.0f64..4.0) {
        let topo = vela(1);
        let spec = small_job(1);
        let placement = plan_parallelism(&spec, &topo, &[0]).unwrap();
        let params = PathModelParams::default();
        let up = vec![true; topo.node_count()];
        let mut slow = vec![1.0; topo.node_count()];
        let mk = |slow: &[f64]| {
            let e = StepEnv { topo: &topo, params: &params, mode: CollectiveMode::Analytic, slowdown: slow, node_up: &up, storage_extra: 0.0 };
            step_time(&spec, &placement, &e).unwrap().total
        };
        let base = mk(&slow);
        slow[0] = s;
        prop_assert!(rel(mk(&slow) / base, s) < 1e-12);
    }

    #[test]
    fn goodput_never_exceeds_one(tokens in 1.0f64..1e15, wall in 1.0f64..1e7, frac in 0.0f64..2.0, gpus in 1usize..4096) {
        let r = throughput_report(tokens, 20e9, gpus, wall, (wall * frac).max(1e-3), 6.0, JobPhase::Stepping).unwrap();
        prop_assert!(r.goodput <= 1.0 && r.goodput > 0.0);
    }
}

// faults

fn arbitrary_event(topo: &ClusterTopology, id: u64, k: usize, node: usize, nic: u32, port: u32) -> FailureEvent {
    let model = FaultModel::default();
    let kind = FailureKind::ALL[k % FailureKind::ALL.len()];
    let magnitude = match kind {
        FailureKind::PowerFeed => model.power_feed_slowdown,
        FailureKind::PcieDowngrade => model.pcie_downgrade_scale,
        k => model.hazard_per_second(k),
    };
    FailureEvent {
        id,
        kind,
        target: FailureTarget { node: node % topo.node_count(), nic: Some(nic % 4), port: Some(port % 2) },
        onset: id as f64,
        detected_at: None,
        repaired_at: None,
        magnitude,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn repairing_everything_restores_health(
        evs in prop::collection::vec((0usize..11, 0usize..12, 0u32..4, 0u32..2), 1..40),
        order in any::<u64>(),
    ) {
        let topo = vela(2);
        let fresh = ClusterHealth::new(topo.clone());
        let mut h = fresh.clone();
        let events: Vec<FailureEvent> =
            evs.iter().enumerate().map(|(i, &(k, n, nic, p))| arbitrary_event(&topo, i as u64, k, n, nic, p)).collect();
        for e in &events {
            apply_failure(&mut h, e).unwrap();
            apply_failure(&mut h, e).unwrap();
        }
        let mut ids: Vec<u64> = events.iter().map(|e| e.id).collect();
        let mut rng = RngStream::new("order", order);
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.index(i + 1));
        }
        for id in ids {
            prop_assert!(repair(&mut h, id).unwrap().is_some());
            prop_assert!(repair(&mut h, id).unwrap().is_none());
        }
        prop_assert!(h.same_state(&fresh));
        prop_assert!((0..topo.node_count()).all(|n| h.node_up(n) && h.slowdown(n) == 1.0));
    }

    #[test]
    fn schedule_is_reproducible_and_kinds_are_independent(seed in any::<u64>(), scale in 0.1f64..10.0, k in 0usize..11) {
        let topo = vela(2);
        let mut model = FaultModel::default();
        for r in model.rates.values_mut() {
            *r *= 20.0;
        }
        let stream = RngStream::new("failures", seed);
        let a = sample_failure_schedule(&model, &topo, 30.0 * DAY, &stream).unwrap();
        let b = sample_failure_schedule(&model, &topo, 30.0 * DAY, &stream).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0].onset <= w[1].onset));
        let changed = FailureKind::ALL[k];
        *model.rates.get_mut(&changed).unwrap() *= scale;
        let c = sample_failure_schedule(&model, &topo, 30.0 * DAY, &stream).unwrap();
        let strip = |v: &[FailureEvent]| -> Vec<(FailureKind, FailureTarget, u64)> {
            v.iter().filter(|e| e.kind != changed).map(|e| (e.kind, e.target, e.onset.to_bits())).collect()
        };
        prop_assert_eq!(strip(&a), strip(&c));
    }
}

// power

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn feed_loss_overload_is_bounded_and_energy_balances(
        t in 0.0f64..DAY,
        loads in prop::collection::vec(3.2f64..6.0, 1..7),
        failed in 0usize..2,
    ) {
        let p = PowerParams::default();
        let mut dom = PowerDomain::new(0, loads.len(), p.clone()).unwrap();
        let seq = on_psu_failure(&mut dom, t, failed, &loads, t + 60.0).unwrap();
        let v = check_surge_safety(&seq.trace, &p);
        prop_assert!(v.pass);
        prop_assert!(v.worst_overload <= p.surge_tolerance);
        prop_assert!(seq.steady_kw <= p.pdu_rating);
        prop_assert!(rel(seq.trace.pdu_energy(), seq.trace.server_energy()) < 1e-6);
    }
}

// resilience

proptest! {
    #[test]
    fn lost_time_fractions_sum_to_one(v in prop::array::uniform5(0.0f64..1e7)) {
        let t = LostTime { productive: v[0], checkpoint: v[1], recompute: v[2], detect_debug: v[3], pend: v[4] };
        let r = lost_time_report(&t);
        prop_assert!((r.fractions.total() - 1.0).abs() < 1e-9);
        prop_assert!((r.goodput + r.lost_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_occupancy_stays_within_capacity(
        ops in prop::collection::vec((any::<bool>(), 0u8..12, 1.0f64..2e12, 0.0f64..600.0), 1..80),
    ) {
        let params = StorageParams::scale_cache();
        let cap = params.cache_capacity;
        let mut s = StorageBackend::new(params).unwrap();
        let mut now = 0.0;
        for (write, key, size, dt) in ops {
            now += dt;
            let key = format!("k{key}");
            let size = size.min(cap);
            if write {
                let w = s.write(&key, size, now).unwrap();
                prop_assert!(w.blocking > 0.0);
                now += w.blocking;
            } else {
                now += s.read(&key, size, now);
            }
            prop_assert!(s.occupancy() <= cap * (1.0 + 1e-9), "{} > {}", s.occupancy(), cap);
        }
    }

    #[test]
    fn spaced_writes_never_wait_for_flushes(sizes in prop::collection::vec(1e9f64..4e12, 1..30)) {
        let params = StorageParams::scale_cache();
        let mut s = StorageBackend::new(params.clone()).unwrap();
        let mut now = 0.0;
        for (i, &size) in sizes.iter().enumerate() {
            let size = size.min(params.cache_capacity);
            let w = s.write(&format!("ckpt{i}"), size, now).unwrap();
            prop_assert!(rel(w.blocking, size / (params.write_bw * 1e9)) < 1e-12);
            now = w.flush_done_at.unwrap() + 1.0;
        }
    }
}

// monitoring

/// Alert firing points from first principles: window means, then rising edges.
fn expected_alerts(values: &[f64], window: usize, threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = false;
    for i in 0..values.len() {
        if i + 1 < window {
            continue;
        }
        let mean = values[i + 1 - window..=i].iter().sum::<f64>() / window as f64;
        let v = mean > threshold;
        if v && !prev {
            out.push(i);
        }
        prev = v;
    }
    out
}

#[test]
fn alerts_fire_once_per_violation_onset_for_every_binary_history() {
    for window in 1..=3 {
        let rule = AlertRule {
            name: "r".into(),
            check: CheckKind::RemappedRows,
            window,
            threshold: 0.5,
            comparison: Comparison::Above,
        };
        for bits in 0u32..1 << 9 {
            let values: Vec<f64> = (0..9).map(|i| f64::from((bits >> i) & 1)).collect();
            let mut state = AlertState::default();
            let mut fired = Vec::new();
            for (i, &v) in values.iter().enumerate() {
                let t = i as f64 * 60.0;
                state.record(&HealthCheckResult { node: 3, kind: CheckKind::RemappedRows, time: t, value: Some(v), pass: true });
                for a in evaluate_alert_rules(std::slice::from_ref(&rule), &mut state, t) {
                    assert_eq!(a.time, t);
                    assert_eq!(a.evidence.len(), window);
                    fired.push(i);
                }
            }
            assert_eq!(fired, expected_alerts(&values, window, 0.5), "window {window} bits {bits:09b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn proactive_detection_is_never_later(k in 0usize..11, onset in 0.0f64..30.0 * DAY, id in any::<u64>(), busy in any::<bool>(), seed in any::<u64>()) {
        let topo = vela(1);
        let mut ev = arbitrary_event(&topo, id, k, 0, 0, 0);
        ev.onset = onset;
        let cfg = MonitoringConfig::default();
        let stream = RngStream::new("detect", seed);
        let pro = detection_latency(&ev, Posture::Proactive, busy, &cfg, &stream);
        let re = detection_latency(&ev, Posture::Reactive, busy, &cfg, &stream);
        prop_assert!(pro <= re, "{:?}: proactive {} reactive {}", ev.kind, pro, re);
        prop_assert!(pro >= 0.0);
    }

    #[test]
    fn intrusive_checks_refuse_busy_nodes(node in 0usize..6, seed in any::<u64>(), onset in 0.0f64..DAY) {
        let health = ClusterHealth::new(vela(1));
        let cfg = MonitoringConfig::default();
        let mut rng = RngStream::new("checks", seed);
        let check = HealthCheck::default_for(CheckKind::DcgmL3Like);
        prop_assert!(check.intrusive);
        let r = run_health_check(&health, node, &check, true, &cfg, onset, &mut rng);
        let refused = matches!(r, Err(MonitoringError::NodeBusy { .. }));
        prop_assert!(refused);
        prop_assert!(run_health_check(&health, node, &check, false, &cfg, onset, &mut rng).is_ok());
        let mut ev = arbitrary_event(&health.topo, 1, 4, node, 0, 0);
        prop_assert_eq!(ev.kind, FailureKind::HbmCorrupt);
        ev.onset = onset;
        prop_assert_eq!(structural_latency(&ev, true, &cfg, &mut rng), None);
        prop_assert!(structural_latency(&ev, false, &cfg, &mut rng).is_some());
    }

    #[test]
    fn rollups_match_raw_means_on_bucket_boundaries(
        samples in prop::collection::vec((0.0f64..6.0 * HOUR, -50.0f64..50.0), 1..200),
        a in 0usize..72,
        len in 1usize..72,
    ) {
        let mut store = MetricStore::new();
        let batch: Vec<MetricSample> = samples
            .iter()
            .map(|&(t, v)| MetricSample { time: t, source: "node0".into(), name: "x".into(), value: v, class: MetricClass::Gpu })
            .collect();
        export_metrics(&mut store, &batch, 6.0 * HOUR);
        let w = Tier::FiveMinute.bucket();
        let (t0, t1) = (a as f64 * w, (a + len) as f64 * w);
        let raw = store.mean_in(Tier::Raw, "node0", "x", t0, t1);
        let five = store.mean_in(Tier::FiveMinute, "node0", "x", t0, t1);
        match (raw, five) {
            (Some(r), Some(f)) => prop_assert!((r - f).abs() < 1e-9 * (1.0 + r.abs())),
            (r, f) => prop_assert_eq!(r, f),
        }
        if a % 12 == 0 && len % 12 == 0 {
            let hourly = store.mean_in(Tier::Hourly, "node0", "x", t0, t1);
            match (raw, hourly) {
                (Some(r), Some(h)) => prop_assert!((r - h).abs() < 1e-9 * (1.0 + r.abs())),
                (r, h) => prop_assert_eq!(r, h),
            }
        }
    }
}

// scheduler

#[derive(Debug, Clone)]
enum Op {
    Submit(u32),
    Replenish,
    Down(usize),
    Fault(usize),
    Close(usize),
    Drain(usize),
    Repair(usize),
    Refill(usize),
    Brake(usize),
    Unbrake(usize),
    Complete(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1u32..6).prop_map(Op::Submit),
        Just(Op::Replenish),
        (0usize..24).prop_map(Op::Down),
        (0usize..24).prop_map(Op::Fault),
        (0usize..24).prop_map(Op::Close),
        (0usize..8).prop_map(Op::Drain),
        (0usize..24).prop_map(Op::Repair),
        (0usize..8).prop_map(Op::Refill),
        (0usize..24).prop_map(Op::Brake),
        (0usize..24).prop_map(Op::Unbrake),
        (0usize..8).prop_map(Op::Complete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scheduler_invariants_hold_under_random_operations(ops in prop::collection::vec(op(), 1..80)) {
        let topo = vela(4);
        let mut s = Scheduler::new(topo.node_count(), 8, 0.1);
        let mut t = 0.0;
        for o in ops {
            t += 1.0;
            let jobs = s.jobs().len().max(1);
            match o {
                Op::Submit(dp) => {
                    s.submit(small_job(dp), Some(8 * dp as usize), 0, &topo, t).unwrap();
                }
                Op::Replenish => s.replenish_pool(t),
                Op::Down(n) => {
                    s.node_down(n, "down", t);
                }
                Op::Fault(n) => {
                    s.node_faulted(n, "fault", t);
                }
                Op::Close(n) => {
                    s.close(n, "alert", t);
                }
                Op::Drain(j) => {
                    s.drain(j % jobs, t);
                }
                Op::Repair(n) => {
                    s.node_repaired(n, t);
                }
                Op::Refill(j) => {
                    let _ = s.refill(j % jobs, &topo, t);
                }
                Op::Brake(n) => s.brake(n, t),
                Op::Unbrake(n) => s.unbrake(n, t),
                Op::Complete(j) => {
                    if j < s.jobs().len() {
                        s.complete(j, t).unwrap();
                        s.schedule(&topo, t);
                    }
                }
            }
            prop_assert_eq!(s.check_invariants(), Ok(()));
            let c = s.counts();
            prop_assert_eq!(c.submitted, c.pending + c.running + c.completed + c.failed);
            for st in s.statuses() {
                if let Some(j) = st.job {
                    prop_assert!(s.job(j).is_some());
                }
            }
            prop_assert!(s.log().windows(2).all(|w| w[0].time <= w[1].time));
        }
    }
}

// whole-cluster runs

fn small_month(extra: &str) -> String {
    format!(
        r#"
include = ["vela-2023"]
name = "prop-month"
horizon = 864000.0

[topology]
racks = 4

[[jobs]]
name = "small"
tp = 4
pp = 2
dp = 8
base_step_compute = 10.0
checkpoint_state_size = 4.5e11
host_io_bytes_per_step = 0.0
read_bytes_per_step = 0.0
{extra}
"#
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn cluster_run_accounts_for_every_second(seed in any::<u64>()) {
        let mut cfg = parse_scenario_str(&small_month(""), None).unwrap();
        for r in cfg.faults.model.rates.values_mut() {
            *r *= 10.0;
        }
        cfg.output.event_log = false;
        cfg.output.metrics = false;
        let out = simulate_cluster(&cfg, seed).unwrap();
        let job = &out.jobs[0];
        let lost = &job.lost;
        prop_assert!(rel(lost.seconds.total(), cfg.horizon) < 1e-6, "accounted {} of {}", lost.seconds.total(), cfg.horizon);
        prop_assert!((lost.fractions.total() - 1.0).abs() < 1e-9);
        prop_assert!(lost.goodput <= 1.0);
        prop_assert!(lost.seconds.values().iter().all(|&v| v >= -1e-6));
        prop_assert!(
            job.max_crash_loss <= job.checkpoint_interval + job.checkpoint_delta + 1e-6,
            "lost {} interval {} delta {}",
            job.max_crash_loss,
            job.checkpoint_interval,
            job.checkpoint_delta
        );
        for ev in out.failure_rows.iter() {
            let f: Vec<&str> = ev.split('\t').collect();
            if let (Ok(on), Ok(det)) = (f[0].parse::<f64>(), f[7].parse::<f64>()) {
                prop_assert!(det >= on);
            }
        }
    }
}

#[test]
fn fault_free_throughput_matches_the_closed_form() {
    let cfg = parse_scenario_str(
        &small_month("\n[checkpoint]\npolicy = { kind = \"fixed\", interval = 1e9 }\n\n[faults]\nenabled = false\n"),
        None,
    )
    .unwrap();
    let out = simulate_cluster(&cfg, 5).unwrap();
    let job = &out.jobs[0];
    assert_eq!(job.crashes, 0);
    let spec = &cfg.jobs[0];
    let analytic = analytic_tokens_per_day(spec, job.nominal_step);
    assert!(rel(job.tokens_per_day, analytic) < 0.02, "simulated {} analytic {}", job.tokens_per_day, analytic);
}
