use serde::Serialize;

use super::config::ScenarioConfig;
use super::ScenarioError;
use crate::collectives::{busbw_report, ring_allreduce, BusbwRow, CollectiveKind, CollectiveSpec, CollectiveMode};
use crate::network::Protocol;
use crate::power::{on_psu_failure, surge_safety_sweep, PowerDomain, PowerTrace, SafetySweep};
use crate::simcore::{RngStream, DAY};
use crate::topology::{ClusterTopology, NodeId};
use crate::workload::{plan_parallelism, step_time, StepEnv};

fn runtime(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Runtime(e.to_string())
}

/// The first `gpus / gpus_per_node` nodes in rack order.
fn ring_nodes(topo: &ClusterTopology, gpus: usize) -> Result<Vec<NodeId>, ScenarioError> {
    let gpn = topo.node_spec.gpus_per_node as usize;
    if gpus == 0 || gpus % gpn != 0 {
        return Err(ScenarioError::Runtime(format!("{gpus} GPUs is not a multiple of {gpn} per node")));
    }
    let need = gpus / gpn;
    if need > topo.node_count() {
        return Err(ScenarioError::Runtime(format!("{gpus} GPUs need {need} nodes, topology has {}", topo.node_count())));
    }
    let mut nodes: Vec<NodeId> = (0..topo.node_count()).collect();
    nodes.sort_by_key(|&n| (topo.nodes[n].rack, n));
    nodes.truncate(need);
    Ok(nodes)
}

fn allreduce_row(
    cfg: &ScenarioConfig,
    topo: &ClusterTopology,
    nodes: &[NodeId],
    size: f64,
    protocol: Protocol,
) -> Result<BusbwRow, ScenarioError> {
    let n = nodes.len() * topo.node_spec.gpus_per_node as usize;
    let spec = CollectiveSpec { kind: CollectiveKind::AllreduceRing, participants: n, message_size: size, protocol };
    let r = ring_allreduce(topo, nodes, size, protocol, &cfg.network.path_model, cfg.network.mode, &[], cfg.network.salt)
        .map_err(runtime)?;
    Ok(busbw_report(&spec, &r))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolRow {
    pub protocol: Protocol,
    pub row: BusbwRow,
}

/// All-reduce bus bandwidth per protocol and message size.
pub fn busbw_sweep(cfg: &ScenarioConfig, topo: &ClusterTopology) -> Result<Vec<ProtocolRow>, ScenarioError> {
    let Some(exp) = &cfg.experiments.busbw else { return Ok(Vec::new()) };
    let nodes = ring_nodes(topo, exp.gpus)?;
    let mut out = Vec::new();
    for &protocol in &exp.protocols {
        for &size in &exp.sizes {
            out.push(ProtocolRow { protocol, row: allreduce_row(cfg, topo, &nodes, size, protocol)? });
        }
    }
    Ok(out)
}

/// Bus bandwidth at a fixed message size across GPU counts.
pub fn scaling_sweep(cfg: &ScenarioConfig, topo: &ClusterTopology) -> Result<Vec<BusbwRow>, ScenarioError> {
    let Some(exp) = &cfg.experiments.scaling else { return Ok(Vec::new()) };
    exp.gpu_counts
        .iter()
        .map(|&g| allreduce_row(cfg, topo, &ring_nodes(topo, g)?, exp.size, exp.protocol))
        .collect()
}

/// Wide protocol comparison: one row per size, one busbw column per protocol.
pub fn protocol_table(rows: &[ProtocolRow]) -> String {
    let mut protocols: Vec<Protocol> = Vec::new();
    let mut sizes: Vec<f64> = Vec::new();
    for r in rows {
        if !protocols.contains(&r.protocol) {
            protocols.push(r.protocol);
        }
        if !sizes.contains(&r.row.size) {
            sizes.push(r.row.size);
        }
    }
    let mut out = String::from("size_bytes");
    for p in &protocols {
        out.push_str(&format!("\t{}_busbw_gbps", p.label()));
    }
    out.push('\n');
    for s in sizes {
        out.push_str(&format!("{s:.0}"));
        for p in &protocols {
            match rows.iter().find(|r| r.protocol == *p && r.row.size == s) {
                Some(r) => out.push_str(&format!("\t{:.4}", r.row.busbw)),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StragglerResult {
    pub job: String,
    pub nodes: usize,
    pub braked_node: NodeId,
    pub slowdown: f64,
    pub healthy_step: f64,
    pub braked_step: f64,
    pub ratio: f64,
}

/// Step time of a job with one node power-capped at `braked_gpu_w`.
pub fn straggler(cfg: &ScenarioConfig, topo: &ClusterTopology) -> Result<Option<StragglerResult>, ScenarioError> {
    let Some(exp) = &cfg.experiments.straggler else { return Ok(None) };
    let spec = cfg
        .jobs
        .get(exp.job)
        .ok_or_else(|| ScenarioError::Runtime(format!("straggler job {} is not defined", exp.job)))?;
    let all: Vec<NodeId> = (0..topo.node_count()).collect();
    let placement = plan_parallelism(spec, topo, &all).map_err(runtime)?;
    let victim = *placement
        .nodes
        .get(exp.slot)
        .ok_or_else(|| ScenarioError::Runtime(format!("slot {} outside a {}-node job", exp.slot, placement.nodes.len())))?;
    let up = vec![true; topo.node_count()];
    let mut slowdown = vec![1.0; topo.node_count()];
    let extra = spec.read_bytes_per_step / (cfg.storage.read_bw * 1e9);
    let run = |s: &[f64]| {
        let env = StepEnv {
            topo,
            params: &cfg.network.path_model,
            mode: cfg.network.mode,
            slowdown: s,
            node_up: &up,
            storage_extra: extra,
        };
        step_time(spec, &placement, &env).map(|b| b.total).map_err(runtime)
    };
    let healthy = run(&slowdown)?;
    let factor = cfg.power.params.slowdown(&topo.node_spec, cfg.power.braked_gpu_w);
    slowdown[victim] = factor;
    let braked = run(&slowdown)?;
    Ok(Some(StragglerResult {
        job: spec.name.clone(),
        nodes: placement.nodes.len(),
        braked_node: victim,
        slowdown: factor,
        healthy_step: healthy,
        braked_step: braked,
        ratio: braked / healthy,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerVerdict {
    pub domain_servers: usize,
    pub server_kw: f64,
    pub sweep: SafetySweep,
    pub pass: bool,
}

/// Random feed losses on one power domain at full training load, plus one
/// sample trace.
pub fn power_safety(
    cfg: &ScenarioConfig,
    topo: &ClusterTopology,
    rng: &RngStream,
) -> Result<(PowerVerdict, PowerTrace), ScenarioError> {
    let servers = cfg.power_domain_servers();
    let p = &cfg.power.params;
    let kw = p.server_power(&topo.node_spec, cfg.power.gpu_power_w);
    let load = vec![kw; servers];
    let mut r = rng.substream("sweep");
    let sweep = surge_safety_sweep(p, servers, cfg.power.safety_trials, DAY, |_| load.clone(), &mut r).map_err(runtime)?;
    let mut dom = PowerDomain::new(0, servers, p.clone()).map_err(runtime)?;
    let t = 60.0;
    let trace = on_psu_failure(&mut dom, t, 0, &load, t + 60.0).map_err(runtime)?.trace;
    let pass = sweep.failures == 0;
    Ok((PowerVerdict { domain_servers: servers, server_kw: kw, sweep, pass }, trace))
}

/// Collective mode used by the experiments, for reporting.
pub fn mode_label(mode: CollectiveMode) -> &'static str {
    match mode {
        CollectiveMode::Analytic => "analytic",
        CollectiveMode::Simulated => "simulated",
    }
}
