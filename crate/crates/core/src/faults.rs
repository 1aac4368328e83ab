//! Failure taxonomy, Poisson failure schedules, reversible effects and repair.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::{Dist, RngStream, SimError, DAY, HOUR, MINUTE, MONTH};
use crate::topology::{ClusterTopology, ComponentId, NodeId, TopologyDelta, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error(transparent)]
    UnknownComponent(#[from] TopologyError),
    #[error("invalid fault model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    HardCrash,
    Subtle,
    Software,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    HgxBoard,
    Dimm,
    NvlinkSwitch,
    GpuFail,
    HbmCorrupt,
    PcieLinkFail,
    PortFail,
    PowerFeed,
    PcieDowngrade,
    CudaAllocErr,
    RowRemapPending,
}

impl FailureKind {
    pub const ALL: [FailureKind; 11] = [
        FailureKind::HgxBoard,
        FailureKind::Dimm,
        FailureKind::NvlinkSwitch,
        FailureKind::GpuFail,
        FailureKind::HbmCorrupt,
        FailureKind::PcieLinkFail,
        FailureKind::PortFail,
        FailureKind::PowerFeed,
        FailureKind::PcieDowngrade,
        FailureKind::CudaAllocErr,
        FailureKind::RowRemapPending,
    ];

    pub fn class(self) -> FailureClass {
        use FailureKind::*;
        match self {
            HgxBoard | Dimm | NvlinkSwitch => FailureClass::HardCrash,
            GpuFail | HbmCorrupt | PcieLinkFail | PortFail | PowerFeed => FailureClass::Subtle,
            PcieDowngrade | CudaAllocErr | RowRemapPending => FailureClass::Software,
        }
    }

    pub fn label(self) -> &'static str {
        use FailureKind::*;
        match self {
            HgxBoard => "hgx_board",
            Dimm => "dimm",
            NvlinkSwitch => "nvlink_switch",
            GpuFail => "gpu_fail",
            HbmCorrupt => "hbm_corrupt",
            PcieLinkFail => "pcie_link_fail",
            PortFail => "port_fail",
            PowerFeed => "power_feed",
            PcieDowngrade => "pcie_downgrade",
            CudaAllocErr => "cuda_alloc_err",
            RowRemapPending => "row_remap_pending",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub type KindMap<T> = BTreeMap<FailureKind, T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultModel {
    /// Events per node-month.
    pub rates: KindMap<f64>,
    /// Repair time for hardware kinds, seconds from detection.
    pub repair: KindMap<Dist>,
    pub reboot_time: f64,
    pub reboot_success: f64,
    pub max_reboots: u32,
    /// Crash hazard per hour while a flagged node runs a job.
    pub escalation_per_hour: KindMap<f64>,
    pub power_feed_slowdown: f64,
    pub pcie_downgrade_scale: f64,
}

fn lognormal_hours(h: f64) -> Dist {
    Dist::LogNormal { mean: h * HOUR, sigma: 0.5 }
}

impl Default for FaultModel {
    fn default() -> Self {
        use FailureKind::*;
        let rates = KindMap::from([
            (HgxBoard, 0.010),
            (Dimm, 0.006),
            (NvlinkSwitch, 0.004),
            (GpuFail, 0.005),
            (HbmCorrupt, 0.002),
            (PcieLinkFail, 0.005),
            (PortFail, 0.010),
            (PowerFeed, 0.005),
            (PcieDowngrade, 0.040),
            (CudaAllocErr, 0.010),
            (RowRemapPending, 0.010),
        ]);
        let repair = KindMap::from([
            (HgxBoard, lognormal_hours(3.0 * 24.0)),
            (Dimm, lognormal_hours(4.0)),
            (NvlinkSwitch, lognormal_hours(2.0 * 24.0)),
            (GpuFail, lognormal_hours(2.0 * 24.0)),
            (HbmCorrupt, lognormal_hours(2.0 * 24.0)),
            (PcieLinkFail, lognormal_hours(24.0)),
            (PortFail, lognormal_hours(4.0)),
            (PowerFeed, lognormal_hours(6.0)),
        ]);
        let escalation_per_hour = KindMap::from([(GpuFail, 0.02), (CudaAllocErr, 0.01), (RowRemapPending, 0.01)]);
        FaultModel {
            rates,
            repair,
            reboot_time: 10.0 * MINUTE,
            reboot_success: 0.95,
            max_reboots: 5,
            escalation_per_hour,
            power_feed_slowdown: 3.0,
            pcie_downgrade_scale: 0.125,
        }
    }
}

impl FaultModel {
    pub fn rate(&self, k: FailureKind) -> f64 {
        self.rates.get(&k).copied().unwrap_or(0.0)
    }

    pub fn hazard_per_second(&self, k: FailureKind) -> f64 {
        self.escalation_per_hour.get(&k).copied().unwrap_or(0.0) / HOUR
    }

    /// Scales every hard-crash rate so they sum to `total` per node-month.
    pub fn with_hard_crash_rate(mut self, total: f64) -> Self {
        let kinds: Vec<_> = FailureKind::ALL.into_iter().filter(|k| k.class() == FailureClass::HardCrash).collect();
        let cur: f64 = kinds.iter().map(|&k| self.rate(k)).sum();
        for k in kinds {
            let v = if cur > 0.0 { self.rate(k) * total / cur } else { total / 3.0 };
            self.rates.insert(k, v);
        }
        self
    }

    pub fn hard_crash_rate(&self) -> f64 {
        FailureKind::ALL.iter().filter(|k| k.class() == FailureClass::HardCrash).map(|&k| self.rate(k)).sum()
    }

    pub fn validate(&self) -> Result<(), FaultError> {
        for (k, &r) in &self.rates {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(FaultError::InvalidModel(format!("rates.{k} = {r} must be >= 0")));
            }
        }
        for (k, d) in &self.repair {
            d.validate().map_err(|e| FaultError::InvalidModel(format!("repair.{k}: {e}")))?;
        }
        for (k, &h) in &self.escalation_per_hour {
            if !(h >= 0.0) {
                return Err(FaultError::InvalidModel(format!("escalation_per_hour.{k} = {h} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.reboot_success) || !(self.reboot_time > 0.0) || self.max_reboots == 0 {
            return Err(FaultError::InvalidModel("reboot parameters".into()));
        }
        if !(self.power_feed_slowdown >= 1.0) || !(self.pcie_downgrade_scale > 0.0 && self.pcie_downgrade_scale <= 1.0) {
            return Err(FaultError::InvalidModel("effect magnitudes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureTarget {
    pub node: NodeId,
    pub nic: Option<u32>,
    pub port: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub id: u64,
    pub kind: FailureKind,
    pub target: FailureTarget,
    pub onset: f64,
    pub detected_at: Option<f64>,
    pub repaired_at: Option<f64>,
    /// Slowdown factor, bandwidth scale or hazard, depending on kind.
    pub magnitude: f64,
}

impl FailureEvent {
    pub fn is_ordered(&self) -> bool {
        let d = self.detected_at.unwrap_or(self.onset);
        let r = self.repaired_at.unwrap_or(d);
        self.onset <= d && d <= r
    }

    pub const LOG_HEADER: &'static str = "time_s\tkind\tclass\tnode\tnic\tport\tmagnitude\tdetected_s\trepaired_s\tdetection_lag_s";

    pub fn log_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let opt_u = |v: Option<u32>| v.map_or("-".to_string(), |x| x.to_string());
        format!(
            "{:.3}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.onset,
            self.kind,
            self.kind.class(),
            self.target.node,
            opt_u(self.target.nic),
            opt_u(self.target.port),
            self.magnitude,
            opt(self.detected_at),
            opt(self.repaired_at),
            opt(self.detected_at.map(|d| d - self.onset)),
        )
    }
}

/// Independent Poisson processes per node and kind. Each kind draws from its
/// own substream so changing one rate leaves the other kinds' onsets intact.
pub fn sample_failure_schedule(
    model: &FaultModel,
    topo: &ClusterTopology,
    horizon: f64,
    stream: &RngStream,
) -> Result<Vec<FailureEvent>, FaultError> {
    if !(horizon > 0.0) {
        return Err(FaultError::InvalidModel(format!("horizon {horizon} must be > 0")));
    }
    model.validate()?;
    let spec = &topo.node_spec;
    let mut out = Vec::new();
    for kind in FailureKind::ALL {
        let rate = model.rate(kind) / MONTH;
        if rate <= 0.0 {
            continue;
        }
        let mut rng = stream.substream(kind.label());
        for node in 0..topo.node_count() {
            let mut t = 0.0;
            loop {
                t += rng.exponential(rate)?;
                if t >= horizon {
                    break;
                }
                let (nic, port) = match kind {
                    FailureKind::PcieLinkFail => (Some(rng.index(spec.nic_count as usize) as u32), None),
                    FailureKind::PortFail => (
                        Some(rng.index(spec.nic_count as usize) as u32),
                        Some(rng.index(spec.ports_per_nic as usize) as u32),
                    ),
                    _ => (None, None),
                };
                let magnitude = match kind {
                    FailureKind::PowerFeed => model.power_feed_slowdown,
                    FailureKind::PcieDowngrade => model.pcie_downgrade_scale,
                    k => model.hazard_per_second(k),
                };
                out.push(FailureEvent {
                    id: 0,
                    kind,
                    target: FailureTarget { node, nic, port },
                    onset: t,
                    detected_at: None,
                    repaired_at: None,
                    magnitude,
                });
            }
        }
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.kind.cmp(&b.kind)).then(a.target.cmp(&b.target)));
    for (i, e) in out.iter_mut().enumerate() {
        e.id = i as u64;
    }
    Ok(out)
}

/// Repair duration once work on the fault starts. Software faults take one
/// reboot per attempt until one succeeds (bounded by `max_reboots`; the last
/// attempt is a reimage that always succeeds).
pub fn repair_duration(kind: FailureKind, model: &FaultModel, rng: &mut RngStream) -> Result<f64, FaultError> {
    if kind.class() == FailureClass::Software {
        let mut attempts = 1;
        while attempts < model.max_reboots && !rng.bernoulli(model.reboot_success) {
            attempts += 1;
        }
        return Ok(attempts as f64 * model.reboot_time);
    }
    let d = model.repair.get(&kind).cloned().unwrap_or(Dist::Constant { value: DAY });
    Ok(rng.draw(&d)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Effect {
    NodeDown,
    Braked { slowdown: f64 },
    LinksDown { links: usize },
    HostLinkScaled { factor: f64 },
    Flagged { hazard_per_second: f64 },
    SilentCorruption,
}

/// Live health of the cluster: the topology plus per-node counters so that
/// overlapping faults compose and each repair undoes exactly its own effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterHealth {
    pub topo: ClusterTopology,
    down: Vec<u32>,
    brakes: Vec<Vec<f64>>,
    pcie: Vec<u32>,
    flags: Vec<KindMap<u32>>,
    applied: BTreeMap<u64, (FailureEvent, Effect)>,
}

impl ClusterHealth {
    pub fn new(topo: ClusterTopology) -> Self {
        let n = topo.node_count();
        ClusterHealth {
            topo,
            down: vec![0; n],
            brakes: vec![Vec::new(); n],
            pcie: vec![0; n],
            flags: vec![KindMap::new(); n],
            applied: BTreeMap::new(),
        }
    }

    pub fn node_up(&self, n: NodeId) -> bool {
        self.down[n] == 0
    }

    pub fn up_vector(&self) -> Vec<bool> {
        (0..self.down.len()).map(|n| self.node_up(n)).collect()
    }

    /// Compute slowdown of a node from power brakes (largest active).
    pub fn slowdown(&self, n: NodeId) -> f64 {
        self.brakes[n].iter().copied().fold(1.0, f64::max)
    }

    pub fn slowdown_vector(&self) -> Vec<f64> {
        (0..self.down.len()).map(|n| self.slowdown(n)).collect()
    }

    pub fn host_link_degraded(&self, n: NodeId) -> bool {
        self.pcie[n] > 0
    }

    /// Summed escalation hazard of a node's active flags, per second.
    pub fn hazard(&self, n: NodeId, model: &FaultModel) -> f64 {
        self.flags[n].iter().map(|(&k, &c)| if c > 0 { model.hazard_per_second(k) } else { 0.0 }).sum()
    }

    pub fn is_applied(&self, id: u64) -> bool {
        self.applied.contains_key(&id)
    }

    pub fn active(&self) -> impl Iterator<Item = &FailureEvent> {
        self.applied.values().map(|(e, _)| e)
    }

    /// External brake (rack power domain); paired with `release_brake`.
    pub fn brake(&mut self, n: NodeId, slowdown: f64) {
        self.brakes[n].push(slowdown);
    }

    pub fn release_brake(&mut self, n: NodeId, slowdown: f64) {
        if let Some(i) = self.brakes[n].iter().position(|&s| s == slowdown) {
            self.brakes[n].swap_remove(i);
        }
    }

    /// Counters only: equality modulo bookkeeping of applied events.
    pub fn same_state(&self, other: &ClusterHealth) -> bool {
        let strip = |h: &ClusterHealth| (h.topo.links.clone(), h.down.clone(), h.pcie.clone());
        strip(self) == strip(other)
            && self.brakes.iter().zip(&other.brakes).all(|(a, b)| a.len() == b.len())
            && self.flags.iter().zip(&other.flags).all(|(a, b)| {
                a.values().filter(|&&c| c > 0).count() == b.values().filter(|&&c| c > 0).count()
            })
    }
}

fn nic_ports(topo: &ClusterTopology, ev: &FailureEvent) -> Result<ComponentId, FaultError> {
    let t = ev.target;
    Ok(match (ev.kind, t.nic, t.port) {
        (FailureKind::PortFail, Some(nic), Some(port)) => ComponentId::Port { node: t.node, nic, port },
        (_, Some(nic), _) => ComponentId::Nic { node: t.node, nic },
        _ => return Err(TopologyError::UnknownComponent(ComponentId::Node(t.node)).into()),
    })
    .and_then(|c| {
        if t.node < topo.node_count() {
            Ok(c)
        } else {
            Err(TopologyError::UnknownComponent(c).into())
        }
    })
}

/// Applies an event's effect. Applying the same event twice is a no-op.
pub fn apply_failure(h: &mut ClusterHealth, ev: &FailureEvent) -> Result<Effect, FaultError> {
    if let Some((_, eff)) = h.applied.get(&ev.id) {
        return Ok(eff.clone());
    }
    let n = ev.target.node;
    if n >= h.topo.node_count() {
        return Err(TopologyError::UnknownComponent(ComponentId::Node(n)).into());
    }
    let effect = match ev.kind {
        FailureKind::HgxBoard | FailureKind::Dimm | FailureKind::NvlinkSwitch => {
            h.topo.apply_delta(&TopologyDelta::down(ComponentId::Node(n)))?;
            h.down[n] += 1;
            Effect::NodeDown
        }
        FailureKind::PortFail | FailureKind::PcieLinkFail => {
            let c = nic_ports(&h.topo, ev)?;
            let links = h.topo.apply_delta(&TopologyDelta::down(c))?;
            Effect::LinksDown { links: links.len() }
        }
        FailureKind::PowerFeed => {
            h.brakes[n].push(ev.magnitude);
            Effect::Braked { slowdown: ev.magnitude }
        }
        FailureKind::PcieDowngrade => {
            if h.pcie[n] == 0 {
                for nic in 0..h.topo.node_spec.nic_count {
                    h.topo.apply_delta(&TopologyDelta::scale(ComponentId::HostLink { node: n, nic }, ev.magnitude))?;
                }
            }
            h.pcie[n] += 1;
            Effect::HostLinkScaled { factor: ev.magnitude }
        }
        FailureKind::GpuFail | FailureKind::CudaAllocErr | FailureKind::RowRemapPending => {
            *h.flags[n].entry(ev.kind).or_default() += 1;
            Effect::Flagged { hazard_per_second: ev.magnitude }
        }
        FailureKind::HbmCorrupt => Effect::SilentCorruption,
    };
    h.applied.insert(ev.id, (ev.clone(), effect.clone()));
    Ok(effect)
}

/// Reverts an applied event. Returns `None` (and changes nothing) when the
/// event was never applied or was already repaired.
pub fn repair(h: &mut ClusterHealth, event_id: u64) -> Result<Option<Effect>, FaultError> {
    let Some((ev, effect)) = h.applied.remove(&event_id) else {
        return Ok(None);
    };
    let n = ev.target.node;
    match ev.kind {
        FailureKind::HgxBoard | FailureKind::Dimm | FailureKind::NvlinkSwitch => {
            h.topo.apply_delta(&TopologyDelta::up(ComponentId::Node(n)))?;
            h.down[n] -= 1;
        }
        FailureKind::PortFail | FailureKind::PcieLinkFail => {
            let c = nic_ports(&h.topo, &ev)?;
            h.topo.apply_delta(&TopologyDelta::up(c))?;
        }
        FailureKind::PowerFeed => h.release_brake(n, ev.magnitude),
        FailureKind::PcieDowngrade => {
            h.pcie[n] -= 1;
            if h.pcie[n] == 0 {
                for nic in 0..h.topo.node_spec.nic_count {
                    h.topo.apply_delta(&TopologyDelta::scale(ComponentId::HostLink { node: n, nic }, 1.0))?;
                }
            }
        }
        FailureKind::GpuFail | FailureKind::CudaAllocErr | FailureKind::RowRemapPending => {
            if let Some(c) = h.flags[n].get_mut(&ev.kind) {
                *c -= 1;
            }
        }
        FailureKind::HbmCorrupt => {}
    }
    Ok(Some(effect))
}
