//! Health checks, alert rules, detection latency and the tiered metric store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::{ClusterHealth, FailureClass, FailureEvent, FailureKind};
use crate::simcore::{Dist, RngStream, DAY, HOUR, MINUTE};
use crate::topology::{LinkKind, NodeId, Vertex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitoringError {
    #[error("intrusive check {kind:?} refused: node {node} is running a job")]
    NodeBusy { node: NodeId, kind: CheckKind },
    #[error("invalid monitoring config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    PcieBw,
    RemappedRows,
    PowerThrottleFlag,
    GpuMemBw,
    Ping,
    IperfLike,
    DcgmL3Like,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::PcieBw,
        CheckKind::RemappedRows,
        CheckKind::PowerThrottleFlag,
        CheckKind::GpuMemBw,
        CheckKind::Ping,
        CheckKind::IperfLike,
        CheckKind::DcgmL3Like,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CheckKind::PcieBw => "pcie_bw",
            CheckKind::RemappedRows => "remapped_rows",
            CheckKind::PowerThrottleFlag => "power_throttle_flag",
            CheckKind::GpuMemBw => "gpu_mem_bw",
            CheckKind::Ping => "ping",
            CheckKind::IperfLike => "iperf_like",
            CheckKind::DcgmL3Like => "dcgm_l3_like",
        }
    }

    /// Continuous readings carry measurement noise; counts and flags do not.
    fn noisy(self) -> bool {
        matches!(self, CheckKind::PcieBw | CheckKind::GpuMemBw | CheckKind::IperfLike)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Below,
    Above,
}

impl Comparison {
    pub fn violates(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::Below => value < threshold,
            Comparison::Above => value > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthCheck {
    pub kind: CheckKind,
    pub intrusive: bool,
    pub period: f64,
    pub runtime: f64,
}

impl HealthCheck {
    pub fn default_for(kind: CheckKind) -> Self {
        let (intrusive, period, runtime) = match kind {
            CheckKind::PcieBw => (false, HOUR, 10.0),
            CheckKind::RemappedRows => (false, HOUR, 1.0),
            CheckKind::PowerThrottleFlag => (false, MINUTE, 0.1),
            CheckKind::GpuMemBw => (false, 5.0 * MINUTE, 5.0),
            CheckKind::Ping => (false, MINUTE, 0.1),
            CheckKind::IperfLike => (false, HOUR, 30.0),
            CheckKind::DcgmL3Like => (true, DAY, 30.0 * MINUTE),
        };
        HealthCheck { kind, intrusive, period, runtime }
    }
}

/// What a check can observe about a node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeCondition {
    pub up: bool,
    /// Fraction of compute ports that are live.
    pub live_ports: f64,
    /// Multiplier on host-link (PCIe) bandwidth.
    pub host_link_scale: f64,
    pub throttled: bool,
    pub gpu_failed: bool,
    pub cuda_errors: bool,
    pub pending_row_remaps: u32,
    pub hbm_corrupt: bool,
}

impl NodeCondition {
    pub fn healthy() -> Self {
        NodeCondition { up: true, live_ports: 1.0, host_link_scale: 1.0, ..Default::default() }
    }

    pub fn of(health: &ClusterHealth, node: NodeId) -> Self {
        let topo = &health.topo;
        let mut c = NodeCondition::healthy();
        c.up = health.node_up(node);
        let (mut live, mut total) = (0usize, 0usize);
        let mut scale: f64 = 1.0;
        for &h in topo.out_links(Vertex::Host(node)) {
            let l = topo.link(h);
            let LinkKind::Host { nic, .. } = l.kind else { continue };
            scale = scale.min(if l.is_up() { l.scale } else { 0.0 });
            for &a in topo.out_links(Vertex::Nic(node, nic)) {
                let al = topo.link(a);
                if matches!(al.kind, LinkKind::Access { .. }) {
                    total += 1;
                    live += usize::from(al.is_up());
                }
            }
        }
        c.live_ports = if total == 0 { 0.0 } else { live as f64 / total as f64 };
        c.host_link_scale = scale;
        c.throttled = health.slowdown(node) > 1.0;
        for ev in health.active().filter(|e| e.target.node == node) {
            c.add_fault(ev.kind, ev.magnitude);
        }
        c
    }

    pub fn add_fault(&mut self, kind: FailureKind, magnitude: f64) {
        match kind {
            FailureKind::HgxBoard | FailureKind::Dimm | FailureKind::NvlinkSwitch => self.up = false,
            FailureKind::GpuFail => self.gpu_failed = true,
            FailureKind::CudaAllocErr => self.cuda_errors = true,
            FailureKind::RowRemapPending => self.pending_row_remaps += 1,
            FailureKind::HbmCorrupt => self.hbm_corrupt = true,
            FailureKind::PcieDowngrade => self.host_link_scale = self.host_link_scale.min(magnitude),
            FailureKind::PowerFeed => self.throttled = true,
            FailureKind::PortFail | FailureKind::PcieLinkFail => self.live_ports = (self.live_ports - 0.125).max(0.0),
        }
    }

    /// Noise-free reading of a check.
    pub fn reading(&self, kind: CheckKind, cfg: &MonitoringConfig) -> f64 {
        match kind {
            CheckKind::PcieBw => cfg.pcie_nominal * cfg.pcie_efficiency * self.host_link_scale,
            CheckKind::RemappedRows => self.pending_row_remaps as f64,
            CheckKind::PowerThrottleFlag => f64::from(u8::from(self.throttled)),
            CheckKind::GpuMemBw => {
                if self.cuda_errors {
                    0.0
                } else if self.gpu_failed {
                    0.5
                } else {
                    1.0
                }
            }
            CheckKind::Ping => {
                if self.up {
                    self.live_ports
                } else {
                    0.0
                }
            }
            CheckKind::IperfLike => self.live_ports,
            CheckKind::DcgmL3Like => {
                f64::from(u8::from(self.hbm_corrupt) + u8::from(self.gpu_failed) + u8::from(self.cuda_errors))
                    + self.pending_row_remaps as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthCheckResult {
    pub node: NodeId,
    pub kind: CheckKind,
    pub time: f64,
    /// Absent when the check could not run to completion (node down).
    pub value: Option<f64>,
    pub pass: bool,
}

/// Runs one check against the node's simulated state and records the
/// reading as a metric sample.
pub fn run_health_check(
    health: &ClusterHealth,
    node: NodeId,
    check: &HealthCheck,
    busy: bool,
    cfg: &MonitoringConfig,
    t: f64,
    rng: &mut RngStream,
) -> Result<HealthCheckResult, MonitoringError> {
    if check.intrusive && busy {
        return Err(MonitoringError::NodeBusy { node, kind: check.kind });
    }
    let cond = NodeCondition::of(health, node);
    Ok(check_result(node, check.kind, &cond, cfg, t, rng))
}

fn check_result(
    node: NodeId,
    kind: CheckKind,
    cond: &NodeCondition,
    cfg: &MonitoringConfig,
    t: f64,
    rng: &mut RngStream,
) -> HealthCheckResult {
    if !cond.up && kind != CheckKind::Ping {
        return HealthCheckResult { node, kind, time: t, value: None, pass: false };
    }
    let mut v = cond.reading(kind, cfg);
    if kind.noisy() {
        v *= 1.0 + cfg.noise * rng.normal(0.0, 1.0);
    }
    let pass = cfg.rule_for(kind).is_none_or(|r| !r.comparison.violates(v, r.threshold));
    HealthCheckResult { node, kind, time: t, value: Some(v), pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlertRule {
    pub name: String,
    pub check: CheckKind,
    pub window: usize,
    pub threshold: f64,
    pub comparison: Comparison,
}

impl AlertRule {
    pub fn default_for(check: CheckKind) -> Self {
        let (window, threshold, comparison) = match check {
            CheckKind::PcieBw => (12, 3.4, Comparison::Below),
            CheckKind::RemappedRows => (1, 0.5, Comparison::Above),
            CheckKind::PowerThrottleFlag => (1, 0.5, Comparison::Above),
            CheckKind::GpuMemBw => (1, 0.8, Comparison::Below),
            CheckKind::Ping => (1, 0.999, Comparison::Below),
            CheckKind::IperfLike => (1, 0.9, Comparison::Below),
            CheckKind::DcgmL3Like => (1, 0.5, Comparison::Above),
        };
        AlertRule { name: format!("{}_mean", check.label()), check, window, threshold, comparison }
    }

    pub fn validate(&self) -> Result<(), MonitoringError> {
        if self.window == 0 {
            return Err(MonitoringError::Invalid(format!("rule {}: window must be >= 1", self.name)));
        }
        if !self.threshold.is_finite() {
            return Err(MonitoringError::Invalid(format!("rule {}: threshold must be finite", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    pub time: f64,
    pub node: NodeId,
    pub rule: String,
    pub evidence: Vec<f64>,
}

impl Alert {
    pub const HEADER: &'static str = "time_s\tnode\trule\tevidence";

    pub fn row(&self) -> String {
        let ev: Vec<String> = self.evidence.iter().map(|v| format!("{v:.3}")).collect();
        format!("{:.3}\t{}\t{}\t{}", self.time, self.node, self.rule, ev.join(","))
    }
}

/// Per-node sample history for one check, plus the firing latch of every rule.
#[derive(Debug, Clone, Default)]
pub struct AlertState {
    history: BTreeMap<(NodeId, CheckKind), Vec<(f64, f64)>>,
    firing: BTreeMap<(NodeId, String), bool>,
}

impl AlertState {
    pub fn record(&mut self, r: &HealthCheckResult) {
        if let Some(v) = r.value {
            let h = self.history.entry((r.node, r.kind)).or_default();
            debug_assert!(h.last().is_none_or(|&(t, _)| t <= r.time));
            h.push((r.time, v));
        }
    }

    pub fn history(&self, node: NodeId, kind: CheckKind) -> &[(f64, f64)] {
        self.history.get(&(node, kind)).map_or(&[], Vec::as_slice)
    }

    /// Drops history older than what any rule can look at.
    pub fn trim(&mut self, keep: usize) {
        for h in self.history.values_mut() {
            if h.len() > 2 * keep {
                h.drain(..h.len() - keep);
            }
        }
    }
}

/// Aggregates each rule's window of the latest samples at or before `t` and
/// fires once per sustained violation.
pub fn evaluate_alert_rules(rules: &[AlertRule], state: &mut AlertState, t: f64) -> Vec<Alert> {
    let mut out = Vec::new();
    let keys: Vec<(NodeId, CheckKind)> = state.history.keys().copied().collect();
    for rule in rules {
        for &(node, kind) in keys.iter().filter(|k| k.1 == rule.check) {
            let h = &state.history[&(node, kind)];
            let end = h.partition_point(|&(ts, _)| ts <= t);
            let latch = state.firing.entry((node, rule.name.clone())).or_insert(false);
            if end < rule.window {
                continue;
            }
            let window = &h[end - rule.window..end];
            let mean = window.iter().map(|&(_, v)| v).sum::<f64>() / rule.window as f64;
            let violated = rule.comparison.violates(mean, rule.threshold);
            if violated && !*latch {
                out.push(Alert { time: window[rule.window - 1].0, node, rule: rule.name.clone(), evidence: window.iter().map(|&(_, v)| v).collect() });
            }
            *latch = violated;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Reactive,
    Proactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitoringConfig {
    pub posture: Posture,
    pub checks: Vec<HealthCheck>,
    pub rules: Vec<AlertRule>,
    /// Platform notices a crashed host.
    pub hard_crash_latency: f64,
    /// Humans noticing a misbehaving job.
    pub reactive_latency: Dist,
    /// Relative Gaussian noise on continuous readings.
    pub noise: f64,
    /// Nominal host-link bandwidth and the fraction a bandwidth test achieves.
    pub pcie_nominal: f64,
    pub pcie_efficiency: f64,
    /// Longest a structural detection is simulated before giving up.
    pub max_probe: f64,
}

impl Default for MonitoringConfig {
    fn default() -> Self {
        MonitoringConfig {
            posture: Posture::Proactive,
            checks: CheckKind::ALL.iter().map(|&k| HealthCheck::default_for(k)).collect(),
            rules: CheckKind::ALL.iter().map(|&k| AlertRule::default_for(k)).collect(),
            hard_crash_latency: 5.0 * MINUTE,
            reactive_latency: Dist::LogNormal { mean: DAY, sigma: 1.0 },
            noise: 0.05,
            pcie_nominal: 32.0,
            pcie_efficiency: 0.8,
            max_probe: 60.0 * DAY,
        }
    }
}

impl MonitoringConfig {
    pub fn validate(&self) -> Result<(), MonitoringError> {
        for r in &self.rules {
            r.validate()?;
        }
        for c in &self.checks {
            if !(c.period > 0.0) || !(c.runtime >= 0.0) {
                return Err(MonitoringError::Invalid(format!("check {}: period must be > 0", c.kind.label())));
            }
        }
        self.reactive_latency.validate().map_err(|e| MonitoringError::Invalid(e.to_string()))?;
        if !(self.hard_crash_latency >= 0.0) || !(self.noise >= 0.0) || !(self.max_probe > 0.0) {
            return Err(MonitoringError::Invalid("latencies and noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn rule_for(&self, kind: CheckKind) -> Option<&AlertRule> {
        self.rules.iter().find(|r| r.check == kind)
    }

    pub fn check(&self, kind: CheckKind) -> Option<&HealthCheck> {
        self.checks.iter().find(|c| c.kind == kind)
    }
}

/// The check whose rule catches a failure kind, if any.
pub fn detecting_check(kind: FailureKind) -> Option<CheckKind> {
    match kind {
        FailureKind::PcieDowngrade => Some(CheckKind::PcieBw),
        FailureKind::RowRemapPending => Some(CheckKind::RemappedRows),
        FailureKind::PowerFeed => Some(CheckKind::PowerThrottleFlag),
        FailureKind::GpuFail | FailureKind::CudaAllocErr => Some(CheckKind::GpuMemBw),
        FailureKind::PortFail | FailureKind::PcieLinkFail => Some(CheckKind::Ping),
        FailureKind::HbmCorrupt => Some(CheckKind::DcgmL3Like),
        FailureKind::HgxBoard | FailureKind::Dimm | FailureKind::NvlinkSwitch => None,
    }
}

/// Time from onset until the check schedule and alert rule would flag the
/// event, replaying noisy readings through the rule. `None` when the check
/// cannot run (intrusive on a busy node) or never fires within `max_probe`.
pub fn structural_latency(ev: &FailureEvent, busy: bool, cfg: &MonitoringConfig, rng: &mut RngStream) -> Option<f64> {
    let kind = detecting_check(ev.kind)?;
    let check = cfg.check(kind)?;
    let rule = cfg.rule_for(kind)?;
    if check.intrusive && busy {
        return None;
    }
    let healthy = NodeCondition::healthy();
    let mut faulty = NodeCondition::healthy();
    faulty.add_fault(ev.kind, ev.magnitude);
    let first = (ev.onset / check.period).ceil() * check.period;
    let mut state = AlertState::default();
    let node = ev.target.node;
    for j in 1..rule.window {
        let t = first - (rule.window - j) as f64 * check.period;
        state.record(&check_result(node, kind, &healthy, cfg, t, rng));
    }
    let rules = std::slice::from_ref(rule);
    let mut k = 0.0;
    loop {
        let t = first + k * check.period;
        if t - ev.onset > cfg.max_probe {
            return None;
        }
        state.record(&check_result(node, kind, &faulty, cfg, t, rng));
        if !evaluate_alert_rules(rules, &mut state, t).is_empty() {
            return Some(t + check.runtime - ev.onset);
        }
        state.trim(rule.window);
        k += 1.0;
    }
}

/// Detection latency of an event. Hard crashes are seen by the platform in
/// both postures. Otherwise the reactive latency is a draw keyed by the
/// event id, and the proactive posture takes the earlier of that and the
/// structural detection, so the same event is never detected later.
pub fn detection_latency(
    ev: &FailureEvent,
    posture: Posture,
    busy: bool,
    cfg: &MonitoringConfig,
    stream: &RngStream,
) -> f64 {
    if ev.kind.class() == FailureClass::HardCrash {
        return cfg.hard_crash_latency;
    }
    let mut r = stream.substream(format_args!("reactive/{}", ev.id));
    let reactive = r.draw(&cfg.reactive_latency).unwrap_or(cfg.reactive_latency.mean());
    match posture {
        Posture::Reactive => reactive,
        Posture::Proactive => {
            let mut p = stream.substream(format_args!("probe/{}", ev.id));
            structural_latency(ev, busy, cfg, &mut p).map_or(reactive, |s| s.min(reactive))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricClass {
    Gpu,
    System,
}

impl MetricClass {
    pub fn cadence(self) -> f64 {
        match self {
            MetricClass::Gpu => 5.0,
            MetricClass::System => 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Raw,
    FiveMinute,
    Hourly,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Raw, Tier::FiveMinute, Tier::Hourly];

    pub fn bucket(self) -> f64 {
        match self {
            Tier::Raw => 0.0,
            Tier::FiveMinute => 5.0 * MINUTE,
            Tier::Hourly => HOUR,
        }
    }

    /// Maximum age kept in this tier.
    pub fn retention(self) -> f64 {
        match self {
            Tier::Raw => 30.0 * DAY,
            Tier::FiveMinute => 90.0 * DAY,
            Tier::Hourly => 365.0 * DAY,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Tier::Raw => "raw",
            Tier::FiveMinute => "5min",
            Tier::Hourly => "1h",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub time: f64,
    pub source: String,
    pub name: String,
    pub value: f64,
    pub class: MetricClass,
}

type SeriesKey = (String, String);

#[derive(Debug, Clone, Default)]
pub struct MetricStore {
    raw: BTreeMap<SeriesKey, Vec<(f64, f64)>>,
    /// (bucket start, sum, count) per tier.
    agg: [BTreeMap<SeriesKey, BTreeMap<i64, (f64, u64)>>; 2],
    now: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub tier: Tier,
    pub points: Vec<(f64, f64)>,
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn series_count(&self) -> usize {
        self.raw.len()
    }

    fn insert(&mut self, s: &MetricSample) {
        let key = (s.source.clone(), s.name.clone());
        let raw = self.raw.entry(key.clone()).or_default();
        let pos = raw.partition_point(|&(t, _)| t <= s.time);
        raw.insert(pos, (s.time, s.value));
        for (i, tier) in [Tier::FiveMinute, Tier::Hourly].into_iter().enumerate() {
            let b = (s.time / tier.bucket()).floor() as i64;
            let e = self.agg[i].entry(key.clone()).or_default().entry(b).or_insert((0.0, 0));
            e.0 += s.value;
            e.1 += 1;
        }
    }

    /// Drops data past each tier's retention relative to `now`.
    fn compact(&mut self) {
        let now = self.now;
        for v in self.raw.values_mut() {
            let cut = v.partition_point(|&(t, _)| now - t > Tier::Raw.retention());
            v.drain(..cut);
        }
        for (i, tier) in [Tier::FiveMinute, Tier::Hourly].into_iter().enumerate() {
            for m in self.agg[i].values_mut() {
                while m.first_key_value().is_some_and(|(&b, _)| now - (b as f64 + 1.0) * tier.bucket() > tier.retention()) {
                    m.pop_first();
                }
            }
        }
    }

    /// Finest tier that still holds data of age `now - t`.
    pub fn tier_for(&self, t: f64) -> Option<Tier> {
        let age = self.now - t;
        Tier::ALL.into_iter().find(|tier| age <= tier.retention())
    }

    /// Points of a series in `[t0, t1)` from the finest tier covering `t0`.
    pub fn query(&self, source: &str, name: &str, t0: f64, t1: f64) -> Option<QueryResult> {
        let tier = self.tier_for(t0)?;
        let key = (source.to_string(), name.to_string());
        let points = match tier {
            Tier::Raw => self.raw.get(&key)?.iter().copied().filter(|&(t, _)| t >= t0 && t < t1).collect(),
            _ => {
                let i = if tier == Tier::FiveMinute { 0 } else { 1 };
                let w = tier.bucket();
                self.agg[i]
                    .get(&key)?
                    .iter()
                    .filter(|(&b, _)| b as f64 * w >= t0 && (b as f64) * w < t1)
                    .map(|(&b, &(s, c))| (b as f64 * w, s / c as f64))
                    .collect()
            }
        };
        Some(QueryResult { tier, points })
    }

    /// Sample-weighted mean of a series over `[t0, t1)` from the finest tier
    /// covering `t0`. Aggregate tiers keep sums and counts, so this matches
    /// the raw mean whenever the interval is bucket-aligned.
    pub fn mean(&self, source: &str, name: &str, t0: f64, t1: f64) -> Option<f64> {
        self.mean_in(self.tier_for(t0)?, source, name, t0, t1)
    }

    /// As [`MetricStore::mean`], from one tier regardless of age.
    pub fn mean_in(&self, tier: Tier, source: &str, name: &str, t0: f64, t1: f64) -> Option<f64> {
        let key = (source.to_string(), name.to_string());
        let (sum, n) = match tier {
            Tier::Raw => self.raw.get(&key)?.iter().filter(|&&(t, _)| t >= t0 && t < t1).fold((0.0, 0u64), |(s, n), &(_, v)| (s + v, n + 1)),
            _ => {
                let i = if tier == Tier::FiveMinute { 0 } else { 1 };
                let w = tier.bucket();
                self.agg[i]
                    .get(&key)?
                    .iter()
                    .filter(|(&b, _)| b as f64 * w >= t0 && (b as f64) * w < t1)
                    .fold((0.0, 0u64), |(s, n), (_, &(bs, bc))| (s + bs, n + bc))
            }
        };
        (n > 0).then(|| sum / n as f64)
    }

    /// Columnar text for one tier: `source name time value`.
    pub fn tier_rows(&self, tier: Tier) -> Vec<String> {
        let mut out = Vec::new();
        match tier {
            Tier::Raw => {
                for ((src, name), v) in &self.raw {
                    out.extend(v.iter().map(|(t, x)| format!("{src}\t{name}\t{t:.3}\t{x:.6}")));
                }
            }
            _ => {
                let i = if tier == Tier::FiveMinute { 0 } else { 1 };
                for ((src, name), m) in &self.agg[i] {
                    out.extend(
                        m.iter().map(|(&b, &(s, c))| format!("{src}\t{name}\t{:.3}\t{:.6}", b as f64 * tier.bucket(), s / c as f64)),
                    );
                }
            }
        }
        out
    }
}

/// Appends samples, advances the store clock to `t` and applies retention.
pub fn export_metrics(store: &mut MetricStore, samples: &[MetricSample], t: f64) {
    for s in samples {
        store.insert(s);
    }
    store.now = store.now.max(t);
    store.compact();
}
