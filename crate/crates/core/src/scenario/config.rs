use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::collectives::CollectiveMode;
use crate::faults::FaultModel;
use crate::monitoring::MonitoringConfig;
use crate::network::{PathModelParams, Protocol};
use crate::power::PowerParams;
use crate::resilience::{IntervalPolicy, StorageKind, StorageParams};
use crate::simcore::{DAY, MONTH};
use crate::topology::{
    build_fat_tree, build_vela_topology, ClusterTopology, FatTreeParams, NodeSpec, SwitchSpec, TopologyError, VelaParams,
};
use crate::workload::JobSpec;

const PRESETS: [(&str, &str); 7] = [
    ("vela-2022", include_str!("../../presets/vela-2022.toml")),
    ("vela-2023", include_str!("../../presets/vela-2023.toml")),
    ("bluevela-pod", include_str!("../../presets/bluevela-pod.toml")),
    ("vela-resilience-month", include_str!("../../presets/vela-resilience-month.toml")),
    ("fig3-sweep", include_str!("../../presets/fig3-sweep.toml")),
    ("fig4", include_str!("../../presets/fig4.toml")),
    ("straggler", include_str!("../../presets/straggler.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    Vela {
        racks: usize,
        servers_per_rack: usize,
        spines: usize,
        #[serde(default = "two")]
        uplinks_per_spine: usize,
        #[serde(default = "SwitchSpec::ethernet_100g")]
        tor: SwitchSpec,
        #[serde(default = "SwitchSpec::ethernet_spine_100g")]
        spine: SwitchSpec,
    },
    FatTree {
        su_count: usize,
        nodes_per_su: usize,
        rails: u32,
        #[serde(default = "SwitchSpec::infiniband_ndr")]
        leaf: SwitchSpec,
        #[serde(default = "SwitchSpec::infiniband_ndr")]
        spine: SwitchSpec,
    },
}

fn two() -> usize {
    2
}

impl TopologyConfig {
    pub fn build(&self, node: &NodeSpec) -> Result<ClusterTopology, TopologyError> {
        match self {
            TopologyConfig::Vela { racks, servers_per_rack, spines, uplinks_per_spine, tor, spine } => {
                build_vela_topology(&VelaParams {
                    racks: *racks,
                    servers_per_rack: *servers_per_rack,
                    spines: *spines,
                    uplinks_per_spine: *uplinks_per_spine,
                    node: node.clone(),
                    tor: tor.clone(),
                    spine: spine.clone(),
                })
            }
            TopologyConfig::FatTree { su_count, nodes_per_su, rails, leaf, spine } => build_fat_tree(&FatTreeParams {
                su_count: *su_count,
                nodes_per_su: *nodes_per_su,
                rails: *rails,
                node: node.clone(),
                leaf: leaf.clone(),
                spine: spine.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub path_model: PathModelParams,
    pub mode: CollectiveMode,
    pub salt: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { path_model: PathModelParams::default(), mode: CollectiveMode::Analytic, salt: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsConfig {
    pub enabled: bool,
    pub model: FaultModel,
}

impl Default for FaultsConfig {
    fn default() -> Self {
        FaultsConfig { enabled: true, model: FaultModel::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    pub params: PowerParams,
    /// Random feed-loss onsets checked per run.
    pub safety_trials: usize,
    /// GPU draw during training, W.
    pub gpu_power_w: f64,
    /// GPU draw of a braked server, W.
    pub braked_gpu_w: f64,
    /// Servers sharing one PDU pair. Defaults to the Vela rack size, or six
    /// for fat trees whose scalable units span several racks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_servers: Option<usize>,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig { params: PowerParams::default(), safety_trials: 1000, gpu_power_w: 400.0, braked_gpu_w: 150.0, domain_servers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    pub policy: IntervalPolicy,
    /// Assumed checkpoint cost; derived from the storage write time when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig { policy: IntervalPolicy::Young, delta: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub pool_fraction: f64,
    /// Fixed scheduling delay added to every restart, seconds.
    pub reschedule_time: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { pool_fraction: 0.10, reschedule_time: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusbwExperiment {
    pub gpus: usize,
    pub protocols: Vec<Protocol>,
    pub sizes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingExperiment {
    pub gpu_counts: Vec<usize>,
    pub size: f64,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StragglerExperiment {
    pub job: usize,
    /// Index of the braked node within the job's placement.
    #[serde(default)]
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Experiments {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub busbw: Option<BusbwExperiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingExperiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straggler: Option<StragglerExperiment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Iterations of the per-step storage series written for job 0.
    pub storage_series_iterations: usize,
    /// Hourly health samples exported to the metric store.
    pub metrics: bool,
    pub event_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { storage_series_iterations: 1000, metrics: true, event_log: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub horizon: f64,
    pub topology: TopologyConfig,
    pub node: NodeSpec,
    pub network: NetworkConfig,
    pub faults: FaultsConfig,
    pub power: PowerConfig,
    pub storage: StorageParams,
    pub checkpoint: CheckpointConfig,
    pub monitoring: MonitoringConfig,
    pub scheduler: SchedulerConfig,
    pub jobs: Vec<JobSpec>,
    pub experiments: Experiments,
    pub output: OutputConfig,
}

/// Section defaults every scenario starts from. Topology has none.
fn defaults_table() -> toml::Table {
    #[derive(Serialize)]
    struct Defaults {
        name: &'static str,
        seed: u64,
        horizon: f64,
        network: NetworkConfig,
        faults: FaultsConfig,
        power: PowerConfig,
        checkpoint: CheckpointConfig,
        monitoring: MonitoringConfig,
        scheduler: SchedulerConfig,
        jobs: Vec<JobSpec>,
        experiments: Experiments,
        output: OutputConfig,
    }
    let d = Defaults {
        name: "scenario",
        seed: 0,
        horizon: MONTH,
        network: NetworkConfig::default(),
        faults: FaultsConfig::default(),
        power: PowerConfig::default(),
        checkpoint: CheckpointConfig::default(),
        monitoring: MonitoringConfig::default(),
        scheduler: SchedulerConfig::default(),
        jobs: Vec::new(),
        experiments: Experiments::default(),
        output: OutputConfig::default(),
    };
    toml::Table::try_from(d).expect("defaults serialize")
}

/// Recursive merge: tables merge key by key, everything else is replaced.
pub fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { path: path.into(), message: message.into() }
}

fn resolve(text: &str, origin: &str, base_dir: Option<&Path>, depth: usize) -> Result<toml::Table, ScenarioError> {
    if depth > 8 {
        return Err(schema("include", format!("include nesting too deep at {origin}")));
    }
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| schema(origin, e.to_string()))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| schema("include", "entries must be strings")))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(schema("include", "must be an array of preset names or paths")),
    };
    let mut out = toml::Table::new();
    for inc in includes {
        let sub = if let Some(t) = preset_text(&inc) {
            resolve(t, &inc, None, depth + 1)?
        } else if inc.ends_with(".toml") {
            let p: PathBuf = base_dir.map_or_else(|| PathBuf::from(&inc), |d| d.join(&inc));
            let text = std::fs::read_to_string(&p).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
            resolve(&text, &p.display().to_string(), p.parent(), depth + 1)?
        } else {
            return Err(ScenarioError::UnknownPreset(inc));
        };
        deep_merge(&mut out, sub);
    }
    deep_merge(&mut out, table);
    Ok(out)
}

/// Expands `profile` in `[node]` and `kind` in `[storage]` into full tables.
fn expand_profiles(t: &mut toml::Table) -> Result<(), ScenarioError> {
    let node = match t.remove("node") {
        Some(toml::Value::Table(n)) => n,
        None => toml::Table::new(),
        Some(_) => return Err(schema("node", "must be a table")),
    };
    let mut node = node;
    let profile = match node.remove("profile") {
        None => "vela".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(schema("node.profile", "must be a string")),
    };
    let base = match profile.as_str() {
        "vela" => NodeSpec::vela(),
        "blue_vela" => NodeSpec::blue_vela(),
        other => return Err(schema("node.profile", format!("unknown profile `{other}` (vela, blue_vela)"))),
    };
    let mut full = toml::Table::try_from(base).expect("node spec serializes");
    deep_merge(&mut full, node);
    t.insert("node".into(), toml::Value::Table(full));

    let storage = match t.remove("storage") {
        Some(toml::Value::Table(s)) => s,
        None => toml::Table::new(),
        Some(_) => return Err(schema("storage", "must be a table")),
    };
    let kind: StorageKind = match storage.get("kind") {
        None => StorageKind::ScaleCache,
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| schema("storage.kind", e.message().to_string()))?,
    };
    let mut full = toml::Table::try_from(StorageParams::for_kind(kind)).expect("storage serializes");
    deep_merge(&mut full, storage);
    t.insert("storage".into(), toml::Value::Table(full));
    Ok(())
}

/// Names the offending key; a missing field is appended to its parent path.
fn path_error(e: serde_path_to_error::Error<toml::de::Error>) -> ScenarioError {
    let parent = e.path().to_string();
    let message = e.into_inner().message().to_string();
    let missing = message.strip_prefix("missing field `").and_then(|m| m.split('`').next());
    let path = match (missing, parent.as_str()) {
        (Some(f), ".") => f.to_string(),
        (Some(f), p) => format!("{p}.{f}"),
        (None, p) => p.to_string(),
    };
    schema(path, message)
}

fn finish(resolved: toml::Table) -> Result<ScenarioConfig, ScenarioError> {
    let mut t = defaults_table();
    deep_merge(&mut t, resolved);
    expand_profiles(&mut t)?;
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(toml::Value::Table(t)).map_err(path_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_scenario_str(text: &str, base_dir: Option<&Path>) -> Result<ScenarioConfig, ScenarioError> {
    finish(resolve(text, "<scenario>", base_dir, 0)?)
}

/// Reads a scenario file, resolving `include` entries (preset names or
/// paths relative to the file) before the file's own keys.
pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    finish(resolve(&text, &path.display().to_string(), path.parent(), 0)?)
}

pub fn preset(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let text = preset_text(name).ok_or_else(|| ScenarioError::UnknownPreset(name.to_string()))?;
    finish(resolve(text, name, None, 0)?)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let pos = |path: &str, v: f64| if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(schema(path, format!("must be >= 0, got {v}"))) };
        pos("horizon", self.horizon)?;
        self.node.validate().map_err(|e| schema("node", e.to_string()))?;
        self.network.path_model.validate().map_err(|e| schema("network.path_model", e.to_string()))?;
        for (k, &r) in &self.faults.model.rates {
            pos(&format!("faults.model.rates.{k}"), r)?;
        }
        self.faults.model.validate().map_err(|e| schema("faults.model", e.to_string()))?;
        self.power.params.validate().map_err(|e| schema("power.params", e.to_string()))?;
        self.storage.validate().map_err(|e| schema("storage", e.to_string()))?;
        self.monitoring.validate().map_err(|e| schema("monitoring", e.to_string()))?;
        if let IntervalPolicy::Fixed { interval } = self.checkpoint.policy {
            if !(interval > 0.0) {
                return Err(schema("checkpoint.policy.interval", "must be > 0"));
            }
        }
        if let Some(d) = self.checkpoint.delta {
            if !(d > 0.0) {
                return Err(schema("checkpoint.delta", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.scheduler.pool_fraction) {
            return Err(schema("scheduler.pool_fraction", "must be in [0, 1)"));
        }
        pos("scheduler.reschedule_time", self.scheduler.reschedule_time)?;
        if self.power.domain_servers == Some(0) {
            return Err(schema("power.domain_servers", "must be >= 1"));
        }
        for (i, j) in self.jobs.iter().enumerate() {
            j.validate(self.node.gpus_per_node).map_err(|e| schema(format!("jobs[{i}]"), e.to_string()))?;
        }
        if let Some(s) = &self.experiments.straggler {
            if s.job >= self.jobs.len() {
                return Err(schema("experiments.straggler.job", "no such job"));
            }
        }
        if let Some(b) = &self.experiments.busbw {
            if b.sizes.iter().any(|&s| !(s > 0.0)) || b.protocols.is_empty() || b.gpus < 2 {
                return Err(schema("experiments.busbw", "needs >= 2 GPUs, protocols and positive sizes"));
            }
        }
        if let Some(s) = &self.experiments.scaling {
            if s.gpu_counts.is_empty() || !(s.size > 0.0) {
                return Err(schema("experiments.scaling", "needs GPU counts and a positive size"));
            }
        }
        Ok(())
    }

    /// Replaces one dotted key (`checkpoint.policy`, `scheduler.pool_fraction`)
    /// and re-validates.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<ScenarioConfig, ScenarioError> {
        let mut t = toml::Table::try_from(self).map_err(|e| schema(key, e.to_string()))?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| schema(key, "empty key"))?;
        let mut cur = &mut t;
        for p in parts {
            cur = match cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
                toml::Value::Table(x) => x,
                _ => return Err(schema(key, format!("`{p}` is not a table"))),
            };
        }
        cur.insert(last.to_string(), value);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(toml::Value::Table(t)).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn power_domain_servers(&self) -> usize {
        match (self.power.domain_servers, &self.topology) {
            (Some(n), _) => n,
            (None, TopologyConfig::Vela { servers_per_rack, .. }) => *servers_per_rack,
            (None, TopologyConfig::FatTree { .. }) => 6,
        }
    }

    pub fn build_topology(&self) -> Result<ClusterTopology, ScenarioError> {
        self.topology.build(&self.node).map_err(|e| schema("topology", e.to_string()))
    }

    /// Echo of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn is_month_run(&self) -> bool {
        !self.jobs.is_empty() && self.horizon > 0.0
    }

    pub fn horizon_days(&self) -> f64 {
        self.horizon / DAY
    }
}
