use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::experiments::{busbw_sweep, power_safety, protocol_table, scaling_sweep, straggler, ProtocolRow, PowerVerdict, StragglerResult};
use super::sim::{simulate_cluster, ClusterOutcome, DetectionSummary, JobSummary, ALERT_HEADER, QUEUE_HEADER, STEP_HEADER};
use super::ScenarioError;
use crate::collectives::{BusbwRow, busbw_table};
use crate::faults::FailureEvent;
use crate::monitoring::Tier;
use crate::power::PowerTrace;
use crate::resilience::{steady_state_index, step_spread, storage_step_series, CheckpointRecord, LostTime, LostTimeReport};
use crate::scheduler::StatusChange;
use crate::simcore::RngStream;

/// Lost-time fraction a month run must stay under.
pub const LOST_TIME_LIMIT: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSummary {
    pub iterations: usize,
    pub mean_step: f64,
    pub steady_state_index: Option<usize>,
    pub steady_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub events_dispatched: u64,
    pub goodput: Option<f64>,
    pub lost_fraction: Option<f64>,
    pub lost_time_ok: Option<bool>,
    pub lost_time: Option<LostTimeReport>,
    pub tokens_per_day: f64,
    pub tflops_per_gpu: f64,
    pub jobs: Vec<JobSummary>,
    pub failures: BTreeMap<String, usize>,
    pub alerts: BTreeMap<String, usize>,
    pub detection: DetectionSummary,
    pub power: Option<PowerVerdict>,
    pub safety_pass: bool,
    pub straggler: Option<StragglerResult>,
    pub storage: Option<StorageSummary>,
    pub busbw: Vec<ProtocolRow>,
    pub scaling: Vec<BusbwRow>,
}

impl Summary {
    /// Flat scalar view used by sweeps.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if let Some(l) = &self.lost_time {
            m.insert("lost_fraction".into(), l.lost_fraction);
            m.insert("goodput".into(), l.goodput);
            m.insert("lost_seconds".into(), l.seconds.total() - l.seconds.productive);
        }
        if !self.jobs.is_empty() {
            m.insert("tokens_per_day".into(), self.tokens_per_day);
            m.insert("tflops_per_gpu".into(), self.tflops_per_gpu);
        }
        if self.detection.subtle_software_count > 0 {
            m.insert("subtle_detection_s".into(), self.detection.subtle_software_mean_s);
        }
        if let Some(s) = &self.straggler {
            m.insert("straggler_ratio".into(), s.ratio);
        }
        if let Some(p) = &self.power {
            m.insert("power_failures".into(), p.sweep.failures as f64);
        }
        if let Some(s) = &self.storage {
            m.insert("storage_mean_step".into(), s.mean_step);
            m.insert("storage_spread".into(), s.steady_spread);
        }
        if !self.scaling.is_empty() {
            let mean = self.scaling.iter().map(|r| r.busbw).sum::<f64>() / self.scaling.len() as f64;
            m.insert("scaling_busbw".into(), mean);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub horizon: f64,
    pub summary: Summary,
    /// Artifact name to file name inside the run directory.
    pub files: BTreeMap<String, String>,
    pub config: ScenarioConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Exit-code relevant outcome: every safety verdict held.
    pub fn safe(&self) -> bool {
        self.summary.safety_pass
    }
}

/// Per-run time series, keyed by file name.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: BTreeMap<String, String>,
}

impl Artifacts {
    fn table(&mut self, file: &str, header: &str, rows: impl IntoIterator<Item = String>) {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            s.push_str(&r);
            s.push('\n');
        }
        self.files.insert(file.to_string(), s);
    }
}

fn storage_summary(series: &[f64]) -> StorageSummary {
    let idx = steady_state_index(series, 50, 0.05);
    let steady = &series[idx.unwrap_or(0).min(series.len().saturating_sub(1))..];
    StorageSummary {
        iterations: series.len(),
        mean_step: series.iter().sum::<f64>() / series.len().max(1) as f64,
        steady_state_index: idx,
        steady_spread: if steady.is_empty() { 0.0 } else { step_spread(steady) },
    }
}

fn lost_rows(l: &LostTime) -> Vec<String> {
    let total = l.total();
    LostTime::LABELS
        .iter()
        .zip(l.values())
        .map(|(k, v)| format!("{k}\t{v:.3}\t{:.6}", if total > 0.0 { v / total } else { 0.0 }))
        .collect()
}

/// Runs everything the scenario asks for. Nothing is written to disk.
pub fn execute(cfg: &ScenarioConfig, seed: u64) -> Result<(RunReport, Artifacts), ScenarioError> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let topo = cfg.build_topology()?;
    let root = RngStream::new("scenario", seed);
    let mut art = Artifacts::default();

    let outcome = if cfg.is_month_run() { simulate_cluster(&cfg, seed)? } else { ClusterOutcome::default() };
    let (power, trace) = if cfg.power.safety_trials > 0 {
        let (v, t) = power_safety(&cfg, &topo, &root.substream("power"))?;
        (Some(v), t)
    } else {
        (None, PowerTrace::default())
    };
    let straggler = straggler(&cfg, &topo)?;
    let busbw = busbw_sweep(&cfg, &topo)?;
    let scaling = scaling_sweep(&cfg, &topo)?;
    let storage = match cfg.jobs.first() {
        Some(j) if cfg.output.storage_series_iterations > 0 => {
            let mut rng = root.substream("storage");
            let s = storage_step_series(&cfg.storage, j.base_step_compute, j.read_bytes_per_step, cfg.output.storage_series_iterations, &mut rng);
            art.table("storage_steps.tsv", "iteration\tstep_time_s", s.iter().enumerate().map(|(i, t)| format!("{i}\t{t:.6}")));
            Some(storage_summary(&s))
        }
        _ => None,
    };

    let mut alerts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &outcome.alert_rows {
        if let Some(rule) = r.split('\t').nth(2) {
            *alerts.entry(rule.to_string()).or_default() += 1;
        }
    }
    if cfg.is_month_run() {
        art.table("step_times.tsv", STEP_HEADER, outcome.step_rows.iter().cloned());
        art.table("queue.tsv", QUEUE_HEADER, outcome.queue_rows.iter().cloned());
        art.table("node_status.tsv", StatusChange::HEADER, outcome.status_log.iter().map(StatusChange::row));
        art.table("failures.tsv", FailureEvent::LOG_HEADER, outcome.failure_rows.iter().cloned());
        art.table("alerts.tsv", ALERT_HEADER, outcome.alert_rows.iter().cloned());
        art.table("checkpoints.tsv", CheckpointRecord::HEADER, outcome.checkpoint_rows.iter().cloned());
        let mut lost = LostTime::default();
        for j in &outcome.jobs {
            lost.add(&j.lost.seconds);
        }
        art.table("lost_time.tsv", "category\tseconds\tfraction", lost_rows(&lost));
        if let Some(store) = &outcome.metrics {
            for tier in Tier::ALL {
                art.table(&format!("metrics_{}.tsv", tier.label()), "source\tname\ttime_s\tvalue", store.tier_rows(tier));
            }
        }
        if cfg.output.event_log {
            art.table("events.log", "time_s\tsequence\ttarget\tevent", outcome.event_log.iter().cloned());
        }
    }
    if power.is_some() {
        art.table("power_trace.tsv", PowerTrace::HEADER, trace.rows());
    }
    if !busbw.is_empty() {
        art.table(
            "busbw.tsv",
            &format!("protocol\t{}", BusbwRow::HEADER),
            busbw.iter().map(|r| format!("{}\t{}", r.protocol.label(), r.row.to_tsv())),
        );
        art.files.insert("busbw_protocols.tsv".into(), protocol_table(&busbw));
    }
    if !scaling.is_empty() {
        art.files.insert("scaling.tsv".into(), busbw_table(&scaling));
    }

    let lost_fraction = outcome.lost.as_ref().map(|l| l.lost_fraction);
    let safety_pass = power.as_ref().is_none_or(|p| p.pass);
    let summary = Summary {
        events_dispatched: outcome.events_dispatched,
        goodput: outcome.lost.as_ref().map(|l| l.goodput),
        lost_fraction,
        lost_time_ok: lost_fraction.map(|f| f < LOST_TIME_LIMIT),
        lost_time: outcome.lost.clone(),
        tokens_per_day: outcome.jobs.iter().map(|j| j.tokens_per_day).sum(),
        tflops_per_gpu: outcome.jobs.first().map_or(0.0, |j| j.tflops_per_gpu),
        jobs: outcome.jobs,
        failures: outcome.failures,
        alerts,
        detection: outcome.detection,
        power,
        safety_pass,
        straggler,
        storage,
        busbw,
        scaling,
    };
    art.files.insert("config.toml".into(), cfg.to_toml());
    art.files.insert("seed.txt".into(), format!("{seed}\n"));
    let mut files: BTreeMap<String, String> = art.files.keys().map(|k| (k.clone(), k.clone())).collect();
    files.insert("summary".into(), "summary.json".into());
    files.insert("summary_text".into(), "summary.txt".into());
    let report = RunReport { name: cfg.name.clone(), seed, horizon: cfg.horizon, summary, files, config: cfg };
    art.files.insert("summary.txt".into(), summary_text(&report));
    art.files.insert("summary.json".into(), report.to_json());
    Ok((report, art))
}

/// Runs a scenario and, when `out` is given, writes every artifact there.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, out: Option<&Path>) -> Result<RunReport, ScenarioError> {
    let (report, art) = execute(cfg, seed)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| ScenarioError::Io(format!("{}: {e}", dir.display())))?;
        for (name, body) in &art.files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
        }
    }
    Ok(report)
}

fn summary_text(r: &RunReport) -> String {
    let s = &r.summary;
    let mut out = String::new();
    let _ = writeln!(out, "scenario {} seed {} horizon {:.1} d", r.name, r.seed, r.horizon / 86_400.0);
    if let Some(l) = &s.lost_time {
        let _ = writeln!(out, "goodput {:.4}  lost {:.4}  (<{LOST_TIME_LIMIT}: {})", l.goodput, l.lost_fraction, l.lost_fraction < LOST_TIME_LIMIT);
        for (k, v) in LostTime::LABELS.iter().zip(l.fractions.values()) {
            let _ = writeln!(out, "  {k:<13}{:>9.4}", v);
        }
    }
    for j in &s.jobs {
        let _ = writeln!(
            out,
            "job {} {} GPUs: {:.3e} tokens/day, {:.1} TFLOPs/GPU, {} checkpoints every {:.0} s, {} crashes, {} drains",
            j.name, j.gpus, j.tokens_per_day, j.tflops_per_gpu, j.checkpoints, j.checkpoint_interval, j.crashes, j.drains
        );
    }
    if !s.failures.is_empty() {
        let f: Vec<String> = s.failures.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "failures {}", f.join(" "));
    }
    if !s.alerts.is_empty() {
        let a: Vec<String> = s.alerts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "alerts {}", a.join(" "));
    }
    if s.detection.subtle_software_count > 0 {
        let _ = writeln!(out, "mean detection: subtle/software {:.0} s over {}", s.detection.subtle_software_mean_s, s.detection.subtle_software_count);
    }
    if let Some(p) = &s.power {
        let _ = writeln!(
            out,
            "power safety {} ({} trials, worst overload {:.2} s, braked load {:.1} kW)",
            if p.pass { "PASS" } else { "FAIL" },
            p.sweep.trials,
            p.sweep.worst_overload,
            p.sweep.max_steady_kw
        );
    }
    if let Some(st) = &s.straggler {
        let _ = writeln!(out, "straggler: step {:.3} s -> {:.3} s ({:.2}x)", st.healthy_step, st.braked_step, st.ratio);
    }
    if let Some(st) = &s.storage {
        let _ = writeln!(out, "storage: mean step {:.3} s, steady after {:?}, spread {:.3}", st.mean_step, st.steady_state_index, st.steady_spread);
    }
    out
}

/// Human-readable summary plus plot-ready tables of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub summary: String,
    pub tables: BTreeMap<String, String>,
}

fn read(dir: &Path, name: &str) -> Result<String, ScenarioError> {
    std::fs::read_to_string(dir.join(name)).map_err(|_| ScenarioError::MissingArtifacts(name.to_string()))
}

/// Re-reads a run directory. Every file the summary lists must be present.
pub fn render_report(dir: &Path) -> Result<Rendered, ScenarioError> {
    let json = read(dir, "summary.json")?;
    let v: serde_json::Value =
        serde_json::from_str(&json).map_err(|e| ScenarioError::MissingArtifacts(format!("summary.json: {e}")))?;
    let files = v.get("files").and_then(|f| f.as_object()).ok_or_else(|| ScenarioError::MissingArtifacts("summary.json: files".into()))?;
    let mut present = BTreeMap::new();
    for name in files.values().filter_map(|f| f.as_str()) {
        present.insert(name.to_string(), read(dir, name)?);
    }
    let mut tables = BTreeMap::new();
    if let Some(s) = present.get("lost_time.tsv") {
        tables.insert("lost_time_bars.tsv".to_string(), s.clone());
    }
    if let Some(s) = present.get("step_times.tsv") {
        let mut t = String::from("time_s\tjob\tstep_time_s\n");
        for l in s.lines().skip(1) {
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() == 4 && c[2] == "stepping" {
                let _ = writeln!(t, "{}\t{}\t{}", c[0], c[1], c[3]);
            }
        }
        tables.insert("step_times.tsv".to_string(), t);
    }
    if let Some(s) = present.get("queue.tsv") {
        tables.insert("queue_depth.tsv".to_string(), s.clone());
    }
    for name in ["busbw_protocols.tsv", "scaling.tsv", "power_trace.tsv", "storage_steps.tsv"] {
        if let Some(s) = present.get(name) {
            tables.insert(name.to_string(), s.clone());
        }
    }
    let summary = present.get("summary.txt").cloned().unwrap_or_default();
    Ok(Rendered { summary, tables })
}
