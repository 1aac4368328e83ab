use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::config::ScenarioConfig;
use super::ScenarioError;
use crate::faults::{
    apply_failure, repair, repair_duration, sample_failure_schedule, ClusterHealth, FailureClass, FailureEvent,
    FailureKind,
};
use crate::monitoring::{
    detecting_check, detection_latency, export_metrics, CheckKind, MetricClass, MetricSample, MetricStore,
    NodeCondition, Posture,
};
use crate::resilience::{
    job_mtbf, lost_time_report, CheckpointPolicy, CheckpointRecord, LostTime, LostTimeReport, StorageBackend,
};
use crate::scheduler::{JobId, Lifecycle, NodeState, Scheduler, StatusChange};
use crate::simcore::{Engine, RngStream, SimTime, HOUR};
use crate::topology::{ClusterTopology, NodeId};
use crate::workload::{step_time, throughput_report, JobPhase, StepEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Stepping,
    Checkpointing,
    Detecting,
    Waiting,
    Loading,
    Done,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::Stepping => "stepping",
            Phase::Checkpointing => "checkpointing",
            Phase::Detecting => "detecting",
            Phase::Waiting => "waiting",
            Phase::Loading => "loading",
            Phase::Done => "done",
        }
    }

    fn job_phase(self) -> JobPhase {
        match self {
            Phase::Stepping => JobPhase::Stepping,
            Phase::Checkpointing => JobPhase::Checkpointing,
            Phase::Detecting => JobPhase::Crashed,
            Phase::Waiting | Phase::Loading => JobPhase::Restarting,
            Phase::Done => JobPhase::Completed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum JobEv {
    CheckpointDue,
    PhaseDone,
    Finished,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Onset(usize),
    Detect(usize),
    Repair(usize),
    Escalate(usize),
    Job(JobId, u64, JobEv),
    Tick,
}

struct JobRun {
    id: JobId,
    phase: Phase,
    phase_start: f64,
    epoch: u64,
    nominal: f64,
    step: f64,
    committed: f64,
    uncommitted: f64,
    since_checkpoint: f64,
    /// (end time, committed steps, storage key) of completed checkpoints.
    history: Vec<(f64, f64, String)>,
    policy: CheckpointPolicy,
    lost: LostTime,
    crashes: u32,
    drains: u32,
    restarts: u32,
    checkpoints: u32,
    max_crash_loss: f64,
    started: f64,
    ended: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobSummary {
    pub id: JobId,
    pub name: String,
    pub gpus: usize,
    pub nominal_step: f64,
    pub steps: f64,
    pub tokens: f64,
    pub tokens_per_day: f64,
    pub tflops_per_gpu: f64,
    pub checkpoint_interval: f64,
    pub checkpoint_delta: f64,
    pub checkpoints: u32,
    pub crashes: u32,
    pub drains: u32,
    pub restarts: u32,
    /// Largest productive time lost to a single crash, seconds.
    pub max_crash_loss: f64,
    pub lost: LostTimeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct DetectionSummary {
    pub hard_crash_count: usize,
    pub hard_crash_mean_s: f64,
    pub subtle_software_count: usize,
    pub subtle_software_mean_s: f64,
}

/// Outcome of the cluster simulation and its time series.
#[derive(Debug, Clone, Default)]
pub struct ClusterOutcome {
    pub jobs: Vec<JobSummary>,
    pub lost: Option<LostTimeReport>,
    pub failures: BTreeMap<String, usize>,
    pub detection: DetectionSummary,
    pub events_dispatched: u64,
    /// Intrusive checks that ran, all on idle nodes.
    pub intrusive_checks: usize,
    pub event_log: Vec<String>,
    pub failure_rows: Vec<String>,
    pub checkpoint_rows: Vec<String>,
    pub alert_rows: Vec<String>,
    pub step_rows: Vec<String>,
    pub queue_rows: Vec<String>,
    pub status_log: Vec<StatusChange>,
    pub metrics: Option<MetricStore>,
}

pub const STEP_HEADER: &str = "time_s\tjob\tphase\tstep_time_s";
pub const QUEUE_HEADER: &str = "time_s\tpending\trunning\tcompleted\tfailed\tpool\tdown\tclosed";
pub const ALERT_HEADER: &str = "time_s\tnode\trule\tkind\tlatency_s";

/// Kinds whose node leaves its job (at a restart boundary) once detected.
fn drains(kind: FailureKind) -> bool {
    !matches!(kind, FailureKind::PortFail | FailureKind::PcieLinkFail) && kind.class() != FailureClass::HardCrash
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    engine: Engine<Ev>,
    health: ClusterHealth,
    sched: Scheduler,
    storage: StorageBackend,
    events: Vec<FailureEvent>,
    repair_started: Vec<bool>,
    /// Events holding a node out of service.
    tickets: BTreeMap<NodeId, BTreeSet<usize>>,
    /// Detected drain events waiting for their node to leave its job.
    deferred: BTreeMap<NodeId, Vec<usize>>,
    jobs: Vec<JobRun>,
    repair_rng: RngStream,
    esc_rng: RngStream,
    noise_rng: RngStream,
    monitor: RngStream,
    out: ClusterOutcome,
    last_queue: String,
}

impl<'a> Sim<'a> {
    fn topo(&self) -> &ClusterTopology {
        &self.health.topo
    }

    fn now(&self) -> f64 {
        self.engine.now().seconds()
    }

    fn compute_step(&self, job: JobId) -> Result<f64, ScenarioError> {
        let entry = self.sched.job(job).expect("job exists");
        let placement = entry.placement.as_ref().expect("placed");
        let slowdown = self.health.slowdown_vector();
        let up = self.health.up_vector();
        let env = StepEnv {
            topo: self.topo(),
            params: &self.cfg.network.path_model,
            mode: self.cfg.network.mode,
            slowdown: &slowdown,
            node_up: &up,
            storage_extra: entry.spec.read_bytes_per_step / (self.cfg.storage.read_bw * 1e9),
        };
        Ok(step_time(&entry.spec, placement, &env).map_err(|e| ScenarioError::Runtime(e.to_string()))?.total)
    }

    fn settle(&mut self, j: JobId) {
        let now = self.now();
        let r = &mut self.jobs[j];
        let dt = now - r.phase_start;
        match r.phase {
            Phase::Stepping => {
                let steps = dt / r.step;
                let useful = steps * r.nominal;
                r.uncommitted += steps;
                r.since_checkpoint += dt;
                r.lost.productive += useful;
                r.lost.detect_debug += (dt - useful).max(0.0);
            }
            Phase::Checkpointing => r.lost.checkpoint += dt,
            Phase::Detecting => r.lost.detect_debug += dt,
            Phase::Waiting | Phase::Loading => r.lost.pend += dt,
            Phase::Done => {}
        }
        r.phase_start = now;
    }

    fn set_phase(&mut self, j: JobId, p: Phase) {
        self.settle(j);
        let now = self.now();
        let r = &mut self.jobs[j];
        r.phase = p;
        r.epoch += 1;
        let row = format!("{now:.3}\t{j}\t{}\t{:.4}", p.label(), r.step);
        self.out.step_rows.push(row);
    }

    fn job_event(&mut self, j: JobId, dt: f64, ev: JobEv) {
        let epoch = self.jobs[j].epoch;
        self.engine.schedule_in(dt, j as u64, Ev::Job(j, epoch, ev));
    }

    fn enter_stepping(&mut self, j: JobId) -> Result<(), ScenarioError> {
        let entry = self.sched.job(j).expect("job");
        let gpus = entry.placement.as_ref().map_or(0, |p| p.nodes.len()) * self.topo().node_spec.gpus_per_node as usize;
        if !entry.holes.is_empty() || gpus != entry.spec.gpu_count() {
            return Err(ScenarioError::Runtime(format!("job {j} resumed with {gpus} of {} GPUs", entry.spec.gpu_count())));
        }
        let step = self.compute_step(j)?;
        self.jobs[j].step = step;
        self.set_phase(j, Phase::Stepping);
        let r = &self.jobs[j];
        let due = (r.policy.interval - r.since_checkpoint).max(0.0);
        let spec = &self.sched.job(j).expect("job").spec;
        let target_steps = spec.target_tokens / spec.global_batch_tokens;
        let remaining = target_steps - r.committed - r.uncommitted;
        self.job_event(j, due, JobEv::CheckpointDue);
        if remaining.is_finite() {
            self.job_event(j, (remaining * step).max(0.0), JobEv::Finished);
        }
        Ok(())
    }

    /// Re-derives step time after a health change without disturbing phase.
    fn refresh(&mut self, j: JobId) -> Result<(), ScenarioError> {
        if self.jobs[j].phase == Phase::Stepping {
            self.enter_stepping(j)?;
        }
        Ok(())
    }

    fn refresh_node(&mut self, n: NodeId) -> Result<(), ScenarioError> {
        if let Some(j) = self.sched.status(n).job {
            if self.jobs.get(j).is_some() {
                self.refresh(j)?;
            }
        }
        Ok(())
    }

    fn refresh_all(&mut self) -> Result<(), ScenarioError> {
        for j in 0..self.jobs.len() {
            self.refresh(j)?;
        }
        Ok(())
    }

    fn lose_uncommitted(&mut self, j: JobId) {
        let r = &mut self.jobs[j];
        let lost = r.uncommitted * r.nominal;
        r.max_crash_loss = r.max_crash_loss.max(lost);
        r.lost.productive -= lost;
        r.lost.recompute += lost;
        r.uncommitted = 0.0;
        r.since_checkpoint = 0.0;
    }

    fn crash(&mut self, j: JobId) {
        self.settle(j);
        match self.jobs[j].phase {
            Phase::Stepping | Phase::Checkpointing => {
                self.lose_uncommitted(j);
                self.jobs[j].crashes += 1;
                self.set_phase(j, Phase::Detecting);
                self.job_event(j, self.cfg.monitoring.hard_crash_latency, JobEv::PhaseDone);
            }
            Phase::Loading => {
                self.set_phase(j, Phase::Detecting);
                self.job_event(j, self.cfg.monitoring.hard_crash_latency, JobEv::PhaseDone);
            }
            Phase::Detecting | Phase::Waiting | Phase::Done => {}
        }
    }

    /// Rolls back to the last checkpoint completed before `onset`.
    fn rollback(&mut self, j: JobId, onset: f64) {
        self.settle(j);
        let r = &mut self.jobs[j];
        while r.history.last().is_some_and(|h| h.0 > onset) {
            r.history.pop();
        }
        let keep = r.history.last().map_or(0.0, |h| h.1);
        let lost = (r.committed + r.uncommitted - keep).max(0.0) * r.nominal;
        r.lost.productive -= lost;
        r.lost.recompute += lost;
        r.committed = keep;
        r.uncommitted = 0.0;
        r.since_checkpoint = 0.0;
        r.crashes += 1;
    }

    fn start_repair(&mut self, i: usize) -> Result<(), ScenarioError> {
        if self.repair_started[i] {
            return Ok(());
        }
        self.repair_started[i] = true;
        let kind = self.events[i].kind;
        let mut rng = self.repair_rng.substream(i);
        let d = repair_duration(kind, &self.cfg.faults.model, &mut rng).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        self.engine.schedule_in(d, self.events[i].target.node as u64, Ev::Repair(i));
        Ok(())
    }

    /// The node left its job early: its deferred drains become repair tickets.
    fn release_deferred(&mut self, n: NodeId) -> Result<(), ScenarioError> {
        for k in self.deferred.remove(&n).unwrap_or_default() {
            self.tickets.entry(n).or_default().insert(k);
            self.start_repair(k)?;
        }
        Ok(())
    }

    fn restart_boundary(&mut self, j: JobId) -> Result<(), ScenarioError> {
        let now = self.now();
        for n in self.sched.drain(j, now) {
            self.jobs[j].drains += 1;
            self.release_deferred(n)?;
        }
        let topo = self.health.topo.clone();
        match self.sched.refill(j, &topo, now) {
            Ok(_) => {
                let key = self.jobs[j].history.last().map_or_else(|| format!("job{j}/init"), |h| h.2.clone());
                let size = self.sched.job(j).expect("job").spec.checkpoint_state_size;
                let reload = if size > 0.0 { self.storage.read(&key, size, now) } else { 0.0 };
                self.jobs[j].restarts += 1;
                self.set_phase(j, Phase::Loading);
                self.job_event(j, self.cfg.scheduler.reschedule_time + reload, JobEv::PhaseDone);
            }
            Err(_) => self.set_phase(j, Phase::Waiting),
        }
        self.sched.replenish_pool(now);
        Ok(())
    }

    fn node_returned(&mut self) -> Result<(), ScenarioError> {
        let now = self.now();
        self.sched.replenish_pool(now);
        for j in 0..self.jobs.len() {
            if self.jobs[j].phase == Phase::Waiting {
                self.restart_boundary(j)?;
            }
        }
        Ok(())
    }

    fn on_job(&mut self, j: JobId, epoch: u64, ev: JobEv) -> Result<(), ScenarioError> {
        if self.jobs[j].epoch != epoch {
            return Ok(());
        }
        let now = self.now();
        match (ev, self.jobs[j].phase) {
            (JobEv::CheckpointDue, Phase::Stepping) => {
                self.settle(j);
                let size = self.sched.job(j).expect("job").spec.checkpoint_state_size;
                let n = self.jobs[j].checkpoints;
                let key = format!("job{j}/ckpt{n}");
                let w = self.storage.write(&key, size.max(1.0), now).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
                let rec = CheckpointRecord {
                    job: j,
                    start: now,
                    delta: w.blocking,
                    steps: (self.jobs[j].committed + self.jobs[j].uncommitted).floor() as u64,
                    flush_done_at: w.flush_done_at,
                };
                self.out.checkpoint_rows.push(rec.row());
                self.jobs[j].history.push((f64::NAN, 0.0, key));
                self.set_phase(j, Phase::Checkpointing);
                self.job_event(j, w.blocking, JobEv::PhaseDone);
            }
            (JobEv::PhaseDone, Phase::Checkpointing) => {
                let measured = now - self.jobs[j].phase_start;
                self.settle(j);
                let r = &mut self.jobs[j];
                r.policy.observe_delta(measured);
                r.committed += r.uncommitted;
                r.uncommitted = 0.0;
                r.since_checkpoint = 0.0;
                r.checkpoints += 1;
                let committed = r.committed;
                if let Some(h) = r.history.last_mut() {
                    h.0 = now;
                    h.1 = committed;
                }
                if !self.sched.drain_pending(j).is_empty() {
                    self.restart_boundary(j)?;
                } else {
                    self.enter_stepping(j)?;
                }
            }
            (JobEv::PhaseDone, Phase::Detecting) => self.restart_boundary(j)?,
            (JobEv::PhaseDone, Phase::Loading) => self.enter_stepping(j)?,
            (JobEv::Finished, Phase::Stepping) => {
                self.settle(j);
                self.jobs[j].committed += self.jobs[j].uncommitted;
                self.jobs[j].uncommitted = 0.0;
                self.set_phase(j, Phase::Done);
                self.jobs[j].ended = Some(now);
                self.sched.complete(j, now).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
                self.sched.replenish_pool(now);
            }
            _ => {}
        }
        Ok(())
    }

    /// Drops checkpoints whose write was interrupted.
    fn drop_partial_checkpoint(&mut self, j: JobId) {
        if self.jobs[j].phase == Phase::Checkpointing {
            if self.jobs[j].history.last().is_some_and(|h| h.0.is_nan()) {
                self.jobs[j].history.pop();
            }
        }
    }

    fn on_onset(&mut self, i: usize) -> Result<(), ScenarioError> {
        let ev = self.events[i].clone();
        let n = ev.target.node;
        let now = self.now();
        apply_failure(&mut self.health, &ev).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        *self.out.failures.entry(ev.kind.label().to_string()).or_default() += 1;
        if ev.kind.class() == FailureClass::HardCrash {
            self.tickets.entry(n).or_default().insert(i);
            self.release_deferred(n)?;
            if let Some(j) = self.sched.node_down(n, ev.kind.label(), now) {
                self.drop_partial_checkpoint(j);
                self.crash(j);
            }
            self.sched.replenish_pool(now);
            self.engine.schedule_in(self.cfg.monitoring.hard_crash_latency, n as u64, Ev::Detect(i));
            return Ok(());
        }
        let busy = self.sched.status(n).job.is_some();
        let lat = detection_latency(&ev, self.cfg.monitoring.posture, busy, &self.cfg.monitoring, &self.monitor);
        self.engine.schedule_in(lat, n as u64, Ev::Detect(i));
        let hazard = self.cfg.faults.model.hazard_per_second(ev.kind);
        if hazard > 0.0 {
            let mut rng = self.esc_rng.substream(i);
            let t = rng.exponential(hazard).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            if now + t < self.cfg.horizon {
                self.engine.schedule_in(t, n as u64, Ev::Escalate(i));
            }
        }
        if ev.kind == FailureKind::PowerFeed {
            self.sched.brake(n, now);
        }
        self.refresh_node(n)
    }

    fn on_detect(&mut self, i: usize) -> Result<(), ScenarioError> {
        let now = self.now();
        let ev = self.events[i].clone();
        let n = ev.target.node;
        if ev.kind.class() == FailureClass::HardCrash {
            self.events[i].detected_at.get_or_insert(now);
            return self.start_repair(i);
        }
        let reactive = detection_latency(&ev, Posture::Reactive, true, &self.cfg.monitoring, &self.monitor);
        let check = detecting_check(ev.kind).filter(|_| now - ev.onset < reactive - 1e-9);
        if let Some(c) = check {
            if self.cfg.monitoring.check(c).is_some_and(|h| h.intrusive) {
                if self.sched.status(n).job.is_some() {
                    // The node was placed after onset; the check cannot run.
                    let at = SimTime::from_secs(ev.onset + reactive);
                    self.engine.schedule(at, n as u64, Ev::Detect(i)).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
                    return Ok(());
                }
                self.out.intrusive_checks += 1;
            }
        }
        self.events[i].detected_at.get_or_insert(now);
        let rule = match check {
            Some(c) => self.cfg.monitoring.rule_for(c).map_or(c.label().to_string(), |r| r.name.clone()),
            None => "operator_report".to_string(),
        };
        self.out.alert_rows.push(format!("{now:.3}\t{n}\t{rule}\t{}\t{:.3}", ev.kind, now - ev.onset));
        if self.repair_started[i] || !self.health.is_applied(ev.id) {
            return Ok(());
        }
        if !drains(ev.kind) {
            return self.start_repair(i);
        }
        match self.sched.status(n).job {
            Some(j) if ev.kind == FailureKind::HbmCorrupt => {
                self.drop_partial_checkpoint(j);
                self.rollback(j, ev.onset);
                self.sched.node_faulted(n, ev.kind.label(), now);
                self.tickets.entry(n).or_default().insert(i);
                self.start_repair(i)?;
                self.release_deferred(n)?;
                if matches!(self.jobs[j].phase, Phase::Stepping | Phase::Checkpointing | Phase::Loading) {
                    self.set_phase(j, Phase::Detecting);
                    self.restart_boundary(j)?;
                }
            }
            Some(_) => {
                self.sched.close(n, ev.kind.label(), now);
                self.deferred.entry(n).or_default().push(i);
            }
            None => {
                self.sched.close(n, ev.kind.label(), now);
                self.tickets.entry(n).or_default().insert(i);
                self.start_repair(i)?;
                self.sched.replenish_pool(now);
            }
        }
        Ok(())
    }

    fn on_escalate(&mut self, i: usize) -> Result<(), ScenarioError> {
        let ev = self.events[i].clone();
        let n = ev.target.node;
        let now = self.now();
        if !self.health.is_applied(ev.id) || self.repair_started[i] {
            return Ok(());
        }
        let Some(j) = self.sched.status(n).job else { return Ok(()) };
        if !matches!(self.jobs[j].phase, Phase::Stepping | Phase::Checkpointing) {
            return Ok(());
        }
        if self.events[i].detected_at.is_none() {
            self.events[i].detected_at = Some(now);
        }
        self.sched.node_faulted(n, &format!("{} escalated", ev.kind), now);
        if let Some(v) = self.deferred.get_mut(&n) {
            v.retain(|&k| k != i);
        }
        self.tickets.entry(n).or_default().insert(i);
        self.start_repair(i)?;
        self.release_deferred(n)?;
        self.drop_partial_checkpoint(j);
        self.crash(j);
        Ok(())
    }

    fn on_repair(&mut self, i: usize) -> Result<(), ScenarioError> {
        let now = self.now();
        let ev = self.events[i].clone();
        let n = ev.target.node;
        repair(&mut self.health, ev.id).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        self.events[i].repaired_at = Some(now);
        if let Some(t) = self.tickets.get_mut(&n) {
            t.remove(&i);
        }
        if ev.kind == FailureKind::PowerFeed && self.health.slowdown(n) <= 1.0 {
            self.sched.unbrake(n, now);
        }
        let free = self.tickets.get(&n).is_none_or(BTreeSet::is_empty) && !self.deferred.contains_key(&n);
        if free && self.health.node_up(n) && matches!(self.sched.status(n).state, NodeState::Down | NodeState::Closed) {
            self.sched.node_repaired(n, now);
            self.node_returned()?;
        }
        self.refresh_node(n)?;
        if matches!(ev.kind, FailureKind::PortFail | FailureKind::PcieLinkFail) {
            self.refresh_all()?;
        }
        Ok(())
    }

    fn on_tick(&mut self) {
        let now = self.now();
        let cfg = &self.cfg.monitoring;
        let mut samples = Vec::with_capacity(self.topo().node_count() + self.jobs.len());
        for n in 0..self.topo().node_count() {
            let cond = NodeCondition::of(&self.health, n);
            if !cond.up {
                continue;
            }
            let v = cond.reading(CheckKind::PcieBw, cfg) * (1.0 + cfg.noise * self.noise_rng.normal(0.0, 1.0));
            samples.push(MetricSample {
                time: now,
                source: format!("node{n}"),
                name: "pcie_bw".into(),
                value: v,
                class: MetricClass::System,
            });
        }
        for r in &self.jobs {
            samples.push(MetricSample {
                time: now,
                source: format!("job{}", r.id),
                name: "step_time".into(),
                value: if r.phase == Phase::Stepping { r.step } else { 0.0 },
                class: MetricClass::System,
            });
        }
        if let Some(store) = self.out.metrics.as_mut() {
            export_metrics(store, &samples, now);
        }
        if now + HOUR < self.cfg.horizon {
            self.engine.schedule_in(HOUR, u64::MAX, Ev::Tick);
        }
    }

    fn queue_row(&mut self) {
        let c = self.sched.counts();
        let st = self.sched.statuses();
        let down = st.iter().filter(|s| s.state == NodeState::Down).count();
        let closed = st.iter().filter(|s| s.state == NodeState::Closed).count();
        let row = format!("{}\t{}\t{}\t{}\t{}\t{}\t{}", c.pending, c.running, c.completed, c.failed, self.sched.pool.len(), down, closed);
        if row != self.last_queue {
            self.out.queue_rows.push(format!("{:.3}\t{row}", self.now()));
            self.last_queue = row;
        }
    }
}

/// Month-scale simulation of the configured jobs under sampled failures.
pub fn simulate_cluster(cfg: &ScenarioConfig, seed: u64) -> Result<ClusterOutcome, ScenarioError> {
    let topo = cfg.build_topology()?;
    let root = RngStream::new("scenario", seed);
    let events = if cfg.faults.enabled && cfg.horizon > 0.0 {
        sample_failure_schedule(&cfg.faults.model, &topo, cfg.horizon, &root.substream("failures"))
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?
    } else {
        Vec::new()
    };
    let mut sched = Scheduler::new(topo.node_count(), topo.node_spec.gpus_per_node, cfg.scheduler.pool_fraction);
    let storage = StorageBackend::new(cfg.storage.clone()).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let mut engine = Engine::new();
    if cfg.output.event_log {
        engine = engine.with_event_log();
    }
    let mut out = ClusterOutcome::default();
    if cfg.output.metrics {
        out.metrics = Some(MetricStore::new());
    }
    for spec in &cfg.jobs {
        sched.submit(spec.clone(), None, 0, &topo, 0.0).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    sched.replenish_pool(0.0);
    let n_events = events.len();
    let mut sim = Sim {
        cfg,
        engine,
        health: ClusterHealth::new(topo),
        sched,
        storage,
        events,
        repair_started: vec![false; n_events],
        tickets: BTreeMap::new(),
        deferred: BTreeMap::new(),
        jobs: Vec::new(),
        repair_rng: root.substream("repair"),
        esc_rng: root.substream("escalation"),
        noise_rng: root.substream("metrics"),
        monitor: root.substream("monitoring"),
        out,
        last_queue: String::new(),
    };

    let state_write = |size: f64| size / (cfg.storage.write_bw * 1e9);
    for j in 0..cfg.jobs.len() {
        let entry = sim.sched.job(j).expect("submitted");
        if entry.lifecycle != Lifecycle::Running {
            return Err(ScenarioError::Runtime(format!("job {j} ({}) could not be placed", entry.spec.name)));
        }
        let nodes = entry.placement.as_ref().map_or(0, |p| p.nodes.len());
        let delta = cfg.checkpoint.delta.unwrap_or_else(|| state_write(entry.spec.checkpoint_state_size).max(1e-3));
        let mtbf = job_mtbf(cfg.faults.model.hard_crash_rate(), nodes).unwrap_or(f64::INFINITY);
        let mtbf = if cfg.faults.enabled { mtbf } else { f64::INFINITY };
        let policy = match CheckpointPolicy::new(cfg.checkpoint.policy, delta, mtbf) {
            Ok(p) => p,
            Err(_) => CheckpointPolicy { interval: f64::INFINITY, delta, mtbf_job: mtbf, young: true },
        };
        let nominal = sim.compute_step(j)?;
        sim.jobs.push(JobRun {
            id: j,
            phase: Phase::Loading,
            phase_start: 0.0,
            epoch: 0,
            nominal,
            step: nominal,
            committed: 0.0,
            uncommitted: 0.0,
            since_checkpoint: 0.0,
            history: Vec::new(),
            policy,
            lost: LostTime::default(),
            crashes: 0,
            drains: 0,
            restarts: 0,
            checkpoints: 0,
            max_crash_loss: 0.0,
            started: 0.0,
            ended: None,
        });
        sim.enter_stepping(j)?;
    }
    for i in 0..n_events {
        let t = sim.events[i].onset;
        let node = sim.events[i].target.node as u64;
        sim.engine.schedule(SimTime::from_secs(t), node, Ev::Onset(i)).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    if cfg.output.metrics && cfg.horizon > 0.0 {
        sim.engine.schedule(SimTime::ZERO, u64::MAX, Ev::Tick).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    }
    sim.queue_row();

    let end = SimTime::from_secs(cfg.horizon);
    while let Some(rec) = sim.engine.next_before(end) {
        match rec.event {
            Ev::Onset(i) => sim.on_onset(i)?,
            Ev::Detect(i) => sim.on_detect(i)?,
            Ev::Repair(i) => sim.on_repair(i)?,
            Ev::Escalate(i) => sim.on_escalate(i)?,
            Ev::Job(j, e, k) => sim.on_job(j, e, k)?,
            Ev::Tick => sim.on_tick(),
        }
        sim.sched.check_invariants().map_err(ScenarioError::Runtime)?;
        sim.queue_row();
    }
    let horizon = cfg.horizon;
    sim.engine.run_until(end, |_, _| {});
    for j in 0..sim.jobs.len() {
        sim.settle(j);
    }
    sim.sched.check_invariants().map_err(ScenarioError::Runtime)?;

    let mut total = LostTime::default();
    let mut out = std::mem::take(&mut sim.out);
    for r in &sim.jobs {
        let spec = &sim.sched.job(r.id).expect("job").spec;
        let wall = r.ended.unwrap_or(horizon) - r.started;
        let steps = r.committed + r.uncommitted;
        let tokens = steps * spec.global_batch_tokens;
        let tp = throughput_report(tokens, spec.params, spec.gpu_count(), wall, r.lost.productive, spec.flops_per_token_factor, r.phase.job_phase()).ok();
        total.add(&r.lost);
        out.jobs.push(JobSummary {
            id: r.id,
            name: spec.name.clone(),
            gpus: spec.gpu_count(),
            nominal_step: r.nominal,
            steps,
            tokens,
            tokens_per_day: tp.as_ref().map_or(0.0, |t| t.tokens_per_day),
            tflops_per_gpu: tp.as_ref().map_or(0.0, |t| t.tflops_per_gpu),
            checkpoint_interval: r.policy.interval,
            checkpoint_delta: r.policy.delta,
            checkpoints: r.checkpoints,
            crashes: r.crashes,
            drains: r.drains,
            restarts: r.restarts,
            max_crash_loss: r.max_crash_loss,
            lost: lost_time_report(&r.lost),
        });
    }
    if !sim.jobs.is_empty() {
        out.lost = Some(lost_time_report(&total));
    }
    let (mut hc, mut hs, mut sc, mut ss) = (0usize, 0.0, 0usize, 0.0);
    for e in &sim.events {
        if let Some(d) = e.detected_at {
            if e.kind.class() == FailureClass::HardCrash {
                hc += 1;
                hs += d - e.onset;
            } else {
                sc += 1;
                ss += d - e.onset;
            }
        }
    }
    out.detection = DetectionSummary {
        hard_crash_count: hc,
        hard_crash_mean_s: if hc > 0 { hs / hc as f64 } else { 0.0 },
        subtle_software_count: sc,
        subtle_software_mean_s: if sc > 0 { ss / sc as f64 } else { 0.0 },
    };
    out.failure_rows = sim.events.iter().map(FailureEvent::log_row).collect();
    out.events_dispatched = sim.engine.dispatched();
    out.event_log = sim.engine.take_event_log();
    out.status_log = sim.sched.log().to_vec();
    Ok(out)
}
