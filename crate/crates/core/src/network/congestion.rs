use serde::{Deserialize, Serialize};

use super::NetworkError;
use crate::simcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WredParams {
    /// Bytes.
    pub kmin: f64,
    /// Bytes.
    pub kmax: f64,
    pub pmax: f64,
}

impl Default for WredParams {
    fn default() -> Self {
        WredParams { kmin: 100e3, kmax: 400e3, pmax: 0.2 }
    }
}

impl WredParams {
    pub fn mark_probability(&self, occupancy: f64) -> f64 {
        if occupancy < self.kmin {
            0.0
        } else if occupancy >= self.kmax {
            1.0
        } else {
            self.pmax * (occupancy - self.kmin) / (self.kmax - self.kmin)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortQueue {
    pub occupancy: f64,
    pub capacity: f64,
    pub wred: WredParams,
    pub drops: u64,
    pub ecn_marks: u64,
}

impl PortQueue {
    pub fn new(capacity: f64, wred: WredParams) -> Result<Self, NetworkError> {
        if !(wred.kmin < wred.kmax && wred.kmax <= capacity && (0.0..=1.0).contains(&wred.pmax)) {
            return Err(NetworkError::InvalidParameter(format!(
                "need kmin < kmax <= capacity and pmax in [0, 1]; got {wred:?}, capacity {capacity}"
            )));
        }
        Ok(PortQueue { occupancy: 0.0, capacity, wred, drops: 0, ecn_marks: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EcnDecision {
    None,
    Mark,
    Drop,
}

/// WRED: drop on overflow, otherwise mark with a probability ramping from 0
/// at `kmin` to `pmax` just below `kmax`, and always at or above `kmax`.
pub fn ecn_decision(queue: &PortQueue, arriving: f64, rng: &mut RngStream) -> EcnDecision {
    if queue.occupancy + arriving > queue.capacity {
        return EcnDecision::Drop;
    }
    let p = queue.wred.mark_probability(queue.occupancy);
    if p >= 1.0 || (p > 0.0 && rng.bernoulli(p)) {
        EcnDecision::Mark
    } else {
        EcnDecision::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcqcnParams {
    pub g: f64,
    /// GB/s.
    pub rate_floor: f64,
    pub fast_recovery_stages: u32,
    /// GB/s added to the target per additive-increase period.
    pub additive_increase: f64,
    /// Seconds.
    pub recovery_period: f64,
    /// Minimum spacing of CNPs for one flow, seconds.
    pub cnp_interval: f64,
    /// High-priority CNP transit time, seconds.
    pub cnp_latency: f64,
}

impl Default for DcqcnParams {
    fn default() -> Self {
        DcqcnParams {
            g: 1.0 / 16.0,
            rate_floor: 0.01,
            fast_recovery_stages: 5,
            additive_increase: 0.05,
            recovery_period: 55e-6,
            cnp_interval: 4e-6,
            cnp_latency: 2e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CongestionState {
    pub current_rate: f64,
    pub target_rate: f64,
    pub line_rate: f64,
    pub alpha: f64,
    pub last_cnp_time: Option<f64>,
    pub recovery_stage: u32,
}

impl CongestionState {
    pub fn new(line_rate: f64) -> Self {
        CongestionState {
            current_rate: line_rate,
            target_rate: line_rate,
            line_rate,
            alpha: 1.0,
            last_cnp_time: None,
            recovery_stage: 0,
        }
    }
}

/// Rate cut on a congestion notification. The target rate is left alone.
pub fn on_cnp_received(cc: &CongestionState, p: &DcqcnParams, now: f64) -> CongestionState {
    let alpha = ((1.0 - p.g) * cc.alpha + p.g).clamp(0.0, 1.0);
    CongestionState {
        alpha,
        current_rate: (cc.current_rate * (1.0 - alpha / 2.0)).max(p.rate_floor),
        last_cnp_time: Some(now),
        recovery_stage: 0,
        ..*cc
    }
}

/// Applies one recovery step per elapsed `recovery_period`: fast recovery
/// (halve the gap to the target) for the first stages, then additive increase
/// of the target, capped at line rate.
pub fn recover_rate(cc: &CongestionState, p: &DcqcnParams, dt_since_cnp: f64) -> CongestionState {
    let periods = (dt_since_cnp / p.recovery_period + 1e-9).floor() as u64;
    let mut s = *cc;
    for _ in 0..periods.min(10_000) {
        s.alpha *= 1.0 - p.g;
        if s.recovery_stage >= p.fast_recovery_stages {
            s.target_rate = (s.target_rate + p.additive_increase).min(s.line_rate);
        }
        s.current_rate = ((s.current_rate + s.target_rate) / 2.0).min(s.line_rate);
        s.recovery_stage += 1;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncastConfig {
    pub senders: usize,
    /// GB/s per sender and of the shared egress port.
    pub line_rate: f64,
    pub bytes_per_sender: f64,
    pub dt: f64,
    pub buffer: f64,
    pub mtu: f64,
    pub rtt: f64,
    /// Stall after a loss, in RTTs (go-back-N for RoCE).
    pub loss_stall_rtts: f64,
    pub wred: WredParams,
    pub dcqcn: DcqcnParams,
    pub control_enabled: bool,
    /// Trace every n-th tick.
    pub sample_every: usize,
    pub max_time: f64,
}

impl Default for IncastConfig {
    fn default() -> Self {
        IncastConfig {
            senders: 8,
            line_rate: 12.5,
            bytes_per_sender: 16e6,
            dt: 1e-6,
            buffer: 8.0 * 1024.0 * 1024.0,
            mtu: 4096.0,
            rtt: 8e-6,
            loss_stall_rtts: 10.0,
            wred: WredParams::default(),
            dcqcn: DcqcnParams::default(),
            control_enabled: true,
            sample_every: 10,
            max_time: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueSample {
    pub time: f64,
    pub occupancy: f64,
    pub offered_rate: f64,
    pub sender0_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncastResult {
    /// Packets dropped at the egress queue.
    pub drops: u64,
    /// Ticks in which a sender had at least one packet marked.
    pub marks: u64,
    pub cnps: u64,
    pub max_occupancy: f64,
    pub completion_time: f64,
    pub trace: Vec<QueueSample>,
}

struct Sender {
    cc: CongestionState,
    remaining: f64,
    stalled_until: f64,
    last_cnp_sent: f64,
    pending_cnps: Vec<f64>,
    next_recovery: f64,
}

/// Fluid N-to-1 incast on a single egress port with explicit queue
/// integration. With the control loop on, marked senders receive CNPs and cut
/// their rate; with it off they keep injecting at line rate.
pub fn simulate_incast(cfg: &IncastConfig, rng: &mut RngStream) -> Result<IncastResult, NetworkError> {
    let mut queue = PortQueue::new(cfg.buffer, cfg.wred)?;
    if cfg.senders == 0 || !(cfg.dt > 0.0) || !(cfg.line_rate > 0.0) || !(cfg.mtu > 0.0) {
        return Err(NetworkError::InvalidParameter("incast needs senders, dt, line_rate and mtu > 0".into()));
    }
    let mut senders: Vec<Sender> = (0..cfg.senders)
        .map(|_| Sender {
            cc: CongestionState::new(cfg.line_rate),
            remaining: cfg.bytes_per_sender,
            stalled_until: 0.0,
            last_cnp_sent: f64::NEG_INFINITY,
            pending_cnps: Vec::new(),
            next_recovery: f64::INFINITY,
        })
        .collect();
    let drain = cfg.line_rate * 1e9 * cfg.dt;
    let mut res = IncastResult { drops: 0, marks: 0, cnps: 0, max_occupancy: 0.0, completion_time: 0.0, trace: Vec::new() };
    let mut tick = 0usize;
    loop {
        let now = tick as f64 * cfg.dt;
        if now > cfg.max_time {
            break;
        }
        for s in senders.iter_mut() {
            let due: Vec<f64> = s.pending_cnps.iter().copied().filter(|&t| t <= now).collect();
            s.pending_cnps.retain(|&t| t > now);
            for t in due {
                s.cc = on_cnp_received(&s.cc, &cfg.dcqcn, t);
                s.next_recovery = t + cfg.dcqcn.recovery_period;
            }
            while s.next_recovery <= now {
                s.cc = recover_rate(&s.cc, &cfg.dcqcn, cfg.dcqcn.recovery_period);
                s.next_recovery += cfg.dcqcn.recovery_period;
            }
        }
        let sends: Vec<f64> = senders
            .iter()
            .map(|s| {
                if s.remaining <= 0.0 || now < s.stalled_until {
                    0.0
                } else {
                    (s.cc.current_rate * 1e9 * cfg.dt).min(s.remaining)
                }
            })
            .collect();
        let offered: f64 = sends.iter().sum();
        let occ_before = queue.occupancy;
        let p_mark = queue.wred.mark_probability(occ_before);
        let mut occ = occ_before + offered;
        let mut dropped = 0.0;
        if occ > queue.capacity {
            dropped = occ - queue.capacity;
            occ = queue.capacity;
        }
        for (i, s) in senders.iter_mut().enumerate() {
            if sends[i] <= 0.0 {
                continue;
            }
            let lost = if dropped > 0.0 { dropped * sends[i] / offered } else { 0.0 };
            s.remaining -= sends[i] - lost;
            if lost > 0.0 {
                queue.drops += (lost / cfg.mtu).ceil() as u64;
                s.stalled_until = now + cfg.loss_stall_rtts * cfg.rtt;
            }
            let k = (sends[i] / cfg.mtu).max(1.0);
            let p_any = 1.0 - (1.0 - p_mark).powf(k);
            if p_any > 0.0 && (p_any >= 1.0 || rng.bernoulli(p_any)) {
                queue.ecn_marks += 1;
                if cfg.control_enabled && now - s.last_cnp_sent >= cfg.dcqcn.cnp_interval {
                    s.last_cnp_sent = now;
                    s.pending_cnps.push(now + cfg.dcqcn.cnp_latency);
                    res.cnps += 1;
                }
            }
        }
        queue.occupancy = (occ - drain).max(0.0);
        res.max_occupancy = res.max_occupancy.max(occ);
        if tick % cfg.sample_every.max(1) == 0 {
            res.trace.push(QueueSample {
                time: now,
                occupancy: queue.occupancy,
                offered_rate: offered / cfg.dt / 1e9,
                sender0_rate: senders[0].cc.current_rate,
            });
        }
        tick += 1;
        if senders.iter().all(|s| s.remaining <= 1e-6) && queue.occupancy <= 0.0 {
            res.completion_time = tick as f64 * cfg.dt;
            break;
        }
    }
    if res.completion_time == 0.0 {
        res.completion_time = tick as f64 * cfg.dt;
    }
    res.drops = queue.drops;
    res.marks = queue.ecn_marks;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(occ: f64) -> PortQueue {
        let mut q = PortQueue::new(1e6, WredParams { kmin: 1e5, kmax: 3e5, pmax: 0.2 }).unwrap();
        q.occupancy = occ;
        q
    }

    #[test]
    fn wred_regions() {
        let mut rng = RngStream::new("wred", 1);
        assert_eq!(ecn_decision(&q(0.0), 1500.0, &mut rng), EcnDecision::None);
        assert_eq!(ecn_decision(&q(3e5), 1500.0, &mut rng), EcnDecision::Mark);
        assert_eq!(ecn_decision(&q(1e6 - 100.0), 1500.0, &mut rng), EcnDecision::Drop);
    }

    #[test]
    fn wred_midpoint_rate_is_half_pmax() {
        let mut rng = RngStream::new("wred", 2);
        let queue = q(2e5);
        let n = 100_000;
        let marks = (0..n).filter(|_| ecn_decision(&queue, 1500.0, &mut rng) == EcnDecision::Mark).count();
        let rate = marks as f64 / n as f64;
        assert!((rate - 0.10).abs() < 0.01, "{rate}");
    }

    #[test]
    fn invalid_thresholds_rejected() {
        assert!(PortQueue::new(1e5, WredParams { kmin: 1e5, kmax: 3e5, pmax: 0.2 }).is_err());
        assert!(PortQueue::new(1e6, WredParams { kmin: 3e5, kmax: 3e5, pmax: 0.2 }).is_err());
    }

    #[test]
    fn cnp_with_full_alpha_halves() {
        let p = DcqcnParams::default();
        let mut cc = CongestionState::new(12.5);
        cc.current_rate = 10.0;
        let out = on_cnp_received(&cc, &p, 0.0);
        assert_eq!(out.current_rate, 5.0);
        assert_eq!(out.target_rate, 12.5);
    }

    #[test]
    fn first_cnp_from_zero_alpha() {
        let p = DcqcnParams::default();
        let mut cc = CongestionState::new(12.5);
        cc.alpha = 0.0;
        let out = on_cnp_received(&cc, &p, 0.0);
        assert_eq!(out.alpha, 1.0 / 16.0);
        assert_eq!(out.current_rate, 12.5 * (1.0 - 1.0 / 32.0));
    }

    #[test]
    fn repeated_cnps_decrease_to_floor() {
        let p = DcqcnParams::default();
        let mut cc = CongestionState::new(12.5);
        let mut last = cc.current_rate;
        for i in 0..100 {
            cc = on_cnp_received(&cc, &p, i as f64 * p.recovery_period);
            assert!(cc.current_rate <= last && cc.current_rate > 0.0);
            last = cc.current_rate;
        }
        assert_eq!(cc.current_rate, p.rate_floor);
    }

    #[test]
    fn ten_quiet_periods_recover() {
        let p = DcqcnParams::default();
        let cc = on_cnp_received(&CongestionState::new(12.5), &p, 0.0);
        let out = recover_rate(&cc, &p, 10.0 * p.recovery_period);
        assert!(out.current_rate >= 0.95 * out.target_rate);
    }

    #[test]
    fn converged_state_is_a_fixpoint() {
        let p = DcqcnParams::default();
        let cc = CongestionState::new(12.5);
        assert_eq!(recover_rate(&cc, &p, 3.0 * p.recovery_period).current_rate, 12.5);
        assert_eq!(recover_rate(&cc, &p, 0.5 * p.recovery_period), cc);
    }

    #[test]
    fn incast_control_loop() {
        let mut rng = RngStream::new("incast", 9);
        let on = simulate_incast(&IncastConfig::default(), &mut rng).unwrap();
        assert_eq!(on.drops, 0, "max occupancy {}", on.max_occupancy);
        assert!(on.marks > 0);
        let off = simulate_incast(&IncastConfig { control_enabled: false, ..Default::default() }, &mut rng).unwrap();
        assert!(off.drops > 0);
    }
}
