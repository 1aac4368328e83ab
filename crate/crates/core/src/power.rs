//! Rack power domains with two redundant PDUs, the power-brake sequence after
//! losing one feed, and surge-safety verification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::RngStream;
use crate::topology::NodeSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("both PDUs of rack {0} lost; rack is down")]
    DoubleFailure(usize),
    #[error("invalid power domain: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerParams {
    /// Per PDU, kW.
    pub pdu_rating: f64,
    pub server_max_power: f64,
    pub server_braked_power: f64,
    pub server_idle_power: f64,
    /// Seconds from feed loss until every server is braked.
    pub brake_latency: f64,
    /// Seconds a healthy PDU breaker tolerates overload.
    pub surge_tolerance: f64,
    /// Compute slowdown at minimum GPU power.
    pub braked_slowdown: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        PowerParams {
            pdu_rating: 20.0,
            server_max_power: 6.0,
            server_braked_power: 3.2,
            server_idle_power: 1.6,
            brake_latency: 2.0,
            surge_tolerance: 5.0,
            braked_slowdown: 3.0,
        }
    }
}

impl PowerParams {
    pub fn validate(&self) -> Result<(), PowerError> {
        let bad = |m: &str| Err(PowerError::Invalid(m.into()));
        if !(self.server_braked_power < self.server_max_power) {
            return bad("server_braked_power must be below server_max_power");
        }
        if !(self.server_idle_power > 0.0 && self.server_idle_power <= self.server_braked_power) {
            return bad("server_idle_power must lie in (0, server_braked_power]");
        }
        if !(self.brake_latency >= 0.0 && self.surge_tolerance > 0.0 && self.pdu_rating > 0.0) {
            return bad("latencies and rating must be positive");
        }
        if !(self.braked_slowdown >= 1.0) {
            return bad("braked_slowdown must be >= 1");
        }
        Ok(())
    }

    /// Server draw in kW as a function of per-GPU power: linear from
    /// (min W, braked kW) to (max W, max kW), and from (idle W, idle kW) below.
    pub fn server_power(&self, node: &NodeSpec, gpu_w: f64) -> f64 {
        let (lo, hi) = (node.gpu_power_min_w, node.gpu_power_max_w);
        if gpu_w >= lo {
            let f = ((gpu_w - lo) / (hi - lo)).min(1.0);
            self.server_braked_power + f * (self.server_max_power - self.server_braked_power)
        } else {
            let idle = node.gpu_idle_w.min(lo);
            let f = ((gpu_w - idle) / (lo - idle)).clamp(0.0, 1.0);
            self.server_idle_power + f * (self.server_braked_power - self.server_idle_power)
        }
    }

    /// Compute slowdown at a GPU power cap: 1 at max power, `braked_slowdown`
    /// at min power, linear in between.
    pub fn slowdown(&self, node: &NodeSpec, gpu_w: f64) -> f64 {
        let (lo, hi) = (node.gpu_power_min_w, node.gpu_power_max_w);
        let f = ((hi - gpu_w) / (hi - lo)).clamp(0.0, 1.0);
        1.0 + f * (self.braked_slowdown - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerDomain {
    pub rack: usize,
    pub servers: usize,
    pub params: PowerParams,
    pub pdu_healthy: [bool; 2],
}

impl PowerDomain {
    pub fn new(rack: usize, servers: usize, params: PowerParams) -> Result<Self, PowerError> {
        params.validate()?;
        Ok(PowerDomain { rack, servers, params, pdu_healthy: [true, true] })
    }
}

/// Per-PDU load in kW for the given server draws; the total splits evenly
/// across healthy PDUs.
pub fn rack_power(domain: &PowerDomain, server_kw: &[f64]) -> [f64; 2] {
    let total: f64 = server_kw.iter().sum();
    let healthy = domain.pdu_healthy.iter().filter(|&&h| h).count();
    let mut out = [0.0; 2];
    if healthy == 0 {
        return out;
    }
    for (i, h) in domain.pdu_healthy.iter().enumerate() {
        if *h {
            out[i] = total / healthy as f64;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSample {
    pub time: f64,
    pub pdu_kw: [f64; 2],
    pub server_kw: Vec<f64>,
}

/// Piecewise-constant trace: each sample holds until the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct PowerTrace {
    pub rack: usize,
    pub samples: Vec<PowerSample>,
    pub end: f64,
    pub brake_events: Vec<f64>,
}

impl PowerTrace {
    fn integrate(&self, f: impl Fn(&PowerSample) -> f64) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let next = self.samples.get(i + 1).map_or(self.end, |n| n.time);
                f(s) * (next - s.time)
            })
            .sum()
    }

    /// kW·s drawn through the PDUs.
    pub fn pdu_energy(&self) -> f64 {
        self.integrate(|s| s.pdu_kw.iter().sum())
    }

    /// kW·s drawn by the servers.
    pub fn server_energy(&self) -> f64 {
        self.integrate(|s| s.server_kw.iter().sum())
    }

    pub const HEADER: &'static str = "time_s\track\tpdu_a_kw\tpdu_b_kw\tservers_kw";

    pub fn rows(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| {
                format!(
                    "{:.3}\t{}\t{:.3}\t{:.3}\t{:.3}",
                    s.time,
                    self.rack,
                    s.pdu_kw[0],
                    s.pdu_kw[1],
                    s.server_kw.iter().sum::<f64>()
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrakeSequence {
    pub braked: bool,
    pub surge_kw: f64,
    pub steady_kw: f64,
    pub trace: PowerTrace,
}

/// Loss of one feed at `t`: the full rack load lands on the surviving PDU, and
/// if that exceeds its rating every server is braked `brake_latency` later.
pub fn on_psu_failure(
    domain: &mut PowerDomain,
    t: f64,
    failed: usize,
    server_kw: &[f64],
    horizon: f64,
) -> Result<BrakeSequence, PowerError> {
    if !domain.pdu_healthy[1 - failed] {
        domain.pdu_healthy = [false, false];
        return Err(PowerError::DoubleFailure(domain.rack));
    }
    let p = domain.params.clone();
    let mut trace = PowerTrace { rack: domain.rack, samples: Vec::new(), end: horizon.max(t + p.brake_latency), brake_events: Vec::new() };
    trace.samples.push(PowerSample { time: t.min(0.0), pdu_kw: rack_power(domain, server_kw), server_kw: server_kw.to_vec() });
    domain.pdu_healthy[failed] = false;
    let surge = rack_power(domain, server_kw);
    trace.samples.push(PowerSample { time: t, pdu_kw: surge, server_kw: server_kw.to_vec() });
    let surge_kw = surge[1 - failed];
    if surge_kw <= p.pdu_rating {
        return Ok(BrakeSequence { braked: false, surge_kw, steady_kw: surge_kw, trace });
    }
    let braked: Vec<f64> = server_kw.iter().map(|&s| s.min(p.server_braked_power)).collect();
    let steady = rack_power(domain, &braked);
    trace.samples.push(PowerSample { time: t + p.brake_latency, pdu_kw: steady, server_kw: braked });
    trace.brake_events.push(t + p.brake_latency);
    Ok(BrakeSequence { braked: true, surge_kw, steady_kw: steady[1 - failed], trace })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overload {
    pub pdu: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurgeVerdict {
    pub pass: bool,
    pub worst_overload: f64,
    pub violations: Vec<Overload>,
}

/// PASS iff every interval where a PDU exceeds its rating lasts at most the
/// surge tolerance.
pub fn check_surge_safety(trace: &PowerTrace, params: &PowerParams) -> SurgeVerdict {
    let mut worst: f64 = 0.0;
    let mut violations = Vec::new();
    for pdu in 0..2 {
        let mut start: Option<f64> = None;
        for (i, s) in trace.samples.iter().enumerate() {
            let over = s.pdu_kw[pdu] > params.pdu_rating + 1e-9;
            match (over, start) {
                (true, None) => start = Some(s.time),
                (false, Some(t0)) => {
                    close(pdu, t0, s.time, params, &mut worst, &mut violations);
                    start = None;
                }
                _ => {}
            }
            if i + 1 == trace.samples.len() {
                if let Some(t0) = start {
                    close(pdu, t0, trace.end, params, &mut worst, &mut violations);
                }
            }
        }
    }
    SurgeVerdict { pass: violations.is_empty(), worst_overload: worst, violations }
}

fn close(pdu: usize, start: f64, end: f64, p: &PowerParams, worst: &mut f64, v: &mut Vec<Overload>) {
    let d = end - start;
    *worst = worst.max(d);
    if d > p.surge_tolerance + 1e-9 {
        v.push(Overload { pdu, start, end });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetySweep {
    pub trials: usize,
    pub failures: usize,
    pub worst_overload: f64,
    pub max_steady_kw: f64,
}

/// Random feed-loss onsets over `[0, horizon)` against a load profile.
pub fn surge_safety_sweep(
    params: &PowerParams,
    servers: usize,
    trials: usize,
    horizon: f64,
    load_at: impl Fn(f64) -> Vec<f64>,
    rng: &mut RngStream,
) -> Result<SafetySweep, PowerError> {
    let mut out = SafetySweep { trials, failures: 0, worst_overload: 0.0, max_steady_kw: 0.0 };
    for _ in 0..trials {
        let t = rng.unit() * horizon;
        let failed = rng.index(2);
        let mut dom = PowerDomain::new(0, servers, params.clone())?;
        let loads = load_at(t);
        let seq = on_psu_failure(&mut dom, t, failed, &loads, t + 3.0 * params.surge_tolerance)?;
        let v = check_surge_safety(&seq.trace, params);
        if !v.pass || seq.steady_kw > params.pdu_rating {
            out.failures += 1;
        }
        out.worst_overload = out.worst_overload.max(v.worst_overload);
        out.max_steady_kw = out.max_steady_kw.max(seq.steady_kw);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(n: usize) -> PowerDomain {
        PowerDomain::new(0, n, PowerParams::default()).unwrap()
    }

    #[test]
    fn six_servers_share_two_pdus() {
        assert_eq!(rack_power(&dom(6), &[6.0; 6]), [18.0, 18.0]);
    }

    #[test]
    fn three_servers_fit_on_one_pdu() {
        let mut d = dom(3);
        assert_eq!(rack_power(&d, &[6.0; 3]), [9.0, 9.0]);
        let seq = on_psu_failure(&mut d, 10.0, 0, &[6.0; 3], 100.0).unwrap();
        assert!(!seq.braked);
        assert_eq!(seq.steady_kw, 18.0);
        assert!(check_surge_safety(&seq.trace, &d.params).pass);
    }

    #[test]
    fn idle_floor_scales() {
        let p = PowerParams::default();
        let n = NodeSpec::vela();
        let idle = p.server_power(&n, n.gpu_idle_w);
        assert_eq!(idle, p.server_idle_power);
        let r = rack_power(&dom(6), &[idle; 6]);
        assert!((r[0] - 3.0 * idle).abs() < 1e-12 && r[0] == r[1]);
        assert_eq!(p.server_power(&n, 400.0), 6.0);
        assert_eq!(p.server_power(&n, 150.0), 3.2);
    }

    #[test]
    fn brake_sequence_six_servers() {
        let mut d = dom(6);
        let seq = on_psu_failure(&mut d, 100.0, 1, &[6.0; 6], 200.0).unwrap();
        assert!(seq.braked);
        assert_eq!(seq.surge_kw, 36.0);
        assert!((seq.steady_kw - 19.2).abs() < 1e-12);
        let v = check_surge_safety(&seq.trace, &d.params);
        assert!(v.pass);
        assert!((v.worst_overload - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slow_brake_fails_with_interval() {
        let p = PowerParams { brake_latency: 6.0, ..Default::default() };
        let mut d = PowerDomain::new(0, 6, p).unwrap();
        let seq = on_psu_failure(&mut d, 50.0, 0, &[6.0; 6], 100.0).unwrap();
        let v = check_surge_safety(&seq.trace, &d.params);
        assert!(!v.pass);
        assert_eq!(v.violations, vec![Overload { pdu: 1, start: 50.0, end: 56.0 }]);
    }

    #[test]
    fn second_feed_loss_takes_rack_down() {
        let mut d = dom(6);
        on_psu_failure(&mut d, 1.0, 0, &[6.0; 6], 10.0).unwrap();
        assert_eq!(on_psu_failure(&mut d, 2.0, 1, &[3.2; 6], 10.0), Err(PowerError::DoubleFailure(0)));
    }

    #[test]
    fn slowdown_map_endpoints() {
        let p = PowerParams::default();
        let n = NodeSpec::vela();
        assert_eq!(p.slowdown(&n, 400.0), 1.0);
        assert_eq!(p.slowdown(&n, 150.0), 3.0);
    }

    #[test]
    fn energy_is_conserved() {
        let mut d = dom(6);
        let seq = on_psu_failure(&mut d, 5.0, 0, &[6.0, 5.0, 4.0, 6.0, 6.0, 5.5], 60.0).unwrap();
        let (a, b) = (seq.trace.pdu_energy(), seq.trace.server_energy());
        assert!((a - b).abs() / b < 1e-6, "{a} {b}");
    }
}
