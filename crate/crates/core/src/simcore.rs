//! Discrete-event engine: clock, ordered event queue and named random streams.
//!
//! Events are ordered by `(time, sequence)`. The sequence number is assigned at
//! scheduling time, so events sharing a timestamp fire in insertion order and a
//! replay with the same inputs dispatches the exact same sequence.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when comparing simulated times.
pub const TIME_EPSILON: f64 = 1e-9;

pub const MINUTE: f64 = 60.0;
pub const HOUR: f64 = 3600.0;
pub const DAY: f64 = 86_400.0;
/// A "month" is 30 days throughout the simulator.
pub const MONTH: f64 = 30.0 * DAY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at t={requested}s: clock is already at {now}s")]
    SchedulingInPast { requested: f64, now: f64 },
    #[error("invalid simulation time {0}")]
    InvalidTime(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Simulated time in seconds. Never NaN, never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "f64", into = "f64")]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn new(seconds: f64) -> Result<Self, SimError> {
        if seconds.is_nan() || seconds < 0.0 {
            return Err(SimError::InvalidTime(seconds));
        }
        Ok(SimTime(seconds))
    }

    /// Panics on a negative or NaN argument. Meant for literals and values
    /// that are non-negative by construction.
    pub fn from_secs(seconds: f64) -> Self {
        Self::new(seconds).expect("simulation time must be finite and non-negative")
    }

    pub fn from_hours(h: f64) -> Self {
        Self::from_secs(h * HOUR)
    }

    pub fn from_days(d: f64) -> Self {
        Self::from_secs(d * DAY)
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn after(self, dt: f64) -> Self {
        Self::from_secs(self.0 + dt.max(0.0))
    }

    pub fn since(self, earlier: SimTime) -> f64 {
        self.0 - earlier.0
    }
}

impl TryFrom<f64> for SimTime {
    type Error = SimError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        SimTime::new(v)
    }
}

impl From<SimTime> for f64 {
    fn from(t: SimTime) -> f64 {
        t.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventId(pub u64);

/// A dispatched (or pending) event.
#[derive(Debug, Clone)]
pub struct EventRecord<E> {
    pub id: EventId,
    pub time: SimTime,
    pub sequence: u64,
    /// Component the event is addressed to (node, job, rack ...). Opaque to the engine.
    pub target: u64,
    pub event: E,
}

struct Pending<E>(EventRecord<E>);

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.0.sequence == other.0.sequence
    }
}
impl<E> Eq for Pending<E> {}
impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Pending<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, sequence) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .cmp(&self.0.time)
            .then_with(|| other.0.sequence.cmp(&self.0.sequence))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStats {
    pub events_dispatched: u64,
    pub clock: SimTime,
    pub wall_time: Duration,
}

/// Single-threaded event engine. `E` carries the event kind and payload.
pub struct Engine<E> {
    now: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Pending<E>>,
    dispatched: u64,
    log: Option<Vec<String>>,
}

impl<E: fmt::Debug> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: fmt::Debug> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            dispatched: 0,
            log: None,
        }
    }

    /// Enables recording of one text line per dispatched event.
    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn event_log(&self) -> Option<&[String]> {
        self.log.as_deref()
    }

    pub fn take_event_log(&mut self) -> Vec<String> {
        self.log.take().unwrap_or_default()
    }

    pub fn schedule(&mut self, time: SimTime, target: u64, event: E) -> Result<EventId, SimError> {
        if time < self.now {
            return Err(SimError::SchedulingInPast {
                requested: time.seconds(),
                now: self.now.seconds(),
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        let id = EventId(sequence);
        self.queue.push(Pending(EventRecord {
            id,
            time,
            sequence,
            target,
            event,
        }));
        Ok(id)
    }

    /// Schedules `dt` seconds from now. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, dt: f64, target: u64, event: E) -> EventId {
        let at = self.now.after(dt);
        self.schedule(at, target, event)
            .expect("relative scheduling cannot land in the past")
    }

    /// Pops the next event if it is due at or before `t_end`, advancing the clock.
    pub fn next_before(&mut self, t_end: SimTime) -> Option<EventRecord<E>> {
        let due = self.queue.peek().is_some_and(|p| p.0.time <= t_end);
        if !due {
            return None;
        }
        let Pending(rec) = self.queue.pop()?;
        debug_assert!(rec.time >= self.now);
        self.now = rec.time;
        self.dispatched += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(format!(
                "{:.9}\t{}\t{}\t{:?}",
                rec.time.seconds(),
                rec.sequence,
                rec.target,
                rec.event
            ));
        }
        Some(rec)
    }

    /// Dispatches every event with `time <= t_end` in order, then parks the
    /// clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> SimStats
    where
        F: FnMut(&mut Engine<E>, EventRecord<E>),
    {
        let started = Instant::now();
        let before = self.dispatched;
        while let Some(rec) = self.next_before(t_end) {
            handler(self, rec);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        SimStats {
            events_dispatched: self.dispatched - before,
            clock: self.now,
            wall_time: started.elapsed(),
        }
    }
}

/// Distribution specification accepted by [`RngStream::draw`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { rate: f64 },
    Normal { mean: f64, std_dev: f64 },
    /// Log-normal given by its arithmetic mean and the sigma of the underlying normal.
    LogNormal { mean: f64, sigma: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidDistribution(msg));
        match *self {
            Dist::Constant { value } if !value.is_finite() => bad(format!("constant {value}")),
            Dist::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                bad(format!("uniform bounds [{low}, {high}]"))
            }
            Dist::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("exponential rate {rate}"))
            }
            Dist::Normal { mean, std_dev } if !(mean.is_finite() && std_dev >= 0.0) => {
                bad(format!("normal({mean}, {std_dev})"))
            }
            Dist::LogNormal { mean, sigma } if !(mean > 0.0 && sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("lognormal(mean={mean}, sigma={sigma})"))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { low, high } => 0.5 * (low + high),
            Dist::Exponential { rate } => 1.0 / rate,
            Dist::Normal { mean, .. } => mean,
            Dist::LogNormal { mean, .. } => mean,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; also used for ECMP hashing.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A named, seeded random stream. Two streams with the same `(name, seed)`
/// produce identical draws; different names give unrelated sequences.
#[derive(Clone)]
pub struct RngStream {
    name: String,
    seed: u64,
    draw_count: u64,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("name", &self.name)
            .field("seed", &self.seed)
            .field("draw_count", &self.draw_count)
            .finish()
    }
}

impl RngStream {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        let name = name.into();
        let mut state = fnv1a(name.as_bytes()) ^ mix64(seed);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            state = mix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        RngStream {
            name,
            seed,
            draw_count: 0,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// A child stream whose name is `"{parent}/{suffix}"`.
    pub fn substream(&self, suffix: impl fmt::Display) -> RngStream {
        RngStream::new(format!("{}/{}", self.name, suffix), self.seed)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw_count(&self) -> u64 {
        self.draw_count
    }

    pub fn draw(&mut self, dist: &Dist) -> Result<f64, SimError> {
        dist.validate()?;
        self.draw_count += 1;
        let rng = &mut self.rng;
        let v = match *dist {
            Dist::Constant { value } => value,
            Dist::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
            Dist::Exponential { rate } => Exp::new(rate)
                .map_err(|e| SimError::InvalidDistribution(e.to_string()))?
                .sample(rng),
            Dist::Normal { mean, std_dev } => Normal::new(mean, std_dev)
                .map_err(|e| SimError::InvalidDistribution(e.to_string()))?
                .sample(rng),
            Dist::LogNormal { mean, sigma } => {
                let mu = mean.ln() - 0.5 * sigma * sigma;
                LogNormal::new(mu, sigma)
                    .map_err(|e| SimError::InvalidDistribution(e.to_string()))?
                    .sample(rng)
            }
        };
        Ok(v)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.draw_count += 1;
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        self.draw(&Dist::Normal { mean, std_dev }).unwrap_or(mean)
    }

    pub fn exponential(&mut self, rate: f64) -> Result<f64, SimError> {
        self.draw(&Dist::Exponential { rate })
    }

    /// Index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.draw_count += 1;
        self.rng.random_range(0..n.max(1))
    }
}
