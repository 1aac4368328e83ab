use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ResilienceError;
use crate::simcore::RngStream;

const GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    NfsLike,
    ScaleCache,
    ObjectStore,
    SssLike,
}

/// Per-step multiplicative noise on read-bound step time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variance {
    None,
    Uniform { low: f64, high: f64 },
    /// `exp(N(ln median, sigma))` resampled until it lands in `[low, high]`.
    TruncLogNormal { median: f64, sigma: f64, low: f64, high: f64 },
}

impl Variance {
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Variance::None => 1.0,
            Variance::Uniform { low, high } => low + (high - low) * rng.unit(),
            Variance::TruncLogNormal { median, sigma, low, high } => {
                for _ in 0..10_000 {
                    let x = (median.ln() + sigma * rng.normal(0.0, 1.0)).exp();
                    if (low..=high).contains(&x) {
                        return x;
                    }
                }
                median.clamp(low, high)
            }
        }
    }

    fn validate(&self) -> Result<(), ResilienceError> {
        let ok = match *self {
            Variance::None => true,
            Variance::Uniform { low, high } => low > 0.0 && high >= low,
            Variance::TruncLogNormal { median, sigma, low, high } => {
                median > 0.0 && sigma > 0.0 && low > 0.0 && high > low && median >= low && median <= high
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ResilienceError::InvalidStorage(format!("bad variance model {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageParams {
    pub kind: StorageKind,
    /// GB/s.
    pub read_bw: f64,
    /// GB/s.
    pub write_bw: f64,
    /// Backing object store, GB/s. Used by scale_cache for misses and flushes.
    pub backing_read_bw: f64,
    pub backing_write_bw: f64,
    /// Bytes.
    pub cache_capacity: f64,
    pub variance: Variance,
    /// Iterations of the warmup ramp and the extra slowdown at iteration 0.
    pub warmup_iterations: u32,
    pub warmup_extra: f64,
}

impl StorageParams {
    pub fn nfs_like() -> Self {
        StorageParams {
            kind: StorageKind::NfsLike,
            read_bw: 1.0,
            write_bw: 5.0,
            backing_read_bw: 1.0,
            backing_write_bw: 5.0,
            cache_capacity: 0.0,
            variance: Variance::TruncLogNormal { median: 1.15, sigma: 0.12, low: 1.0, high: 1.5 },
            warmup_iterations: 350,
            warmup_extra: 1.0,
        }
    }

    pub fn scale_cache() -> Self {
        StorageParams {
            kind: StorageKind::ScaleCache,
            read_bw: 40.0,
            write_bw: 15.0,
            backing_read_bw: 5.0,
            backing_write_bw: 5.0,
            cache_capacity: 140e12,
            variance: Variance::Uniform { low: 0.96, high: 1.04 },
            warmup_iterations: 0,
            warmup_extra: 0.0,
        }
    }

    pub fn object_store() -> Self {
        StorageParams {
            kind: StorageKind::ObjectStore,
            read_bw: 5.0,
            write_bw: 5.0,
            backing_read_bw: 5.0,
            backing_write_bw: 5.0,
            cache_capacity: 0.0,
            variance: Variance::None,
            warmup_iterations: 0,
            warmup_extra: 0.0,
        }
    }

    pub fn sss_like() -> Self {
        StorageParams {
            kind: StorageKind::SssLike,
            read_bw: 310.0,
            write_bw: 155.0,
            backing_read_bw: 310.0,
            backing_write_bw: 155.0,
            cache_capacity: 0.0,
            variance: Variance::Uniform { low: 0.98, high: 1.02 },
            warmup_iterations: 0,
            warmup_extra: 0.0,
        }
    }

    pub fn for_kind(kind: StorageKind) -> Self {
        match kind {
            StorageKind::NfsLike => Self::nfs_like(),
            StorageKind::ScaleCache => Self::scale_cache(),
            StorageKind::ObjectStore => Self::object_store(),
            StorageKind::SssLike => Self::sss_like(),
        }
    }

    pub fn validate(&self) -> Result<(), ResilienceError> {
        for (name, v) in [
            ("read_bw", self.read_bw),
            ("write_bw", self.write_bw),
            ("backing_read_bw", self.backing_read_bw),
            ("backing_write_bw", self.backing_write_bw),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ResilienceError::InvalidStorage(format!("{name} must be > 0")));
            }
        }
        if self.kind == StorageKind::ScaleCache && !(self.cache_capacity > 0.0) {
            return Err(ResilienceError::InvalidStorage("cache_capacity must be > 0 for scale_cache".into()));
        }
        if !(self.warmup_extra >= 0.0) {
            return Err(ResilienceError::InvalidStorage("warmup_extra must be >= 0".into()));
        }
        self.variance.validate()
    }

    /// Slowdown multiplier of iteration `i` from the warmup ramp.
    pub fn warmup_factor(&self, i: u64) -> f64 {
        let w = self.warmup_iterations as u64;
        if i >= w {
            1.0
        } else {
            1.0 + self.warmup_extra * (1.0 - i as f64 / w as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    size: f64,
    last_use: u64,
    /// Time its asynchronous flush to the backing store completes.
    clean_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteOutcome {
    pub blocking: f64,
    pub flush_done_at: Option<f64>,
    pub evicted: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StorageBackend {
    pub params: StorageParams,
    entries: HashMap<String, Entry>,
    occupancy: f64,
    clock: u64,
    flush_busy_until: f64,
}

impl StorageBackend {
    pub fn new(params: StorageParams) -> Result<Self, ResilienceError> {
        params.validate()?;
        Ok(StorageBackend { params, entries: HashMap::new(), occupancy: 0.0, clock: 0, flush_busy_until: 0.0 })
    }

    pub fn occupancy(&self) -> f64 {
        self.occupancy
    }

    pub fn is_cached(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn cached(&self) -> bool {
        self.params.kind == StorageKind::ScaleCache
    }

    fn touch(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Transfer time of a read, without per-step noise. Cache misses are
    /// served from the backing store and then cached.
    pub fn read(&mut self, key: &str, size: f64, now: f64) -> f64 {
        if !self.cached() {
            return size / (self.params.read_bw * GB);
        }
        let tick = self.touch();
        if let Some(e) = self.entries.get_mut(key) {
            e.last_use = tick;
            return size / (self.params.read_bw * GB);
        }
        let d = size / (self.params.backing_read_bw * GB);
        if size <= self.params.cache_capacity {
            let (wait, _) = self.make_room(size, now + d);
            self.insert(key, size, tick, now + d);
            return d + wait;
        }
        d
    }

    /// Blocking time of a write. Cached writes land at `write_bw` and flush
    /// to the backing store in the background, one flush at a time.
    pub fn write(&mut self, key: &str, size: f64, now: f64) -> Result<WriteOutcome, ResilienceError> {
        if !(size > 0.0) {
            return Err(ResilienceError::NonPositiveInput("size"));
        }
        if !self.cached() {
            return Ok(WriteOutcome { blocking: size / (self.params.write_bw * GB), flush_done_at: None, evicted: vec![] });
        }
        if size > self.params.cache_capacity {
            return Err(ResilienceError::CacheFull { size, capacity: self.params.cache_capacity });
        }
        if let Some(old) = self.entries.remove(key) {
            self.occupancy -= old.size;
        }
        let (wait, evicted) = self.make_room(size, now);
        let blocking = wait + size / (self.params.write_bw * GB);
        let landed = now + blocking;
        let start = landed.max(self.flush_busy_until);
        let done = start + size / (self.params.backing_write_bw * GB);
        self.flush_busy_until = done;
        let tick = self.touch();
        self.insert(key, size, tick, done);
        Ok(WriteOutcome { blocking, flush_done_at: Some(done), evicted })
    }

    fn insert(&mut self, key: &str, size: f64, tick: u64, clean_at: f64) {
        self.occupancy += size;
        self.entries.insert(key.to_string(), Entry { size, last_use: tick, clean_at });
    }

    /// Evicts least-recently-used entries until `size` fits. An entry still
    /// flushing must finish first; the wait is returned.
    fn make_room(&mut self, size: f64, now: f64) -> (f64, Vec<String>) {
        let mut wait: f64 = 0.0;
        let mut evicted = Vec::new();
        while self.occupancy + size > self.params.cache_capacity * (1.0 + 1e-12) {
            let t = now + wait;
            let victim = self
                .entries
                .iter()
                .min_by(|a, b| {
                    let ca = a.1.clean_at <= t;
                    let cb = b.1.clean_at <= t;
                    cb.cmp(&ca).then(a.1.last_use.cmp(&b.1.last_use))
                })
                .map(|(k, e)| (k.clone(), e.clean_at));
            let Some((k, clean_at)) = victim else { break };
            wait = wait.max(clean_at - now);
            let e = self.entries.remove(&k).expect("present");
            self.occupancy -= e.size;
            evicted.push(k);
        }
        (wait.max(0.0), evicted)
    }
}

/// Per-iteration step times for a job with fixed compute and per-step input
/// reads against `params`.
pub fn storage_step_series(
    params: &StorageParams,
    compute: f64,
    read_bytes: f64,
    iterations: usize,
    rng: &mut RngStream,
) -> Vec<f64> {
    let base = compute + read_bytes / (params.read_bw * GB);
    (0..iterations)
        .map(|i| base * params.variance.draw(rng) * params.warmup_factor(i as u64))
        .collect()
}

fn rolling_means(series: &[f64], window: usize) -> Vec<f64> {
    if series.len() < window || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut sum: f64 = series[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..series.len() {
        sum += series[i] - series[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// First iteration from which the trailing `window`-mean stays within `tol`
/// (relative) of its final value. `None` if the series is shorter than the window.
pub fn steady_state_index(series: &[f64], window: usize, tol: f64) -> Option<usize> {
    let r = rolling_means(series, window);
    let last = *r.last()?;
    let mut idx = r.len() - 1;
    while idx > 0 && (r[idx - 1] - last).abs() <= tol * last {
        idx -= 1;
    }
    Some(idx + window - 1)
}

/// Relative spread `(max - min) / min`.
pub fn step_spread(series: &[f64]) -> f64 {
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - min) / min
}
