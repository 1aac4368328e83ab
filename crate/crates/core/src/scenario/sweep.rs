use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ScenarioConfig;
use super::report::execute;
use super::ScenarioError;

/// One swept key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl SweepAxis {
    /// Parses `key=v1,v2,...`; each value is a TOML literal (`300`, `"gdr"`,
    /// `{kind="fixed",interval=600}`). Commas inside braces or brackets do
    /// not split.
    pub fn parse(spec: &str) -> Result<Self, ScenarioError> {
        let (key, rest) = spec
            .split_once('=')
            .ok_or_else(|| ScenarioError::Schema { path: spec.into(), message: "expected key=v1,v2,...".into() })?;
        let mut values = Vec::new();
        let mut depth = 0i32;
        let mut cur = String::new();
        for ch in rest.chars().chain(std::iter::once(',')) {
            match ch {
                '{' | '[' => depth += 1,
                '}' | ']' => depth -= 1,
                _ => {}
            }
            if ch == ',' && depth == 0 {
                let lit = cur.trim();
                if !lit.is_empty() {
                    let t: toml::Table = format!("v = {lit}").parse().map_err(|e: toml::de::Error| ScenarioError::Schema {
                        path: key.trim().to_string(),
                        message: e.message().to_string(),
                    })?;
                    values.push(t["v"].clone());
                }
                cur.clear();
            } else {
                cur.push(ch);
            }
        }
        Ok(SweepAxis { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of the axes, in axis order.
pub fn grid_points(axes: &[SweepAxis]) -> Vec<Vec<(String, toml::Value)>> {
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((a.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => v[n / 2],
            _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        Stat {
            n,
            mean: v.iter().sum::<f64>() / n.max(1) as f64,
            median,
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: Vec<(String, String)>,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub keys: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One line per grid point and metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            let _ = write!(out, "{k}\t");
        }
        out.push_str("metric\tn\tmedian\tmean\tmin\tmax\tspread\n");
        for r in &self.rows {
            for (m, s) in &r.metrics {
                for (_, v) in &r.point {
                    let _ = write!(out, "{v}\t");
                }
                let _ = writeln!(out, "{m}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", s.n, s.median, s.mean, s.min, s.max, s.spread());
            }
        }
        out
    }

    pub fn metric(&self, row: usize, name: &str) -> Option<&Stat> {
        self.rows.get(row)?.metrics.get(name)
    }
}

fn literal(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One run per grid point and seed, at most `workers` at a time (0 means
/// one per core). Results do not depend on the worker count.
pub fn sweep(cfg: &ScenarioConfig, axes: &[SweepAxis], seeds: &[u64], workers: usize) -> Result<SweepTable, ScenarioError> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) || seeds.is_empty() {
        return Err(ScenarioError::EmptyGrid);
    }
    let points = grid_points(axes);
    let configs: Vec<ScenarioConfig> = points
        .iter()
        .map(|p| p.iter().try_fold(cfg.clone(), |c, (k, v)| c.with_override(k, v.clone())))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
    let results: Vec<BTreeMap<String, f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let mut c = configs[i].clone();
                c.output.event_log = false;
                c.output.metrics = false;
                execute(&c, seed).map(|(r, _)| r.summary.metrics())
            })
            .collect::<Result<_, _>>()
    })?;
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (k, &(pi, _)) in jobs.iter().enumerate() {
                if pi == i {
                    for (m, &v) in &results[k] {
                        by.entry(m.clone()).or_default().push(v);
                    }
                }
            }
            SweepRow {
                point: p.iter().map(|(k, v)| (k.clone(), literal(v))).collect(),
                metrics: by.into_iter().map(|(m, v)| (m, Stat::of(&v))).collect(),
            }
        })
        .collect();
    Ok(SweepTable { keys: axes.iter().map(|a| a.key.clone()).collect(), seeds: seeds.to_vec(), rows })
}
