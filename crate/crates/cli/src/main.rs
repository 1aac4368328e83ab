use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clustersim::scenario::{
    parse_scenario, preset, preset_names, render_report, run_scenario, sweep, ScenarioConfig, ScenarioError, SweepAxis,
};
use clustersim::simcore::{DAY, HOUR, MINUTE};
use clustersim::topology::validate_topology;

/// Deterministic simulator for large GPU training clusters.
#[derive(Parser, Debug)]
#[command(name = "clustersim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a scenario's topology, or the summary of a finished run.
    Describe {
        /// Scenario file or preset name.
        #[arg(short, long, conflicts_with = "run_dir")]
        scenario: Option<String>,
        /// Existing run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// List the built-in presets.
        #[arg(long)]
        presets: bool,
    },
    /// Run one scenario and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a parameter grid over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...` with TOML literal values; repeat for more axes.
        #[arg(short, long = "grid", required = true)]
        grid: Vec<String>,
        /// Seeds as `a..b` (half-open) or a comma list.
        #[arg(long, default_value = "0..5")]
        seeds: String,
        /// Parallel runs; 0 uses every core.
        #[arg(short, long, default_value_t = 0)]
        workers: usize,
    },
    /// Summarize a run directory and write plot-ready tables.
    Render {
        run_dir: PathBuf,
        /// Where to write the tables (default: <run_dir>/plots).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file or preset name.
    #[arg(short, long)]
    scenario: String,
    /// Output directory (default: $CLUSTERSIM_OUT/<name>-seed<seed>).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Simulated horizon, seconds or with an s/m/h/d suffix.
    #[arg(long, value_parser = parse_duration)]
    horizon: Option<f64>,
    /// Default output root.
    #[arg(long, env = "CLUSTERSIM_OUT", default_value = "runs")]
    out_root: PathBuf,
}

fn parse_duration(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (num, unit) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => (&s[..i], c),
        _ => (s, 's'),
    };
    let scale = match unit {
        's' => 1.0,
        'm' => MINUTE,
        'h' => HOUR,
        'd' => DAY,
        other => return Err(format!("unknown unit `{other}` (s, m, h, d)")),
    };
    let v: f64 = num.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if !(v >= 0.0) {
        return Err(format!("`{s}` must be >= 0"));
    }
    Ok(v * scale)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, ScenarioError> {
    let bad = |m: String| ScenarioError::Schema { path: "seeds".into(), message: m };
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| bad(format!("{e}")))?;
        let b: u64 = b.trim().parse().map_err(|e| bad(format!("{e}")))?;
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|e| bad(format!("`{x}`: {e}")))).collect()
}

fn load(spec: &str) -> Result<ScenarioConfig, ScenarioError> {
    let p = Path::new(spec);
    if p.exists() {
        parse_scenario(p)
    } else if spec.ends_with(".toml") {
        Err(ScenarioError::Io(format!("{spec}: no such file")))
    } else {
        preset(spec)
    }
}

fn load_common(c: &Common) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = load(&c.scenario)?;
    if let Some(h) = c.horizon {
        cfg.horizon = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn describe(cfg: &ScenarioConfig) -> Result<(), ScenarioError> {
    let topo = cfg.build_topology()?;
    let v = validate_topology(&topo);
    println!("scenario {}", cfg.name);
    println!(
        "topology {:?}: {} nodes, {} GPUs, {} racks, {} switches, {} links",
        topo.kind,
        topo.node_count(),
        topo.gpu_count(),
        topo.racks.len(),
        topo.switches.len(),
        topo.links.len()
    );
    if !topo.rails.is_empty() {
        println!("rails {}", topo.rails.len());
    }
    let n = &topo.node_spec;
    println!(
        "node: {} GPUs, {} NICs x {} ports x {} Gb/s",
        n.gpus_per_node, n.nic_count, n.ports_per_nic, n.nic_port_gbps
    );
    if let Some(d) = &v.dual_homing {
        println!("dual-homing: {} NICs checked, {} violations", d.nics_checked, d.violations.len());
    }
    if let Some(b) = &v.non_blocking {
        println!("bisection: {:.0} / {:.0} Gb/s, oversubscription {:.3}", b.max_flow_gbps, b.required_gbps, b.oversubscription);
    }
    println!("validation {}", if v.passed() { "PASS" } else { "FAIL" });
    println!("horizon {:.1} d, {} jobs, storage {:?}", cfg.horizon_days(), cfg.jobs.len(), cfg.storage.kind);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, ScenarioError> {
    match cli.command {
        Command::Describe { scenario, run_dir, presets } => {
            if presets {
                for p in preset_names() {
                    println!("{p}");
                }
            }
            if let Some(dir) = run_dir {
                print!("{}", render_report(&dir)?.summary);
            } else if let Some(s) = scenario {
                describe(&load(&s)?)?;
            } else if !presets {
                return Err(ScenarioError::Schema { path: "describe".into(), message: "give --scenario, --run-dir or --presets".into() });
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, seed } => {
            let cfg = load_common(&common)?;
            let seed = seed.unwrap_or(cfg.seed);
            let out = common.out.clone().unwrap_or_else(|| common.out_root.join(format!("{}-seed{seed}", cfg.name)));
            let report = run_scenario(&cfg, seed, Some(&out))?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
            println!("artifacts in {}", out.display());
            if !report.safe() {
                return Err(ScenarioError::Safety(format!("power safety sweep failed for {}", report.name)));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { common, grid, seeds, workers } => {
            let cfg = load_common(&common)?;
            let axes: Vec<SweepAxis> = grid.iter().map(|g| SweepAxis::parse(g)).collect::<Result<_, _>>()?;
            let seeds = parse_seeds(&seeds)?;
            let table = sweep(&cfg, &axes, &seeds, workers)?;
            let tsv = table.to_tsv();
            let out = common.out.clone().unwrap_or_else(|| common.out_root.join(format!("{}-sweep", cfg.name)));
            std::fs::create_dir_all(&out).map_err(|e| ScenarioError::Io(format!("{}: {e}", out.display())))?;
            let p = out.join("sweep.tsv");
            std::fs::write(&p, &tsv).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
            print!("{tsv}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { run_dir, out } => {
            let r = render_report(&run_dir)?;
            let out = out.unwrap_or_else(|| run_dir.join("plots"));
            std::fs::create_dir_all(&out).map_err(|e| ScenarioError::Io(format!("{}: {e}", out.display())))?;
            for (name, body) in &r.tables {
                let p = out.join(name);
                std::fs::write(&p, body).map_err(|e| ScenarioError::Io(format!("{}: {e}", p.display())))?;
            }
            print!("{}", r.summary);
            println!("{} tables in {}", r.tables.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
