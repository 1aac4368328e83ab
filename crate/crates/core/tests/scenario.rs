use clustersim::network::Protocol;
use clustersim::resilience::{IntervalPolicy, StorageKind};
use clustersim::scenario::experiments::protocol_table;
use clustersim::scenario::sweep::grid_points;
use clustersim::scenario::{
    execute, parse_scenario, parse_scenario_str, preset, preset_names, render_report, run_scenario, sweep, ScenarioError,
    SweepAxis,
};
use clustersim::topology::{validate_topology, TopologyKind};

fn small_month() -> String {
    r#"
include = ["vela-2023"]
name = "small-month"
horizon = 864000.0

[topology]
racks = 4

[[jobs]]
name = "small"
tp = 4
pp = 2
dp = 8
base_step_compute = 10.0
checkpoint_state_size = 4.5e11
host_io_bytes_per_step = 0.0
read_bytes_per_step = 0.0
"#
    .to_string()
}

#[test]
fn every_preset_parses_and_builds() {
    for name in preset_names() {
        let cfg = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        let topo = cfg.build_topology().unwrap();
        assert!(validate_topology(&topo).passed(), "{name}");
    }
}

#[test]
fn vela_2023_node_and_rack() {
    let cfg = preset("vela-2023").unwrap();
    assert_eq!(cfg.node.gpus_per_node, 8);
    assert_eq!(cfg.node.nic_count, 4);
    assert_eq!(cfg.node.ports_per_nic, 2);
    assert_eq!(cfg.node.nic_port_gbps, 100.0);
    let topo = cfg.build_topology().unwrap();
    assert_eq!(topo.kind, TopologyKind::Clos);
    assert!(topo.racks.iter().all(|r| r.len() == 6));
    let report = validate_topology(&topo);
    assert!(report.dual_homing.unwrap().violations.is_empty());
}

#[test]
fn bluevela_pod_shape() {
    let topo = preset("bluevela-pod").unwrap().build_topology().unwrap();
    assert_eq!(topo.node_count(), 128);
    assert_eq!(topo.rails.len(), 8);
    assert_eq!(topo.kind, TopologyKind::FatTree);
    assert!(validate_topology(&topo).non_blocking.unwrap().passed());
}

#[test]
fn vela_2022_uses_nfs_like_storage() {
    assert_eq!(preset("vela-2022").unwrap().storage.kind, StorageKind::NfsLike);
    assert_eq!(preset("vela-2023").unwrap().storage.kind, StorageKind::ScaleCache);
}

#[test]
fn negative_rate_names_the_key() {
    let text = "include = [\"vela-2023\"]\n[faults.model.rates]\ndimm = -0.1\n";
    match parse_scenario_str(text, None) {
        Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "faults.model.rates.dimm"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let text = "include = [\"vela-2023\"]\n[scheduler]\npool_fracton = 0.2\n";
    let err = parse_scenario_str(text, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("scheduler"), "{err}");
    assert!(err.to_string().contains("pool_fracton"), "{err}");
}

#[test]
fn unknown_preset_is_reported() {
    let err = parse_scenario_str("include = [\"vela-2099\"]\n", None).unwrap_err();
    assert!(matches!(err, ScenarioError::UnknownPreset(ref p) if p == "vela-2099"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_topology_is_a_schema_error() {
    let err = parse_scenario_str("name = \"bare\"\n", None).unwrap_err();
    assert!(matches!(err, ScenarioError::Schema { ref path, .. } if path.contains("topology")), "{err}");
}

#[test]
fn file_includes_resolve_relative_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), "include = [\"vela-2023\"]\n[topology]\nracks = 2\n").unwrap();
    std::fs::write(dir.path().join("top.toml"), "include = [\"base.toml\"]\nname = \"top\"\n[scheduler]\npool_fraction = 0.2\n").unwrap();
    let cfg = parse_scenario(&dir.path().join("top.toml")).unwrap();
    assert_eq!(cfg.name, "top");
    assert_eq!(cfg.build_topology().unwrap().node_count(), 12);
    assert_eq!(cfg.scheduler.pool_fraction, 0.2);
}

#[test]
fn config_echo_round_trips() {
    let cfg = preset("vela-resilience-month").unwrap();
    let again = parse_scenario_str(&cfg.to_toml(), None).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn override_replaces_one_key() {
    let cfg = preset("vela-resilience-month").unwrap();
    let v: toml::Value = toml::from_str::<toml::Table>("v = {kind = \"fixed\", interval = 3600.0}").unwrap()["v"].clone();
    let c = cfg.with_override("checkpoint.policy", v).unwrap();
    assert_eq!(c.checkpoint.policy, IntervalPolicy::Fixed { interval: 3600.0 });
    let bad = cfg.with_override("scheduler.pool_fraction", toml::Value::Float(1.5)).unwrap_err();
    assert!(matches!(bad, ScenarioError::Schema { ref path, .. } if path == "scheduler.pool_fraction"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let cfg = parse_scenario_str(&small_month(), None).unwrap();
    let (r1, a1) = execute(&cfg, 11).unwrap();
    let (r2, a2) = execute(&cfg, 11).unwrap();
    assert_eq!(a1.files, a2.files);
    assert_eq!(r1.to_json(), r2.to_json());
    let (_, a3) = execute(&cfg, 12).unwrap();
    assert_ne!(a1.files["failures.tsv"], a3.files["failures.tsv"]);
}

#[test]
fn month_run_writes_documented_tables() {
    let cfg = parse_scenario_str(&small_month(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario(&cfg, 3, Some(dir.path())).unwrap();
    for f in [
        "summary.json",
        "summary.txt",
        "config.toml",
        "seed.txt",
        "events.log",
        "failures.tsv",
        "checkpoints.tsv",
        "alerts.tsv",
        "step_times.tsv",
        "queue.tsv",
        "node_status.tsv",
        "lost_time.tsv",
        "metrics_raw.tsv",
        "metrics_5min.tsv",
        "metrics_1h.tsv",
        "storage_steps.tsv",
        "power_trace.tsv",
    ] {
        let body = std::fs::read_to_string(dir.path().join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert!(!body.is_empty(), "{f} empty");
    }
    let lost = std::fs::read_to_string(dir.path().join("lost_time.tsv")).unwrap();
    let cats: Vec<&str> = lost.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(cats, ["productive", "checkpoint", "recompute", "detect_debug", "pend"]);
    let sum: f64 = lost.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);
    let l = report.summary.lost_time.unwrap();
    let total: f64 = l.fractions.values().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(report.summary.safety_pass);
    assert_eq!(std::fs::read_to_string(dir.path().join("seed.txt")).unwrap().trim(), "3");
}

#[test]
fn render_lists_lost_time_bars_and_detects_missing_files() {
    let cfg = parse_scenario_str(&small_month(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_scenario(&cfg, 1, Some(dir.path())).unwrap();
    let r = render_report(dir.path()).unwrap();
    let bars = &r.tables["lost_time_bars.tsv"];
    assert_eq!(bars.lines().count(), 6);
    assert!(r.tables.contains_key("queue_depth.tsv"));
    assert!(r.tables.contains_key("step_times.tsv"));
    assert!(r.summary.contains("goodput"));

    std::fs::remove_file(dir.path().join("queue.tsv")).unwrap();
    match render_report(dir.path()) {
        Err(ScenarioError::MissingArtifacts(f)) => assert_eq!(f, "queue.tsv"),
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(render_report(empty.path()), Err(ScenarioError::MissingArtifacts(f)) if f == "summary.json"));
}

#[test]
fn fig3_protocol_table_has_three_columns_in_order() {
    let mut cfg = preset("fig3-sweep").unwrap();
    if let Some(b) = cfg.experiments.busbw.as_mut() {
        b.gpus = 64;
        b.sizes = vec![8.0 * 1024.0 * 1024.0, 512.0 * 1024.0 * 1024.0];
    }
    let (report, art) = execute(&cfg, 0).unwrap();
    let table = protocol_table(&report.summary.busbw);
    assert_eq!(table, art.files["busbw_protocols.tsv"]);
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    assert_eq!(header, ["size_bytes", "tcp_busbw_gbps", "roce_busbw_gbps", "gdr_busbw_gbps"]);
    for line in table.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v[0] < v[1] && v[1] < v[2], "{line}");
    }
    assert!(report.summary.busbw.iter().any(|r| r.protocol == Protocol::Gdr));
}

#[test]
fn sweep_requires_a_grid() {
    let cfg = preset("straggler").unwrap();
    assert!(matches!(sweep(&cfg, &[], &[0], 1), Err(ScenarioError::EmptyGrid)));
    let empty = SweepAxis { key: "power.braked_gpu_w".into(), values: vec![] };
    assert!(matches!(sweep(&cfg, &[empty], &[0], 1), Err(ScenarioError::EmptyGrid)));
    let axis = SweepAxis::parse("power.braked_gpu_w=150.0").unwrap();
    assert!(matches!(sweep(&cfg, &[axis], &[], 1), Err(ScenarioError::EmptyGrid)));
}

#[test]
fn sweep_axis_parsing() {
    let a = SweepAxis::parse("checkpoint.policy={kind=\"fixed\",interval=600.0},{kind=\"young\"}").unwrap();
    assert_eq!(a.key, "checkpoint.policy");
    assert_eq!(a.values.len(), 2);
    let b = SweepAxis::parse("x=1,2,3").unwrap();
    let c = SweepAxis::parse("y=\"a\",\"b\"").unwrap();
    assert_eq!(grid_points(&[b, c]).len(), 6);
    assert!(SweepAxis::parse("novalue").is_err());
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let cfg = preset("straggler").unwrap();
    let axes = [SweepAxis::parse("power.braked_gpu_w=150.0,275.0,400.0").unwrap()];
    let one = sweep(&cfg, &axes, &[0, 1], 1).unwrap();
    let many = sweep(&cfg, &axes, &[0, 1], 4).unwrap();
    assert_eq!(one, many);
    let ratio = |i: usize| one.metric(i, "straggler_ratio").unwrap().median;
    assert!(ratio(0) > ratio(1) && ratio(1) > ratio(2));
    assert!((ratio(2) - 1.0).abs() < 1e-12);
    assert!(one.to_tsv().lines().next().unwrap().starts_with("power.braked_gpu_w\tmetric"));
}
