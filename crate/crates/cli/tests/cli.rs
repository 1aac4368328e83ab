use std::path::Path;
use std::process::{Command, Output};

fn clustersim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clustersim")).args(args).env_remove("CLUSTERSIM_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
include = ["vela-2023"]
name = "cli-small"
horizon = 172800.0

[topology]
racks = 2

[[jobs]]
name = "small"
tp = 4
pp = 1
dp = 8
base_step_compute = 10.0
checkpoint_state_size = 1e11
host_io_bytes_per_step = 0.0
read_bytes_per_step = 0.0
"#;

#[test]
fn describe_lists_presets() {
    let o = clustersim(&["describe", "--presets"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l == "vela-2023"), "{out}");
}

#[test]
fn describe_validates_a_preset_topology() {
    let o = clustersim(&["describe", "-s", "bluevela-pod"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("128 nodes"), "{out}");
    assert!(out.contains("validation PASS"), "{out}");
}

#[test]
fn schema_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "include = [\"vela-2023\"]\n[faults.model.rates]\ndimm = -1.0\n");
    let o = clustersim(&["run", "-s", &bad, "-o", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stderr).unwrap().contains("faults.model.rates.dimm"));
    assert_eq!(code(&clustersim(&["run", "-s", "vela-2099"])), 2);
}

#[test]
fn unsafe_power_domain_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\n[power.params]\npdu_rating = 15.0\n");
    let s = write(dir.path(), "hot.toml", &body);
    let o = clustersim(&["run", "-s", &s, "-o", dir.path().join("out").to_str().unwrap(), "--horizon", "1d"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn runtime_errors_exit_4() {
    assert_eq!(code(&clustersim(&["run", "-s", "missing.toml"])), 4);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&clustersim(&["render", dir.path().to_str().unwrap()])), 4);
}

#[test]
fn run_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("run");
    let o = clustersim(&["run", "-s", &s, "-o", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("seed.txt")).unwrap().trim(), "5");
    let again = dir.path().join("again");
    assert_eq!(code(&clustersim(&["run", "-s", &s, "-o", again.to_str().unwrap(), "--seed", "5"])), 0);
    assert_eq!(std::fs::read(out.join("events.log")).unwrap(), std::fs::read(again.join("events.log")).unwrap());

    let plots = dir.path().join("plots");
    let r = clustersim(&["render", out.to_str().unwrap(), "-o", plots.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    assert!(plots.join("lost_time_bars.tsv").exists());
    let d = clustersim(&["describe", "--run-dir", out.to_str().unwrap()]);
    assert_eq!(code(&d), 0);
    assert!(String::from_utf8(d.stdout).unwrap().contains("goodput"));
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = clustersim(&[
        "sweep",
        "-s",
        "straggler",
        "-g",
        "power.braked_gpu_w=150.0,400.0",
        "--seeds",
        "0..2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert!(tsv.starts_with("power.braked_gpu_w\tmetric"));
    assert_eq!(code(&clustersim(&["sweep", "-s", "straggler", "-g", "novalue"])), 2);
}
