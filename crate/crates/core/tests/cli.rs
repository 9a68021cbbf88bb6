use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
horizon = 40
trials = 50
seed = 5

[policy]
kind = "periodic"
period = 3

[[subsystem]]
name = "plant"
a = 1.15
b = 0.1
w = 0.001
q = 1.0
r = 1.0
tau = 2
theta = 0.15
"#;

fn run(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ncs-sim"))
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn tradeoff(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("out/tradeoff.csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn single_policy_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), CONFIG, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = tradeoff(dir.path());
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("plant,periodic,3,"), "{}", rows[1]);
    assert!(rows[1].ends_with(",50,5,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/aggregate.json")).unwrap()).unwrap();
    assert_eq!(json["rows"][0]["aggregate"]["trials"], 50);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        CONFIG,
        &["--policy", "voi_proxy", "--trials", "20", "--seed", "9", "--mode", "expected", "--trace"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = tradeoff(dir.path());
    assert!(rows[1].starts_with("plant,voi_proxy,,"), "{}", rows[1]);
    assert!(rows[1].ends_with(",20,9,"));
    let trace = std::fs::read_to_string(dir.path().join("out/trace_plant_voi_proxy.csv")).unwrap();
    assert!(trace.starts_with("k,x0,xhat0,u0,e0,delta,delivered,aoi,voip\n"));
    assert_eq!(trace.lines().count(), 42);
}

#[test]
fn sweep_flag_replaces_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), CONFIG, &["--sweep", "voi_proxy=0.01,0.1", "--sweep", "aoi_threshold=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = tradeoff(dir.path());
    let keys: Vec<_> = rows[1..].iter().map(|r| r.split(',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["plant,voi_proxy,0.01", "plant,voi_proxy,0.1", "plant,aoi_threshold,3"]);
}

#[test]
fn invalid_inputs_fail_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &CONFIG.replace("horizon = 40", "horizon = 1"), &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("subsystem[0].tau"));

    let out = run(dir.path(), CONFIG, &["--policy", "periodic:0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("period"));

    let out = run(dir.path(), CONFIG, &["--sweep", "lottery=1"]);
    assert!(!out.status.success());

    let out = run(dir.path(), "horizon = 10\n", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("subsystem"));
}

#[test]
fn unknown_keys_warn_but_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &CONFIG.replace("seed = 5", "seed = 5\nspeed = 3"), &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
}
