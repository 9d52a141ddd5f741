use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"seed = 1000
[instance]
dim_d = 2
dim_j = 2
num_users = 3
n_ctx = 5
n_act = 4
head_scale = 5.0
raw_gap_target = 0.01
[online]
horizon = 250
refit_divisor = 10
[offline]
n_total = 200
n_checkpoints = 5
seeds = [0, 1]
"#;

fn persalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persalign"))
        .args(args)
        .env_remove("PERSALIGN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn verify_reports_at_least_ten_suites() {
    let o = persalign(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let passes = text.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passes >= 10, "{text}");
    assert!(!text.lines().any(|l| l.starts_with("FAIL ")));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[instance]\ndim_q = 3\n");
    let out = dir.path().join("out");
    let o = persalign(&["gen-instance", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dim_q"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_config_error() {
    let o = persalign(&["online", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_gap_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[instance]\ndim_d = 2\ndim_j = 2\nnum_users = 2\nn_ctx = 3\nn_act = 3\nhead_scale = 1.0\nraw_gap_target = 1000.0\nmax_retries = 3\n");
    let o = persalign(&["gen-instance", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("instance:"), "{}", stderr(&o));
}

#[test]
fn degenerate_preset_fails_full_rank_condition() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gi");
    let o = persalign(&["gen-instance", "--preset", "desk-degenerate", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&out.join("diversity.json"));
    assert_eq!(report["verdict_full_rank"], Value::Bool(false));
    assert_eq!(report["numerical_rank"], 2);
    assert!(out.join("instance.json").exists() && out.join("gaps.json").exists());

    let o = persalign(&["diagnose", "--instance", out.join("instance.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("full-rank sufficient condition: FAIL"));

    let o = persalign(&["diagnose", "--preset", "desk-online"]);
    assert!(stdout(&o).contains("full-rank sufficient condition: PASS"));
}

#[test]
fn full_online_instance_has_positive_drd_and_unit_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gi");
    let o = persalign(&["gen-instance", "--preset", "full-online", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(json(&out.join("diversity.json"))["drd"].as_f64().unwrap() > 0.0);
    assert!(json(&out.join("gaps.json"))["min_gap"].as_f64().unwrap() >= 1.0);
}

#[test]
fn online_run_writes_one_row_per_round_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = persalign(&["--jobs", "2", "online", "--config", &cfg, "--seeds", "3,4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for seed in [3, 4] {
        let trace = fs::read_to_string(out.join(format!("seed-{seed}/trace.csv"))).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some("round,user,context,one_step_regret,cumulative,refit_occurred"));
        assert_eq!(lines.count(), 250);
        let fits = fs::read_to_string(out.join(format!("seed-{seed}/fit_diagnostics.csv"))).unwrap();
        assert!(fits.starts_with("round,iterations_used,final_objective,grad_norm,converged\n"));
        assert!(out.join(format!("seed-{seed}/expected_regret.csv")).exists());
        let summary = json(&out.join(format!("seed-{seed}/summary.json")));
        assert_eq!(summary["schema_version"], 1);
        assert_eq!(summary["rounds_completed"], 250);
    }
    let manifest = json(&out.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 1 + 2 * 4);
    for f in files {
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
        assert!(out.join(f["path"].as_str().unwrap()).exists());
    }
    assert_eq!(manifest["seeds"]["run_seeds"], serde_json::json!([3, 4]));

    let again = dir.path().join("again");
    let o = persalign(&["replay", "--manifest", out.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("byte-identical"));
    for seed in [3, 4] {
        let p = format!("seed-{seed}/trace.csv");
        assert_eq!(fs::read(out.join(&p)).unwrap(), fs::read(again.join(&p)).unwrap());
    }
}

#[test]
fn replay_detects_a_tampered_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sweep");
    let o = persalign(&["offline-sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("seed,n,mean_regret,zero_flag\n"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 5);
    assert_eq!(json(&out.join("decay.json"))["schema_version"], 1);

    let o = persalign(&["replay", "--manifest", out.to_str().unwrap(), "--out", dir.path().join("ok").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mpath = out.join("manifest.json");
    let mut manifest = json(&mpath);
    for f in manifest["files"].as_array_mut().unwrap() {
        if f["path"] == "sweep.csv" {
            f["sha256"] = Value::String("0".repeat(64));
        }
    }
    fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let o = persalign(&["replay", "--manifest", out.to_str().unwrap(), "--out", dir.path().join("bad").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sweep.csv"));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("gi");
    let o = Command::new(env!("CARGO_BIN_EXE_persalign"))
        .args(["gen-instance", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("PERSALIGN_SEED", "4242")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["seeds"]["instance_start_seed"], 4242);
    assert_eq!(manifest["seeds"]["env_override"], true);
    assert!(manifest["seeds"]["instance_seed"].as_u64().unwrap() >= 4242);

    let o = Command::new(env!("CARGO_BIN_EXE_persalign"))
        .args(["gen-instance", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("PERSALIGN_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn presets_are_listed_and_printed() {
    let o = persalign(&["preset"]);
    assert!(stdout(&o).lines().any(|l| l == "desk-online"));
    let o = persalign(&["preset", "desk-degenerate"]);
    assert!(stdout(&o).contains("head_rank = 2"));
    assert_eq!(persalign(&["preset", "nope"]).status.code(), Some(2));
}
