//! Runs the built binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn gnssxa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gnssxa"))
}

fn run(args: &[&str]) -> Output {
    gnssxa().args(args).output().expect("spawn gnssxa")
}

fn gen(dir: &Path, n_open: usize, epochs: usize) -> PathBuf {
    let path = dir.join(format!("scenario_{n_open}.json"));
    let out = run(&[
        "gen",
        "--n-auth",
        "3",
        "--n-open",
        &n_open.to_string(),
        "--m",
        "2",
        "--epochs",
        &epochs.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn solve_prints_every_epoch() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(dir.path(), 5, 8);
    let out = run(&["solve", "--scenario", scenario.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,t_s,x,y,z,clk1_us,clk2_us,iterations,converged");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn det_output_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(dir.path(), 5, 30);
    let det = |name: &str, threads: &str| {
        let out_path = dir.path().join(name);
        let out = gnssxa()
            .env("GNSSXA_THREADS", threads)
            .args([
                "det",
                "--scenario",
                scenario.to_str().unwrap(),
                "--attack",
                "time",
                "--target-enu",
                "0,10000,0",
                "--sigma-l-m",
                "2",
                "--reps",
                "8",
                "--seed",
                "42",
                "--closed-form-points",
                "10",
                "--out",
                out_path.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_path).unwrap()
    };
    let a = det("a.csv", "1");
    let b = det("b.csv", "4");
    let c = det("c.csv", "4");
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn sweep_writes_one_file_per_distance() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(dir.path(), 5, 6);
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--sigma-l-m",
        "1",
        "--reps",
        "3",
        "--distances-km",
        "1.7,25.5",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("det_1.7km.csv").exists());
    assert!(out_dir.join("det_25.5km.csv").exists());
}

#[test]
fn generation_with_three_open_signals_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(dir.path(), 3, 2);
    let tamper = dir.path().join("tamper.json");
    let args = [
        "attack-pos",
        "--scenario",
        scenario.to_str().unwrap(),
        "--mode",
        "generation",
        "--gamma-t-us",
        "10",
        "--out",
        tamper.to_str().unwrap(),
    ];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N_O >= 4"));

    let out = gnssxa().args(args).arg("--json").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["exit_code"], 3);
    assert_eq!(v["error"], "infeasible");
    assert!(!tamper.exists());
}

#[test]
fn relay_tamper_is_written_with_trace() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(dir.path(), 5, 4);
    let tamper = dir.path().join("tamper.json");
    let trace = dir.path().join("trace.csv");
    let out = run(&[
        "attack-pos",
        "--scenario",
        scenario.to_str().unwrap(),
        "--mode",
        "relay",
        "--gamma-t-us",
        "10",
        "--out",
        tamper.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--t-start-s",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tamper).unwrap()).unwrap();
    assert_eq!(v["kind"], "relay");
    let dr = v["delta_r_m"].as_array().unwrap();
    assert_eq!(dr.len(), 8);
    // Every range is delayed by c * 10 us.
    for d in dr {
        assert!((d.as_f64().unwrap() - 2997.92458).abs() < 1e-6);
    }
    let csv = std::fs::read_to_string(trace).unwrap();
    assert!(csv.starts_with("epoch,t_s,legit_clk_us,attack_clk_us\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn help_states_units() {
    let out = run(&["det", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in ["--sigma-l-m", "--gamma-t-us", "meters", "microseconds"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["det", "--scenario"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["attack-time", "--scenario", "x.json", "--target-enu", "1,2", "--out", "t.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn bad_scenario_files_exit_4() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["solve", "--scenario", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    let out = gnssxa().args(["--json", "solve", "--scenario", garbage.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "parse");
}
