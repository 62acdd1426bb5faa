use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn qfif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfif"))
        .args(args)
        .env_remove("QFIF_THREADS")
        .output()
        .expect("binary runs")
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli");
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn no_arguments_print_usage() {
    let out = qfif(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(qfif(&["qfi", "--bogus"]).status.code(), Some(2));
    assert_eq!(qfif(&["qfi"]).status.code(), Some(2));
    assert_eq!(qfif(&["qfi", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(qfif(&["qfi", "--preset", "two_level", "--param", "T"]).status.code(), Some(2));
    assert_eq!(qfif(&["qfi", "--preset", "two_level", "--grid", "7"]).status.code(), Some(2));
    assert_eq!(qfif(&["--threads", "0", "oracle-check"]).status.code(), Some(2));
    assert_eq!(qfif(&["measure"]).status.code(), Some(2));
    assert_eq!(qfif(&["optimize", "--structure", "four_level", "--T", "1"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_qfif")).args(["oracle-check"]).env("QFIF_THREADS", "0").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_postselection_exits_1_with_diagnostic() {
    let cfg = scratch("dark.json");
    let zero = "[[[0,0],[0,0]],[[0,0],[0,0]]]";
    let text = format!(
        r#"{{"dimension":2,"steps":2,"horizon":1.0,"hamiltonians":[{zero},{zero}],
            "jumps":[{{"matrix":[[[0,0],[1,0]],[[0,0],[0,0]]],"channel":"PortA"}}],
            "initial_state":[[1,0],[0,0]],"final_state":[[0,0],[1,0]]}}"#
    );
    fs::write(&cfg, text).unwrap();
    let out = qfif(&["qfi", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let diag: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(diag["error"]["kind"], "postselection");
}

#[test]
fn coherent_cavity_qfi_is_eight() {
    let v = json_stdout(&qfif(&["qfi", "--preset", "cavity", "--param", "state=coherent", "--param", "alpha=1"]));
    let q = v["qfi"].as_f64().unwrap();
    assert!((q - 8.0).abs() < 0.04, "{q}");
    assert_eq!(v["header"]["schema_version"], 1);
    assert_eq!(v["header"]["seed"], 1729);
    assert_eq!(v["header"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn config_hash_tracks_inputs() {
    let hash = |alpha: &str, seed: &str| {
        let v = json_stdout(&qfif(&[
            "qfi", "--preset", "two_level", "--param", &format!("Omega={alpha}"), "--param", "T=2", "--param", "M=20",
            "--seed", seed,
        ]));
        v["header"]["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("1", "3"), hash("1", "3"));
    assert_ne!(hash("1", "3"), hash("2", "3"));
    assert_ne!(hash("1", "3"), hash("1", "4"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    for args in [
        vec!["qfi", "--preset", "pi_level", "--param", "T=3", "--param", "M=30", "--format", "csv"],
        vec!["optimize", "--structure", "dark_1", "--T", "2", "--steps", "8", "--trials", "4", "--iters", "4"],
        vec!["spectrum", "--preset", "dark_2"],
    ] {
        let a = qfif(&args);
        let b = qfif(&[&["--threads", "1"][..], &args[..]].concat());
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn scan_writes_rows_and_summary() {
    let out = scratch("dicke.csv");
    let o = qfif(&["scan", "--preset", "dicke", "--param", "N=1..6", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# qfif"));
    assert_eq!(lines[1], "param,qfi,q2,flux,norm_sq");
    assert_eq!(lines.len(), 8);
    let first_qfi: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((first_qfi - 16.0).abs() < 0.16);
    let summary: Value = serde_json::from_str(&fs::read_to_string(scratch("dicke.csv.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["parameter"], "N");
    assert!(summary["slope"].as_f64().unwrap() > 1.0);
    assert_eq!(qfif(&["scan", "--preset", "dicke"]).status.code(), Some(2));
}

#[test]
fn correlators_split_into_three_files() {
    let prefix = scratch("tl");
    let o = qfif(&["correlators", "--preset", "two_level", "--param", "T=1", "--param", "M=8", "--grid", "4", "--out", prefix.to_str().unwrap()]);
    assert!(o.status.success());
    for (suffix, head, rows) in [("_cg.csv", "t,s,re,im", 15), ("_chi.csv", "t,s,re,im", 15), ("_flux.csv", "t,n", 5)] {
        let text = fs::read_to_string(format!("{}{suffix}", prefix.display())).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], head);
        assert_eq!(lines.len(), rows + 2, "{suffix}");
    }
}

#[test]
fn mps_reports_and_emits_circuit() {
    let path = scratch("circuit.json");
    let v = json_stdout(&qfif(&[
        "mps", "--preset", "two_level", "--param", "T=2", "--param", "M=20", "--emit-circuit", path.to_str().unwrap(),
    ]));
    assert_eq!(v["num_bins"], 20);
    assert!(v["isometry_residual"].as_f64().unwrap() < 1e-10);
    let c: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(c["circuit"]["gates"].as_array().unwrap().len(), 20);
    assert_eq!(c["header"]["config_hash"], v["header"]["config_hash"]);
}

#[test]
fn optimize_writes_histogram() {
    let out = scratch("opt.json");
    let hist = scratch("opt_hist.csv");
    let o = qfif(&[
        "optimize", "--structure", "two_level", "--T", "2", "--steps", "8", "--trials", "5", "--iters", "3",
        "--out", out.to_str().unwrap(), "--histogram", hist.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let run: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(run["run"]["trials"].as_array().unwrap().len(), 5);
    assert!(run["run"]["best_q2"].as_f64().is_some());
    let text = fs::read_to_string(&hist).unwrap();
    assert_eq!(text.lines().nth(1), Some("bin_lo,bin_hi,count"));
    let total: usize = text.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 5);
}

#[test]
fn grad_check_agrees() {
    for objective in ["q2", "norm"] {
        let v = json_stdout(&qfif(&[
            "grad-check", "--preset", "pi_level", "--param", "T=2", "--param", "M=8", "--objective", objective,
        ]));
        assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5, "{objective}: {v}");
        assert!(v["timings"]["adjoint_s"].as_f64().is_some());
    }
}

#[test]
fn measure_subcommands() {
    let v = json_stdout(&qfif(&["measure", "--lie-closure", "1"]));
    assert_eq!(v["closure"]["closure_dim"], 15);
    assert_eq!(v["controllable"], true);
    assert_eq!(qfif(&["measure", "--lie-closure", "3"]).status.code(), Some(2));

    let v = json_stdout(&qfif(&["measure", "--counterexample"]));
    assert!(v["lambda"]["max_abs_trace"].as_f64().unwrap() < 1e-10);
    assert!(v["lambda"]["max_abs_diagonal"].as_f64().unwrap() > 1e-4);

    let support = scratch("support.json");
    fs::write(&support, r#"{"Finite":[[1,1]]}"#).unwrap();
    let v = json_stdout(&qfif(&["measure", "--check", support.to_str().unwrap()]));
    assert_eq!(v["number_check"]["valid"], true);
    fs::write(&support, r#"{"Finite":[[1,1],[2,2]]}"#).unwrap();
    let v = json_stdout(&qfif(&["measure", "--check", support.to_str().unwrap()]));
    assert_eq!(v["number_check"]["valid"], false);
}

#[test]
fn oracle_check_passes() {
    let v = json_stdout(&qfif(&["oracle-check"]));
    assert_eq!(v["pass"], true);
    assert!(v["max_deviation"].as_f64().unwrap() <= 1e-8);
}
