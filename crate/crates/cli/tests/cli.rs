use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn splitfc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitfc"))
        .args(args)
        .current_dir(dir)
        .env("SPLITFC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not json: {text}"))
}

fn write_matrix(path: &Path, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) {
    let mut s = String::new();
    for i in 0..rows {
        let row: Vec<String> = (0..cols).map(|j| format!("{}", f(i, j))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

/// Cheap deterministic pseudo-noise, roughly uniform on [-1, 1).
fn noise(i: usize, j: usize) -> f64 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 29;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 32;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

const SMALL: &[&str] = &["--iters", "6", "--dataset", "blobs:classes=4,dims=8,n=400,sep=2"];

#[test]
fn train_writes_one_row_per_device_step() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--compressor", "splitfc", "--R", "16", "--ce-d", "0.4", "--seed", "1", "--out", "run"];
    args.extend_from_slice(SMALL);
    let out = splitfc(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,k,loss,uplink_bits,downlink_bits,test_acc"));
    assert_eq!(lines.count(), 6 * 5);
    let summary = json_file(&dir.path().join("run/summary.json"));
    assert_eq!(summary["runs"][0]["rows"], 30);
    assert_eq!(summary["config"]["ratio"], 16.0);
}

#[test]
fn lossless_and_splitfc_share_the_trace_schema() {
    let dir = TempDir::new().unwrap();
    for c in ["lossless", "splitfc"] {
        let mut args = vec!["train", "--compressor", c, "--seed", "3", "--out", c];
        args.extend_from_slice(SMALL);
        assert!(splitfc(&args, dir.path()).status.success());
    }
    let read = |c: &str| std::fs::read_to_string(dir.path().join(c).join("trace.csv")).unwrap();
    let (a, b) = (read("lossless"), read("splitfc"));
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(a.lines().count(), b.lines().count());
    let keys = |c: &str| {
        let s = json_file(&dir.path().join(c).join("summary.json"));
        s["runs"][0].as_object().unwrap().keys().cloned().collect::<Vec<_>>()
    };
    assert_eq!(keys("lossless"), keys("splitfc"));
}

#[test]
fn same_command_and_seed_give_identical_csv() {
    let dir = TempDir::new().unwrap();
    for o in ["a", "b"] {
        let mut args = vec!["train", "--seed", "9", "--out", o];
        args.extend_from_slice(SMALL);
        assert!(splitfc(&args, dir.path()).status.success());
    }
    let a = std::fs::read(dir.path().join("a/trace.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/trace.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_emits_one_csv_per_point() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--sweep-ce-d", "0.1,0.2,0.4", "--ce-s", "1.0", "--out", "sweep"];
    args.extend_from_slice(SMALL);
    let out = splitfc(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for ce in ["0.1", "0.2", "0.4"] {
        assert!(dir.path().join(format!("sweep/trace_ce-d_{ce}.csv")).exists());
    }
    let summary = json_file(&dir.path().join("sweep/summary.json"));
    let runs = summary["runs"].as_array().unwrap();
    let ce: Vec<f64> = runs.iter().map(|r| r["ce_d"].as_f64().unwrap()).collect();
    assert_eq!(ce, vec![0.1, 0.2, 0.4]);
    // Fewer uplink bits at lower rates.
    let bits: Vec<f64> = runs.iter().map(|r| r["uplink_bits"].as_f64().unwrap()).collect();
    assert!(bits[0] < bits[1] && bits[1] < bits[2], "{bits:?}");
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "compressor = \"rand\"\niters = 2\nseed = 4\nlr = 0.01\npartition = \"iid\"\n\
         dataset = \"blobs:classes=3,dims=4,n=300\"\nout = \"from-file\"\n",
    )
    .unwrap();
    let out = splitfc(&["train", "--config", "run.toml", "--iters", "3", "--out", "from-flag"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("from-file").exists());
    let s = json_file(&dir.path().join("from-flag/summary.json"));
    assert_eq!(s["config"]["iters"], 3);
    assert_eq!(s["config"]["seed"], 4);
    assert_eq!(s["config"]["lr"], 0.01);
    assert_eq!(s["config"]["compressor"], "rand");
    assert_eq!(s["dataset"], "blobs:classes=3,dims=4,n=300");
    assert_eq!(s["runs"][0]["rows"], 15);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "iters = 2\nlearning_rate = 0.1\n").unwrap();
    let out = splitfc(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn bad_flag_values_exit_with_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(splitfc(&["train", "--compressor", "gzip"], dir.path()).status.code(), Some(2));
    assert_eq!(splitfc(&["train", "--R", "0.5"], dir.path()).status.code(), Some(2));
    assert_eq!(splitfc(&["train", "--dataset", "csv:x"], dir.path()).status.code(), Some(2));
}

#[test]
fn infeasible_training_budget_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--ce-d", "0.0001", "--out", "x"];
    args.extend_from_slice(SMALL);
    let out = splitfc(&args, dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "infeasible");
    assert_eq!(err["error"]["iteration"], 1);
    assert!(err["error"]["shortfall_bits"].as_f64().unwrap() > 0.0);
}

#[test]
fn codec_random_matrix_error_within_bound() {
    let dir = TempDir::new().unwrap();
    write_matrix(&dir.path().join("a.txt"), 256, 1152, noise);
    let out = splitfc(&["codec", "a.txt", "--ce", "0.2", "--verify", "--out", "c"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json_file(&dir.path().join("c/stats.json"));
    let (err, bound) = (s["measured_error"].as_f64().unwrap(), s["error_bound"].as_f64().unwrap());
    assert!(err <= bound, "{err} > {bound}");
    assert_eq!(s["verified"], true);
    // The uplink count includes the mask, which the available budget excludes.
    assert!(s["nominal_bits"].as_f64().unwrap() <= 256.0 * 1152.0 * 0.2 + 1e-6);
    assert!(s["nominal_bits"].as_f64().unwrap() - 1152.0 <= s["budget_bits"].as_f64().unwrap() + 1e-6);
    let sfc = std::fs::read(dir.path().join("c/payload.sfc")).unwrap();
    assert_eq!(sfc.len() as u64 * 8, s["packed_bits"].as_u64().unwrap());
    assert_eq!(sfc[0], 1);
}

#[test]
fn codec_constant_matrix_has_tiny_error() {
    let dir = TempDir::new().unwrap();
    write_matrix(&dir.path().join("c.txt"), 32, 16, |_, _| 0.75);
    let out = splitfc(&["codec", "c.txt", "--ce", "2", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json_file(&dir.path().join("o/stats.json"));
    assert!(s["measured_error"].as_f64().unwrap() < 1e-9, "{}", s["measured_error"]);
}

#[test]
fn codec_ablate_m_fixes_the_split() {
    let dir = TempDir::new().unwrap();
    write_matrix(&dir.path().join("a.txt"), 64, 32, noise);
    for m in ["0", "5"] {
        let out = splitfc(&["codec", "a.txt", "--ce", "1", "--ablate-M", m, "--out", m], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let s = json_file(&dir.path().join(m).join("stats.json"));
        assert_eq!(s["m"].to_string(), m);
        assert!(s["measured_error"].as_f64().unwrap() <= s["error_bound"].as_f64().unwrap());
    }
}

#[test]
fn codec_infeasible_budget_reports_shortfall() {
    let dir = TempDir::new().unwrap();
    write_matrix(&dir.path().join("a.txt"), 8, 8, noise);
    let out = splitfc(&["codec", "a.txt", "--ce", "0.5", "--direction", "downlink"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    let e = &err["error"];
    let gap = e["required_bits"].as_f64().unwrap() - e["available_bits"].as_f64().unwrap();
    assert!((gap - e["shortfall_bits"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn codec_rejects_ragged_matrix() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("r.txt"), "1,2,3\n4,5\n").unwrap();
    let out = splitfc(&["codec", "r.txt", "--ce", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

fn allocate(dir: &Path, problem: &str, extra: &[&str]) -> Output {
    std::fs::write(dir.join("p.json"), problem).unwrap();
    let mut args = vec!["allocate", "p.json"];
    args.extend_from_slice(extra);
    splitfc(&args, dir)
}

#[test]
fn allocate_mean_only_instance_returns_one_level() {
    let dir = TempDir::new().unwrap();
    let out = allocate(
        dir.path(),
        r#"{"a_tilde":[1.0],"batch":16,"d_hat":10,"m":0,"budget":200,"q_ep":200}"#,
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["q_int"].as_array().unwrap().len(), 1);
    assert_eq!(v["within_budget"], true);
    // 128 metadata + 10 flags + 10 log2 Q0 <= 200, largest integer Q0.
    let q0 = 2f64.powf(62.0 / 10.0).floor() as u64;
    assert_eq!(v["q_int"][0], q0);
}

#[test]
fn allocate_oracle_prints_sandwich() {
    let dir = TempDir::new().unwrap();
    let out = allocate(
        dir.path(),
        r#"{"a_tilde":[0.5,2.0,1.0],"batch":4,"d_hat":2,"m":2,"budget":200,"q_ep":200}"#,
        &["--oracle", "64", "--out", "r.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_file(&dir.path().join("r.json"));
    let s: Vec<f64> = v["oracle"]["sandwich"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(s.len(), 3);
    assert!(s[0] <= s[1] && s[1] <= s[2], "{s:?}");
    assert_eq!(v["oracle"]["sandwich_holds"], true);
}

#[test]
fn allocate_infeasible_is_structured() {
    let dir = TempDir::new().unwrap();
    let out = allocate(
        dir.path(),
        r#"{"a_tilde":[0.5,2.0,1.0],"batch":4,"d_hat":2,"m":2,"budget":20,"q_ep":200}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "infeasible");
    assert_eq!(err["error"]["exit_code"], 3);
}

#[test]
fn allocate_malformed_problem_is_config_error() {
    let dir = TempDir::new().unwrap();
    let out = allocate(dir.path(), r#"{"a_tilde":[1.0]}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
}
