//! Contract tests for the command-line interface, run against the real
//! binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gcepnet")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gcepnet-cli-tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["eval", "--definitely-not-a-flag", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_detector_is_usage_error() {
    let dir = tmp_dir("unknown-detector");
    let out_file = dir.join("x.csv");
    let out = run(&[
        "eval", "--detector", "zf", "--nt", "2", "--snr", "10", "--samples", "10",
        "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("unknown detector"));
}

#[test]
fn eval_row_count_contract() {
    let dir = tmp_dir("row-count");
    let out_file = dir.join("rows.csv");
    let out = run(&[
        "eval", "--detector", "ep", "--nt", "2", "--nr", "2", "--qam", "1", "--snr",
        "0:12:4", "--samples", "100", "--seed", "7", "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&out_file).unwrap();
    let data_rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("snr_db"))
        .collect();
    assert_eq!(data_rows.len(), 4, "expected 4 grid rows:\n{text}");
    assert!(text.lines().any(|l| l == "snr_db,detector,samples,symbol_errors,ser"));
}

#[test]
fn ml_guard_rejects_large_enumeration() {
    let dir = tmp_dir("ml-guard");
    let out_file = dir.join("ml.csv");
    let out = run(&[
        "eval", "--detector", "ml", "--nt", "8", "--snr", "10", "--samples", "10",
        "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("too large for exhaustive search"));
}

#[test]
fn eval_learned_detector_requires_checkpoint() {
    let dir = tmp_dir("needs-ckpt");
    let out_file = dir.join("x.csv");
    let out = run(&[
        "eval", "--detector", "gcepnet", "--nt", "2", "--qam", "1", "--snr", "10",
        "--samples", "10", "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("--checkpoint is required"));
}

fn train_tiny(dir: &std::path::Path, name: &str, epochs: &str, extra: &[&str]) -> PathBuf {
    let prefix = dir.join(name);
    let mut args = vec![
        "train", "--nt", "2", "--qam", "1", "--t", "2", "--epochs", epochs,
        "--iters-per-epoch", "2", "--batch-size", "4", "--val-snrs", "8", "--val-samples",
        "8", "--seed", "5", "--out",
    ];
    let prefix_str = prefix.to_str().unwrap().to_string();
    args.push(Box::leak(prefix_str.into_boxed_str()));
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    prefix
}

#[test]
fn checkpoint_shape_mismatch_names_parameter() {
    let dir = tmp_dir("shape-mismatch");
    let prefix = train_tiny(&dir, "tiny", "1", &[]);
    let ckpt = prefix.with_extension("ckpt");
    let out_file = dir.join("x.csv");
    // evaluate with a different hidden width: first mismatching parameter
    // must be named
    let out = run(&[
        "eval", "--detector", "gcepnet", "--nt", "2", "--qam", "1", "--t", "2", "--nu",
        "4", "--snr", "10", "--samples", "10", "--checkpoint", ckpt.to_str().unwrap(),
        "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("embed.w0"),
        "error should name the first mismatched parameter: {}",
        stderr_of(&out)
    );
    // missing checkpoint file also fails cleanly
    let out = run(&[
        "eval", "--detector", "gcepnet", "--nt", "2", "--qam", "1", "--snr", "10",
        "--samples", "10", "--checkpoint", dir.join("nope.ckpt").to_str().unwrap(),
        "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trained_checkpoint_evaluates() {
    let dir = tmp_dir("eval-trained");
    let prefix = train_tiny(&dir, "net", "1", &[]);
    let ckpt = prefix.with_extension("ckpt");
    let out_file = dir.join("learned.csv");
    let out = run(&[
        "eval", "--detector", "ep,gcepnet", "--nt", "2", "--qam", "1", "--t", "2",
        "--snr", "6:10:4", "--samples", "50", "--seed", "3", "--checkpoint",
        ckpt.to_str().unwrap(), "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&out_file).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("snr_db"))
        .collect();
    assert_eq!(rows.len(), 4); // 2 snrs x 2 detectors
    assert!(rows.iter().any(|r| r.contains(",ep,")));
    assert!(rows.iter().any(|r| r.contains(",gcepnet,")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tmp_dir("resume");
    // two epochs in one go
    let full = train_tiny(&dir, "full", "2", &[]);
    // one epoch, then resume to two
    let part = train_tiny(&dir, "part", "1", &[]);
    let state = part.with_extension("state");
    let resumed_prefix = dir.join("resumed");
    let out = run(&[
        "train", "--nt", "2", "--qam", "1", "--t", "2", "--epochs", "2",
        "--iters-per-epoch", "2", "--batch-size", "4", "--val-snrs", "8", "--val-samples",
        "8", "--seed", "5", "--resume", state.to_str().unwrap(), "--out",
        resumed_prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let full_ckpt = std::fs::read(full.with_extension("ckpt")).unwrap();
    let resumed_ckpt = std::fs::read(resumed_prefix.with_extension("ckpt")).unwrap();
    assert_eq!(full_ckpt, resumed_ckpt, "resumed checkpoint differs");
    let full_hist = std::fs::read(full.with_extension("history.csv")).unwrap();
    let resumed_hist = std::fs::read(resumed_prefix.with_extension("history.csv")).unwrap();
    assert_eq!(full_hist, resumed_hist, "resumed history differs");
}

#[test]
fn gen_output_parses_back() {
    let dir = tmp_dir("gen");
    let out_file = dir.join("batch.txt");
    let out = run(&[
        "gen", "--nt", "3", "--nr", "4", "--qam", "2", "--snr", "12", "--count", "7",
        "--seed", "9", "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&out_file).unwrap();
    let (instances, snr) = gcepnet_core::model::read_instance_batch(&text).unwrap();
    assert_eq!(instances.len(), 7);
    assert_eq!(snr, 12.0);
    assert_eq!(instances[0].n_t, 3);
    assert_eq!(instances[0].n_r, 4);
    // round trip is a fixed point
    assert_eq!(gcepnet_core::model::write_instance_batch(&instances, snr), text);
}

#[test]
fn config_file_used_and_flags_override() {
    let dir = tmp_dir("config");
    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, "[detector]\nn_t = 2\nk = 1\niterations = 3\ndamping = 0.5\n")
        .unwrap();
    let out_file = dir.join("cfg.csv");
    let out = run(&[
        "eval", "--config", cfg_path.to_str().unwrap(), "--detector", "ep", "--t", "4",
        "--snr", "8", "--samples", "20", "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&out_file).unwrap();
    assert!(text.contains("# iterations = 4"), "flag should override config:\n{text}");
    assert!(text.contains("# damping = 0.5"), "config value should survive:\n{text}");
    // malformed config key is rejected as usage error
    std::fs::write(&cfg_path, "[detector]\nnot_real = 1\n").unwrap();
    let out = run(&[
        "eval", "--config", cfg_path.to_str().unwrap(), "--detector", "ep", "--nt", "2",
        "--snr", "8", "--samples", "10", "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn results_independent_of_worker_count() {
    let dir = tmp_dir("threads");
    let serial = dir.join("serial.csv");
    let parallel = dir.join("parallel.csv");
    for (file, threads) in [(&serial, "1"), (&parallel, "2")] {
        let out = run(&[
            "--threads", threads, "eval", "--detector", "ep", "--nt", "2", "--qam", "1",
            "--snr", "4:8:4", "--samples", "400", "--seed", "13", "--out",
            file.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    assert_eq!(
        std::fs::read(&serial).unwrap(),
        std::fs::read(&parallel).unwrap(),
        "evaluation must not depend on the worker count"
    );
}

#[test]
fn bench_flops_prints_reference_constants() {
    let out = run(&["bench-flops"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("3464"));
    assert!(text.contains("24"));
    assert!(text.contains("433"));
}

#[test]
fn bench_time_writes_timing_csv() {
    let dir = tmp_dir("bench-time");
    let out_file = dir.join("timing.csv");
    let out = run(&[
        "bench-time", "--sizes", "2,4", "--samples", "3", "--detectors", "ep,gcepnet",
        "--t", "3", "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&out_file).unwrap();
    assert!(text.lines().any(|l| l == "detector,n_t,samples,total_seconds,per_sample_us"));
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("detector,"))
        .collect();
    assert_eq!(rows.len(), 4); // 2 detectors x 2 sizes
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let total: f64 = fields[3].parse().unwrap();
        let per: f64 = fields[4].parse().unwrap();
        assert!(total > 0.0 && per > 0.0);
        let samples: f64 = fields[2].parse().unwrap();
        assert!((per - total / samples * 1e6).abs() < 1e-6 * per.max(1.0));
    }
}

#[test]
fn eval_trace_writes_ep_diagnostics() {
    let dir = tmp_dir("trace");
    let out_file = dir.join("e.csv");
    let trace_file = dir.join("trace.csv");
    let out = run(&[
        "eval", "--detector", "ep", "--nt", "2", "--qam", "1", "--t", "5", "--snr",
        "4:8:4", "--samples", "10", "--out", out_file.to_str().unwrap(), "--trace",
        trace_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = std::fs::read_to_string(&trace_file).unwrap();
    assert!(text
        .lines()
        .any(|l| l == "snr_db,iteration,theta_min,theta_max,skipped_updates,invalid_cavities,soft_ser"));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows - 1, 2 * 5); // 2 snr points x 5 iterations
}
