use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use attnpred::prefetchsim::REFERENCE_BREAKDOWN;
use attnpred::trace::{read_trace_file, write_trace_file, AttentionTrace, TraceHeader};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnpred"))
        .current_dir(dir)
        .env_remove("ATTNPRED_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a small synthetic trace with q/k into `dir/name`.
fn small_trace(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = run(
        dir,
        &[
            "synth",
            "--set",
            "num_layers=1",
            "--set",
            "num_heads=2",
            "--set",
            "prefill_len=96",
            "--set",
            "decode_steps=24",
            "--set",
            "history_rows=8",
            "--set",
            "reaccess_positions=[5, 40]",
            "--seed",
            &seed.to_string(),
            "--out",
            name,
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join(name)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_synth_is_readable_and_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    read_trace_file(dir.path().join("trace.att1")).unwrap();
    let m = manifest(&dir.path().join("trace.manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["rng_seed"], 0);
    assert_eq!(m["outputs"][0], "trace.att1");
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_trace(dir.path(), "a.att1", 7);
    let b = small_trace(dir.path(), "b.att1", 7);
    let c = small_trace(dir.path(), "c.att1", 8);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn unknown_config_key_is_named_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "num_layers = 1\nnum_hedas = 2\n").unwrap();
    let out = run(dir.path(), &["synth", "--config", "s.toml"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("num_hedas") && err.contains("line 2"), "{err}");
    assert!(!dir.path().join("trace.att1").exists());
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "num_layers = 1\nprefill_len = 32\ndecode_steps = 4\nrng_seed = 3\n").unwrap();
    let out = run(dir.path(), &["synth", "--config", "s.toml", "--seed", "9", "--set", "num_heads=1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let t = read_trace_file(dir.path().join("trace.att1")).unwrap();
    assert_eq!((t.header().num_layers, t.header().num_heads, t.header().prefill_len), (1, 1, 32));
    let m = manifest(&dir.path().join("trace.manifest.json"));
    assert_eq!(m["rng_seed"], 9);
    assert_eq!(m["config"], "s.toml");
}

#[test]
fn tiny_training_run_writes_one_metrics_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    small_trace(dir.path(), "b.att1", 2);
    let start = Instant::now();
    let out = run(
        dir.path(),
        &["train", "a.att1", "b.att1", "--history", "8", "--block-size", "8", "--epochs", "4", "--sample-ratio", "0.5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(csv_rows(&dir.path().join("predictor.metrics.csv")).len(), 4);
    attnpred::predictor::PredictorWeights::load(dir.path().join("predictor.apw")).unwrap();
    let m = manifest(&dir.path().join("predictor.manifest.json"));
    assert_eq!(m["settings"]["epochs"], 4);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn unset_training_options_take_the_protocol_defaults() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["train", "a.att1", "--epochs", "1", "--history", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&dir.path().join("predictor.manifest.json"));
    assert_eq!(m["settings"]["block_size"], 16);
    assert_eq!(m["settings"]["sample_ratio"], 0.03);
    assert_eq!(m["settings"]["batch_size"], 32);
    assert_eq!(m["settings"]["learning_rate"], 1e-3);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["train", "a.att1", "--epochs", "2", "--set", "learning_rate=1e300"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(!dir.path().join("predictor.apw").exists());
}

#[test]
fn missing_trace_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["train", "a.att1", "gone.att1"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("gone.att1"));
    assert!(!dir.path().join("predictor.metrics.csv").exists());
}

#[test]
fn oracle_rows_are_100_and_rows_are_traces_times_methods() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    small_trace(dir.path(), "b.att1", 2);
    let out = run(dir.path(), &["eval", "a.att1", "b.att1", "--methods", "oracle", "--budget", "16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("eval.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[6] == "100.0000"), "{rows:?}");

    let out = run(
        dir.path(),
        &["eval", "a.att1", "b.att1", "--methods", "oracle,prev_token,quest", "--budget", "10%", "--out", "three.csv"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("three.csv"));
    assert_eq!(rows.len(), 2 * 3);
    for r in &rows {
        let acc: f64 = r[6].parse().unwrap();
        assert!((0.0..=100.0).contains(&acc));
    }
}

#[test]
fn predictor_without_weights_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["eval", "a.att1", "--methods", "attnpredictor,oracle"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--weights"));
    let out = run(dir.path(), &["eval", "a.att1", "--methods", "nonsense"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn trained_weights_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["train", "a.att1", "--history", "4", "--block-size", "8", "--epochs", "2", "--sample-ratio", "0.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(
        dir.path(),
        &[
            "eval", "a.att1", "--weights", "predictor.apw", "--methods", "attnpredictor", "--history", "4", "--block-size", "8",
            "--budget", "32", "--set", "sink_tokens=4", "--set", "local_tokens=4",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "attnpredictor");
}

fn trace_without_qk(path: &Path) {
    let header = TraceHeader {
        num_layers: 1,
        num_heads: 1,
        prefill_len: 3,
        num_decode_steps: 2,
        has_qk: false,
        head_dim: 0,
        first_step_offset: 0,
    };
    let rows = vec![vec![0.2, 0.3, 0.5], vec![0.25; 4], vec![0.2; 5]];
    write_trace_file(&AttentionTrace::new(header, rows, None).unwrap(), path).unwrap();
}

#[test]
fn empty_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    let out = run(dir.path(), &["sweep", "a.att1", "--methods", "oracle", "--set", "block_size=[]"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn sweep_continues_past_failed_cells_and_flags_them() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "a.att1", 1);
    trace_without_qk(&dir.path().join("plain.att1"));
    let out = run(
        dir.path(),
        &["sweep", "a.att1", "plain.att1", "--methods", "quest,h2o_plus", "--block-size", "4,8", "--budget", "2,16"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    let failed: Vec<_> = rows.iter().filter(|r| r[6] == "NaN").collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r[0] == "plain" && r[1] == "quest"));
    assert!(stderr(&out).contains("4 of 16 sweep cells failed"));
    assert!(dir.path().join("sweep.manifest.json").exists());
}

#[test]
fn sim_defaults_reproduce_the_reference_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sim"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows = csv_rows(&dir.path().join("sim.csv"));
    assert_eq!(rows.len(), REFERENCE_BREAKDOWN.len());
    let last = rows.last().unwrap();
    let reference = REFERENCE_BREAKDOWN.last().unwrap();
    assert_eq!(last[col("context_len")], reference.context_len.to_string());
    let get = |name: &str| last[col(name)].parse::<f64>().unwrap();
    assert!((get("predict_ms") - reference.predict_ms).abs() <= 0.5);
    assert!((get("transfer_ms") - reference.transfer_ms).abs() <= 0.5);
    assert!((get("cross_token_ms") - reference.total_ms.unwrap()).abs() <= 0.5);
    assert!(dir.path().join("sim.plot.csv").exists());
}

#[test]
fn sim_flags_change_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sim", "--context-lengths", "1000,2000,64000", "--out", "s.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("s.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1000", "2000", "64000"]);
}

#[test]
fn import_reports_each_file() {
    let dir = tempfile::tempdir().unwrap();
    small_trace(dir.path(), "good.att1", 1);
    trace_without_qk(&dir.path().join("plain.att1"));
    let out = run(dir.path(), &["import", "good.att1", "plain.att1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut bytes = std::fs::read(dir.path().join("good.att1")).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(dir.path().join("cut.att1"), bytes).unwrap();
    let out = run(dir.path(), &["import", "good.att1", "cut.att1", "--out", "report.json"]);
    assert_eq!(code(&out), 3);
    let report = manifest(&dir.path().join("report.json"));
    assert_eq!(report[0]["valid"], true);
    assert_eq!(report[0]["num_heads"], 2);
    assert_eq!(report[1]["valid"], false);
    assert!(report[1]["error"].as_str().unwrap().contains("corrupt"));
}

#[test]
fn output_directory_override_redirects_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("runs").join("one");
    let out = Command::new(env!("CARGO_BIN_EXE_attnpred"))
        .current_dir(dir.path())
        .env("ATTNPRED_OUT_DIR", &target)
        .args(["sim", "--out", "elsewhere/sim.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["sim.csv", "sim.plot.csv", "sim.manifest.json"] {
        assert!(target.join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("elsewhere").exists());
}

#[test]
fn malformed_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(dir.path(), &["train", "--epochs", "many"])), 2);
    assert_eq!(code(&run(dir.path(), &["eval", "--set", "novalue"])), 2);
}
