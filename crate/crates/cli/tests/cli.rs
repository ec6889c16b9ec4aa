use std::path::Path;
use std::process::{Command, Output};

use stormdec::bench::parse_csv;
use stormdec::decode::{parse_trace, verify_trace};
use stormdec::synth::read_dataset;
use stormdec::{DecodeSchedule, TokenGrid};
use tempfile::TempDir;

fn stormdec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stormdec"))
        .current_dir(dir)
        .env_remove("STORMDEC_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stormdec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    stormdec(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const SMALL_MODEL: [&str; 6] = ["--model-dim", "32", "--ff-dim", "64", "--heads", "2"];

/// A 40-example noiseless dataset plus a model trained for a few steps.
fn trained(dir: &Path) {
    ok(dir, &["task", "gen", "--count", "40", "--frames", "24", "--noise", "0", "--out", "ds"]);
    let mut args = vec!["train", "--data", "ds", "--out", "run", "--steps", "6", "--checkpoint-every", "3"];
    args.extend(SMALL_MODEL);
    ok(dir, &args);
}

#[test]
fn codec_pipeline_is_deterministic_and_exact_on_representable_frames() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["codec", "frames", "--frames", "16", "--dim", "4", "--out", "f.strf"]);
    ok(d, &["codec", "fit", "--input", "f.strf", "--levels", "2", "--codebook", "16", "--out", "a.strc"]);
    ok(d, &["codec", "fit", "--input", "f.strf", "--levels", "2", "--codebook", "16", "--out", "b.strc"]);
    assert_eq!(read(d, "a.strc"), read(d, "b.strc"));
    ok(d, &["codec", "encode", "--codec", "a.strc", "--input", "f.strf", "--out", "g1.strm"]);
    ok(d, &["codec", "encode", "--codec", "a.strc", "--input", "f.strf", "--out", "g2.strm"]);
    assert_eq!(read(d, "g1.strm"), read(d, "g2.strm"));
    let out = ok(d, &["codec", "decode", "--codec", "a.strc", "--input", "g1.strm", "--reference", "f.strf", "--out", "r.strf"]);
    assert!(out.contains("rms error: 0\n"), "{out}");

    let fit = ["codec", "fit", "--levels", "4", "--codebook", "64", "--seed", "7", "--out"];
    ok(d, &[&fit[..], &["c1.strc"]].concat());
    ok(d, &[&fit[..], &["c2.strc"]].concat());
    assert_eq!(read(d, "c1.strc"), read(d, "c2.strc"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["--version"]), 0);
    assert_eq!(code(d, &["no-such-command"]), 1);
    assert_eq!(code(d, &["task", "gen", "--out", "x"]), 1);
    assert_eq!(code(d, &["sample", "--model", "m", "--out", "o"]), 1);
    assert_eq!(code(d, &["codec", "fit", "--frames", "10", "--codebook", "64", "--out", "c.strc"]), 2);
    assert_eq!(code(d, &["train", "--data", "missing", "--out", "run"]), 2);
    std::fs::write(d.join("bad.json"), "{\"model\": {\"unknown\": 1}}").unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "task", "gen", "--count", "1", "--out", "x"]), 2);
    std::fs::write(d.join("junk.strw"), b"STRW\x01junk").unwrap();
    ok(d, &["task", "gen", "--count", "2", "--out", "ds"]);
    assert_eq!(code(d, &["sample", "--model", "junk.strw", "--data", "ds", "--out", "o"]), 2);
}

#[test]
fn task_gen_is_deterministic_across_workers() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "7", "task", "gen", "--count", "25", "--out", "a"]);
    ok(d, &["--seed", "7", "task", "gen", "--count", "25", "--out", "b", "--workers", "4"]);
    for f in ["manifest.json", "data.bin"] {
        assert_eq!(read(&d.join("a"), f), read(&d.join("b"), f), "{f}");
    }
    let (manifest, data) = read_dataset(d.join("a")).unwrap();
    assert_eq!(manifest.count, 25);
    assert_eq!(data.len(), 25);
    assert_eq!(manifest.extra["run"]["seed"], 7);

    let out = Command::new(env!("CARGO_BIN_EXE_stormdec"))
        .current_dir(d)
        .env("STORMDEC_SEED", "7")
        .args(["task", "gen", "--count", "25", "--out", "c"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&d.join("a"), "data.bin"), read(&d.join("c"), "data.bin"));

    ok(d, &["--seed", "8", "task", "gen", "--count", "25", "--out", "e"]);
    assert_ne!(read(&d.join("a"), "data.bin"), read(&d.join("e"), "data.bin"));
}

#[test]
fn config_file_sets_task_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.json"), r#"{"task": {"frames": 12, "levels": 2, "noise": 0.0}}"#).unwrap();
    let out = ok(d, &["--config", "run.json", "task", "gen", "--count", "5", "--levels", "4", "--eval", "--out", "ds"]);
    assert_eq!(out.matches("exact-match 1.0000").count(), 4, "{out}");
    let (manifest, data) = read_dataset(d.join("ds")).unwrap();
    assert_eq!((manifest.task.frames, manifest.task.levels), (12, 4));
    assert_eq!(data[0].grid.dims(), (12, 4, 16));
    assert_eq!(manifest.extra["run"]["config"]["task"]["levels"], 4);
    assert!(manifest.extra["eval"]["levels"].is_array());
}

#[test]
fn resume_reproduces_the_loss_trajectory() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    for f in ["ckpt-3.strw", "ckpt-6.strw", "model.strw", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(d, &["train", "--data", "ds", "--out", "resumed", "--steps", "6", "--resume", "run/ckpt-3.strw"]);
    let full = String::from_utf8(read(&d.join("run"), "loss.log")).unwrap();
    let tail = String::from_utf8(read(&d.join("resumed"), "loss.log")).unwrap();
    let full: Vec<&str> = full.lines().collect();
    assert_eq!(full.len(), 6);
    let first: f64 = full[0].strip_prefix("0 ").unwrap().parse().unwrap();
    assert!((first - 16f64.ln()).abs() < 1e-5, "step-0 loss {first}");
    assert_eq!(tail.lines().collect::<Vec<_>>(), full[3..]);
    assert_eq!(read(&d.join("run"), "model.strw"), read(&d.join("resumed"), "model.strw"));
}

#[test]
fn sampling_counts_passes_keeps_prompt_and_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    let base = ["sample", "--model", "run/model.strw", "--data", "ds", "--index", "2", "--schedule", "16,1,1"];
    let mut a = base.to_vec();
    a.extend(["--prompt-frames", "5", "--out", "a.strm", "--trace", "a.trace"]);
    let out = ok(d, &a);
    assert!(out.contains("forward passes: 18"), "{out}");
    let grid = TokenGrid::load(d.join("a.strm")).unwrap();
    let (_, data) = read_dataset(d.join("ds")).unwrap();
    assert_eq!(grid.prefix(5).unwrap(), data[2].grid.prefix(5).unwrap());
    let trace = parse_trace(&String::from_utf8(read(d, "a.trace")).unwrap()).unwrap();
    let schedule: DecodeSchedule = "16,1,1".parse().unwrap();
    verify_trace(&grid, &trace, &schedule, Some(&data[2].grid.prefix(5).unwrap())).unwrap();
    let sidecar: serde_json::Value = serde_json::from_slice(&read(d, "a.strm.json")).unwrap();
    assert_eq!(sidecar["forward_passes"], 18);
    assert_eq!(sidecar["prompt_frames"], 5);
    assert_eq!(sidecar["run"]["config"]["schedule"], serde_json::json!([16, 1, 1]));

    let mut b = base.to_vec();
    b.extend(["--prompt-frames", "5", "--out", "b.strm"]);
    ok(d, &b);
    assert_eq!(read(d, "a.strm"), read(d, "b.strm"));

    TokenGrid::save(&data[0].grid.prefix(7).unwrap(), d.join("p.strm")).unwrap();
    let mut p = base.to_vec();
    p.extend(["--prompt", "p.strm", "--out", "p_out.strm"]);
    ok(d, &p);
    let with_prompt = TokenGrid::load(d.join("p_out.strm")).unwrap();
    assert_eq!(with_prompt.prefix(7).unwrap(), data[0].grid.prefix(7).unwrap());

    let mut g = base.to_vec();
    g.extend(["--decoder", "greedy", "--out", "g.strm"]);
    assert!(ok(d, &g).contains("forward passes: 3"));
    let mut bad = base.to_vec();
    bad.extend(["--decoder", "ar", "--out", "x.strm"]);
    assert_eq!(code(d, &bad), 1);
}

#[test]
fn autoregressive_baseline_trains_and_samples() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["task", "gen", "--count", "10", "--frames", "8", "--out", "ds"]);
    let mut args = vec!["train", "--data", "ds", "--out", "ar", "--steps", "2", "--flattened-ar"];
    args.extend(SMALL_MODEL);
    ok(d, &args);
    let out = ok(d, &["sample", "--model", "ar/model.strw", "--data", "ds", "--out", "s.strm", "--window-chunk", "4", "--window-overlap", "1"]);
    assert!(out.contains("forward passes: 24"), "{out}");
    assert_eq!(TokenGrid::load(d.join("s.strm")).unwrap().dims(), (8, 3, 16));
}

#[test]
fn runtime_bench_writes_parsable_reports() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut args = vec!["bench", "runtime", "--lengths", "4,8", "--repetitions", "3", "--levels", "2", "--out", "b"];
    args.extend(SMALL_MODEL);
    ok(d, &args);
    let points = parse_csv(&String::from_utf8(read(&d.join("b"), "runtime.csv")).unwrap()).unwrap();
    assert_eq!(points.len(), 2 * 3 * 3);
    let passes = |series: &str, x: f64| {
        points.iter().find(|p| p.1 == format!("{series}:forward_passes") && p.0 == x).unwrap().2
    };
    assert_eq!(passes("parallel[16-1]", 4.0), 17.0);
    assert_eq!(passes("level_greedy", 8.0), 2.0);
    assert_eq!(passes("flattened_ar", 8.0), 16.0);
    let json: serde_json::Value = serde_json::from_slice(&read(&d.join("b"), "runtime.json")).unwrap();
    assert_eq!(json["report"]["rows"].as_array().unwrap().len(), 6);
    assert_eq!(json["run"]["config"]["model"]["model_dim"], 32);
    assert!(d.join("b/runtime.txt").exists());
}

#[test]
fn ablation_bench_reports_each_iteration_count() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    ok(d, &["bench", "ablation", "--model", "run/model.strw", "--data", "ds", "--iterations", "1,4", "--limit", "6", "--out", "abl"]);
    let points = parse_csv(&String::from_utf8(read(&d.join("abl"), "ablation.csv")).unwrap()).unwrap();
    let passes: Vec<f64> = points.iter().filter(|p| p.1 == "forward_passes").map(|p| p.2).collect();
    assert_eq!(passes, [3.0, 6.0]);
    let json: serde_json::Value = serde_json::from_slice(&read(&d.join("abl"), "ablation.json")).unwrap();
    assert_eq!(json["report"]["samples"], 6);
}

/// The default noisy task trained through the CLI for 5k steps with the
/// compact trunk used by the acceptance suite (about 90 s on one core).
#[test]
fn default_task_training_approaches_the_entropy_floor() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "100", "task", "gen", "--count", "2000", "--out", "ds"]);
    let args = [
        "train", "--data", "ds", "--out", "run", "--steps", "5000", "--batch-size", "16", "--checkpoint-every", "5000",
        "--model-dim", "64", "--ff-dim", "128",
    ];
    ok(d, &args);
    let log = String::from_utf8(read(&d.join("run"), "loss.log")).unwrap();
    let losses: Vec<f64> = log.lines().map(|l| l.split(' ').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 5000);
    let tail = &losses[losses.len() - 200..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.35, "mean loss over the last 200 steps {mean}");
}
