//! End-to-end tests of the `gridvid` binary: every subcommand, the
//! deterministic-generation guarantee, and the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::Command;

use gridvid_core::corpus::{self, Video};
use gridvid_core::io::gvf;

const PROMPT: &str = "a red square moving right at speed 1 on a black background from (4, 7)";

const TINY_CONFIG: &str = "\
frame_size = 14
base_channels = 4
embed_dim = 8
train_steps = 2
batch_size = 2
steps_key = 3
steps_interp = 3
seed = 9
";

fn gridvid(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gridvid"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = gridvid(dir, args);
    assert!(
        out.status.success(),
        "gridvid {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn run_fail(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = gridvid(dir, args);
    assert!(!out.status.success(), "gridvid {args:?} unexpectedly passed");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Parses a two-line metrics CSV into (header, fields).
fn read_csv_row(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).expect("csv exists");
    let mut lines = text.lines();
    let header = lines.next().expect("header").to_owned();
    let row = lines
        .next()
        .expect("data row")
        .split(',')
        .map(str::to_owned)
        .collect();
    (header, row)
}

#[test]
fn plan_prints_the_full_default_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(dir.path(), &["plan", "--frames", "28"]);
    let plan: serde_json::Value = serde_json::from_str(&stdout).expect("plan is JSON");

    assert_eq!(plan["requested_frames"], 28);
    assert_eq!(plan["generated_frames"], 28);
    let segments = plan["segments"].as_array().unwrap();
    assert_eq!(segments.len(), 1);
    assert_eq!(
        segments[0]["key_indices"],
        serde_json::json!([0, 9, 18, 27])
    );
    let steps = segments[0]["steps"].as_array().unwrap();
    let by_level = |l: u64| steps.iter().filter(|s| s["level"] == l).count();
    assert_eq!(by_level(1), 3);
    assert_eq!(by_level(2), 9);
    assert_eq!(steps.len(), 12);
}

#[test]
fn evaluate_covers_every_metric_and_self_fvd_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    run_ok(
        dir,
        &[
            "corpus", "build", "--scenes", "4", "--frames", "16", "--seed", "1", "--frame-size",
            "24", "--out", "setA",
        ],
    );

    run_ok(
        dir,
        &["evaluate", "--metric", "fvd", "--a", "setA", "--b", "setA", "--out", "fvd.csv"],
    );
    let (header, row) = read_csv_row(&dir.join("fvd.csv"));
    assert_eq!(header, "metric,value,n_a,n_b,extractor");
    assert_eq!(row[0], "fvd");
    assert!(row[1].parse::<f64>().unwrap().abs() < 1e-7);
    assert_eq!(&row[2..], ["4", "4", "signature-v1"]);

    run_ok(
        dir,
        &["evaluate", "--metric", "clipsim", "--a", "setA", "--out", "clip.csv"],
    );
    let (_, row) = read_csv_row(&dir.join("clip.csv"));
    let clipsim: f64 = row[1].parse().unwrap();
    assert!(clipsim > 0.5 && clipsim <= 1.0, "clipsim = {clipsim}");
    assert_eq!(row[3], "0");

    run_ok(
        dir,
        &["evaluate", "--metric", "is", "--a", "setA", "--out", "is.csv"],
    );
    let (_, row) = read_csv_row(&dir.join("is.csv"));
    assert!(row[1].parse::<f64>().unwrap() >= 1.0 - 1e-9);
    assert_eq!(row[4], "grammar-v1");

    run_ok(
        dir,
        &[
            "evaluate", "--metric", "bfvd", "--a", "setA", "--b", "setA", "--block-len", "8",
            "--out", "bfvd.csv",
        ],
    );
    let (_, row) = read_csv_row(&dir.join("bfvd.csv"));
    assert!(row[1].parse::<f64>().unwrap().abs() < 1e-7);

    // fvd and bfvd require a second set at argument-parse time.
    let (code, _) = run_fail(dir, &["evaluate", "--metric", "fvd", "--a", "setA", "--out", "x.csv"]);
    assert_eq!(code, 2);
}

#[test]
fn memprobe_reports_constant_residency_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    run_ok(dir, &["memprobe", "--frames", "28,112", "--out", "mem.csv"]);
    let text = fs::read_to_string(dir.join("mem.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], rows[1][1], "peak frames must not grow with length");
    assert_eq!(rows[0][2], rows[1][2], "peak bytes must not grow with length");

    run_ok(dir, &["plot", "--in", "mem.csv", "--out", "mem.svg"]);
    let svg = fs::read_to_string(dir.join("mem.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("<polyline"));
    assert!(svg.trim_end().ends_with("</svg>"));

    // A metrics CSV has a word in the first column: bar chart.
    fs::write(dir.join("m.csv"), "metric,value\nfvd,3.5\nis,1.25\n").unwrap();
    run_ok(dir, &["plot", "--in", "m.csv", "--out", "m.svg"]);
    let svg = fs::read_to_string(dir.join("m.svg")).unwrap();
    assert!(svg.matches("<rect").count() >= 3, "background plus one bar per row");
}

#[test]
fn train_generate_interp_only_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    fs::write(dir.join("tiny.cfg"), TINY_CONFIG).unwrap();
    run_ok(
        dir,
        &[
            "corpus", "build", "--scenes", "6", "--frames", "28", "--seed", "3", "--frame-size",
            "14", "--out", "data",
        ],
    );

    for role in ["key", "interp1", "interp2"] {
        let ckpt = format!("ck/{role}.gvck");
        let stdout = run_ok(
            dir,
            &[
                "train", "--role", role, "--data", "data", "--config", "tiny.cfg", "--out", &ckpt,
            ],
        );
        assert!(stdout.contains("2 steps"), "train output: {stdout}");
        assert!(dir.join(&ckpt).exists());
    }

    let generate = |out: &str, manifest: Option<&str>| {
        let mut args = vec![
            "generate", "--prompt", PROMPT, "--frames", "28", "--ckpt-dir", "ck", "--seed", "5",
            "--config", "tiny.cfg", "--out", out,
        ];
        if let Some(m) = manifest {
            args.extend(["--manifest", m]);
        }
        run_ok(dir, &args);
    };
    generate("v1.gvf", Some("m1.json"));
    generate("v2.gvf", None);
    assert_eq!(
        fs::read(dir.join("v1.gvf")).unwrap(),
        fs::read(dir.join("v2.gvf")).unwrap(),
        "same seed, same bytes"
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("m1.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["n_frames"], 28);
    assert_eq!(manifest["memory"]["peak_resident_frames"], 22);
    let mut calls = std::collections::BTreeMap::new();
    for inv in manifest["invocations"].as_array().unwrap() {
        *calls.entry(inv["role"].as_str().unwrap().to_owned()).or_insert(0) += 1;
    }
    assert_eq!(calls["key"], 1);
    assert_eq!(calls["interp1"], 3);
    assert_eq!(calls["interp2"], 9);

    // interp-only: supply ground-truth key frames and densify one segment.
    let scene = corpus::parse_prompt(PROMPT).unwrap().into_scene(14).unwrap();
    let keys: Vec<_> = [0u64, 9, 18, 27]
        .iter()
        .map(|&t| corpus::render(&scene, t))
        .collect();
    let key_video = Video::new(keys, PROMPT.to_owned()).unwrap();
    gvf::write_gvf(&key_video, &dir.join("key.gvf")).unwrap();
    run_ok(
        dir,
        &[
            "interp-only", "--keygrid", "key.gvf", "--prompt", PROMPT, "--ckpt-dir", "ck",
            "--config", "tiny.cfg", "--out", "interp.gvf", "--manifest", "mi.json",
        ],
    );
    let interp = gvf::read_gvf(&dir.join("interp.gvf")).unwrap();
    assert_eq!(interp.frames().len(), 28);
    // Key frames pass through generation untouched (quantization is stable).
    let key_read = gvf::read_gvf(&dir.join("key.gvf")).unwrap();
    for (cell, &t) in [0usize, 9, 18, 27].iter().enumerate() {
        assert_eq!(&interp.frames()[t], &key_read.frames()[cell]);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("mi.json")).unwrap()).unwrap();
    let roles: Vec<&str> = manifest["invocations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["role"].as_str().unwrap())
        .collect();
    assert!(!roles.contains(&"key"), "no key-grid sampling in interp-only");
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    fs::write(dir.join("tiny.cfg"), TINY_CONFIG).unwrap();
    fs::write(dir.join("bad.cfg"), "bogus = 1\n").unwrap();
    fs::create_dir(dir.join("empty")).unwrap();

    // Missing checkpoints: the pipeline cannot assemble a model set.
    let (code, stderr) = run_fail(
        dir,
        &[
            "generate", "--prompt", PROMPT, "--frames", "28", "--ckpt-dir", "nope", "--out",
            "x.gvf",
        ],
    );
    assert_eq!(code, 6, "stderr: {stderr}");
    assert!(stderr.contains("class=pipeline"), "stderr: {stderr}");

    // Unknown config key.
    let (code, stderr) = run_fail(
        dir,
        &[
            "train", "--role", "key", "--data", "empty", "--config", "bad.cfg", "--out", "x.gvck",
        ],
    );
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(stderr.contains("class=config"), "stderr: {stderr}");

    // Missing dataset index.
    let (code, stderr) = run_fail(
        dir,
        &[
            "train", "--role", "key", "--data", "empty", "--config", "tiny.cfg", "--out", "x.gvck",
        ],
    );
    assert_eq!(code, 4, "stderr: {stderr}");
    assert!(stderr.contains("class=data"), "stderr: {stderr}");

    // A directory with no clips at all is a plain runtime error.
    let (code, stderr) = run_fail(
        dir,
        &["evaluate", "--metric", "clipsim", "--a", "empty", "--out", "x.csv"],
    );
    assert_eq!(code, 1, "stderr: {stderr}");
    assert!(stderr.contains("class=runtime"), "stderr: {stderr}");

    // Schedule parameters that violate the grid shape die at parse time.
    let (code, _) = run_fail(dir, &["plan", "--frames", "28", "--params", "5,2"]);
    assert_eq!(code, 2);
}
