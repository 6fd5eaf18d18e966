use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crowdflow::cli::{run_cli, ResultRecord};
use crowdflow::io::{
    load_sequence, read_count_table, ANNOTATIONS_FILE, FEATURES_FILE, MANIFEST_FILE,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["crowdflow"];
    argv.extend_from_slice(args);
    let code = run_cli(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_reproduces_benchmark_rows() {
    let gt = fixture("benchmark_gt.csv");
    let (code, out, _) = run(&[
        "eval",
        "--predictions",
        s(&fixture("benchmark_preds.csv")),
        "--ground-truth",
        s(&gt),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("mae 141.1\n"), "{out}");
    assert!(out.contains("mse 192.3\n"), "{out}");

    let (code, out, _) = run(&[
        "eval",
        "--predictions",
        s(&fixture("benchmark_tracker_preds.csv")),
        "--ground-truth",
        s(&gt),
    ]);
    assert_eq!(code, 0);
    assert!(
        out.contains("mae 256.2\n") && out.contains("mse 300.8\n"),
        "{out}"
    );
}

#[test]
fn eval_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let summary = dir.path().join("summary.csv");
    let (code, _, err) = run(&[
        "eval",
        "--predictions",
        s(&fixture("benchmark_preds.csv")),
        "--ground-truth",
        s(&fixture("benchmark_gt.csv")),
        "--out",
        s(&report),
        "--summary-csv",
        s(&summary),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((v["mae"].as_f64().unwrap() - 141.14).abs() < 1e-9);
    assert_eq!(v["videos"].as_array().unwrap().len(), 5);
    assert!(fs::read_to_string(&summary)
        .unwrap()
        .starts_with("mae,mse,wrae,mrae,miae,moae\n"));
    assert!(dir.path().join("report.manifest.json").exists());
}

#[test]
fn grad_check_passes_for_seed_7() {
    let (code, out, _) = run(&["grad-check", "--seed", "7"]);
    assert_eq!(code, 0, "{out}");
    let value: f64 = out
        .split_whitespace()
        .nth(3)
        .and_then(|t| t.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output {out:?}"));
    assert!(value < 1e-4, "{out}");
}

#[test]
fn unknown_input_prints_usage_and_fails() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_ne!(code, 0);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, err) = run(&["count", "--no-such-flag"]);
    assert_ne!(code, 0);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = run(&[]);
    assert_ne!(code, 0);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_crowdflow");
    let ok = Command::new(bin)
        .args(["grad-check", "--seed", "7", "--instances", "5"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let bad = Command::new(bin).arg("bogus").output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    let missing = Command::new(bin)
        .args([
            "eval",
            "--predictions",
            "/nonexistent.csv",
            "--ground-truth",
            "/nonexistent.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn closed_scene_count_equals_first_frame() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("closed");
    let cfg = dir.path().join("closed.cfg");
    fs::write(&cfg, "speed_range = 0.0, 0.05\njitter_std = 0.1\n").unwrap();
    let (code, _, err) = run(&[
        "simulate",
        "--out",
        s(&scene),
        "--config",
        s(&cfg),
        "--duration",
        "120",
        "--initial-count",
        "12",
        "--entry-rate",
        "0",
        "--separability",
        "1",
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0, "{err}");
    for f in [ANNOTATIONS_FILE, FEATURES_FILE, MANIFEST_FILE] {
        assert!(scene.join(f).exists(), "{f}");
    }
    let seq = load_sequence(&scene).unwrap();
    let n0 = seq.frames[0].len();
    assert_eq!(seq.distinct_identities(), n0);

    let out = dir.path().join("result.json");
    let (code, _, err) = run(&[
        "count",
        "--input",
        s(&scene),
        "--tau",
        "3",
        "--mode",
        "gt-descriptors",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let r: ResultRecord = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.n0, n0 as f64);
    assert_eq!(r.tau, 30);
    assert!((r.total - n0 as f64).abs() < 0.5, "total {}", r.total);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["video_id", "n0", "pairs", "total"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["t0", "t1", "inflow", "outflow", "violation"] {
        assert!(v["pairs"][0].get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("result.manifest.json").exists());
}

#[test]
fn outputs_are_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut produced = Vec::new();
    for k in 0..2 {
        let root = dir.path().join(format!("run{k}"));
        let scene = root.join("scene");
        let model = root.join("model.json");
        let trace = root.join("trace.csv");
        let result = root.join("result.json");
        let sweep = root.join("sweep.csv");
        let sim = [
            "simulate",
            "--out",
            s(&scene),
            "--duration",
            "100",
            "--initial-count",
            "8",
            "--seed",
            "3",
        ];
        assert_eq!(run(&sim).0, 0);
        let train = [
            "train",
            "--input",
            s(&scene),
            "--out",
            s(&model),
            "--trace",
            s(&trace),
            "--descriptor-dim",
            "32",
            "--epochs",
            "1",
            "--pairs-per-video",
            "8",
            "--interval-min",
            "5",
            "--interval-max",
            "20",
            "--seed",
            "2",
        ];
        let (code, _, err) = run(&train);
        assert_eq!(code, 0, "{err}");
        let count = [
            "count",
            "--input",
            s(&scene),
            "--model",
            s(&model),
            "--tau-frames",
            "10",
            "--out",
            s(&result),
        ];
        assert_eq!(run(&count).0, 0);
        let sw = [
            "sweep-interval",
            "--input",
            s(&scene),
            "--model",
            s(&model),
            "--taus",
            "5,10,20",
            "--out",
            s(&sweep),
        ];
        assert_eq!(run(&sw).0, 0);
        produced.push(root);
    }
    for rel in [
        "scene/annotations.csv",
        "scene/features.bin",
        "scene/identities.json",
        "scene/manifest.json",
        "model.json",
        "model.manifest.json",
        "trace.csv",
        "result.json",
        "result.manifest.json",
        "sweep.csv",
    ] {
        let a = fs::read(produced[0].join(rel)).unwrap();
        let b = fs::read(produced[1].join(rel)).unwrap();
        if rel.ends_with("manifest.json") {
            // Manifests echo their own output paths, which differ per run.
            let strip = |bytes: &[u8]| {
                String::from_utf8_lossy(bytes)
                    .replace("run0", "runX")
                    .replace("run1", "runX")
            };
            assert_eq!(strip(&a), strip(&b), "{rel}");
        } else {
            assert_eq!(a, b, "{rel}");
        }
    }
    let sweep = fs::read_to_string(produced[0].join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("tau,mae,mse,wrae\n"));
    assert_eq!(sweep.lines().count(), 4);
}

#[test]
fn count_results_feed_eval_with_flow_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("scenes");
    assert_eq!(
        run(&[
            "simulate",
            "--out",
            s(&root),
            "--videos",
            "2",
            "--duration",
            "90",
            "--seed",
            "11"
        ])
        .0,
        0
    );
    let inputs = [root.join("video-000"), root.join("video-001")];
    let result = dir.path().join("results.json");
    let (code, _, err) = run(&[
        "count",
        "--input",
        s(&inputs[0]),
        s(&inputs[1]),
        "--mode",
        "gt-descriptors",
        "--association",
        "oracle",
        "--tau-frames",
        "15",
        "--out",
        s(&result),
    ]);
    assert_eq!(code, 0, "{err}");

    let records: Vec<ResultRecord> =
        serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    let gt_path = dir.path().join("gt.csv");
    let mut gt = String::from("video_id,count,frames\n");
    for (rec, input) in records.iter().zip(&inputs) {
        let seq = load_sequence(input).unwrap();
        gt.push_str(&format!(
            "{},{},{}\n",
            rec.video_id,
            seq.distinct_sampled_identities(15).unwrap(),
            seq.duration()
        ));
    }
    fs::write(&gt_path, gt).unwrap();
    assert_eq!(read_count_table(&gt_path).unwrap().len(), 2);

    let (code, out, err) = run(&[
        "eval",
        "--predictions",
        s(&result),
        "--ground-truth",
        s(&gt_path),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("mae 0.0\n"), "{out}");
    assert!(
        out.contains("miae 0.000\n") && out.contains("moae 0.000\n"),
        "{out}"
    );
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let cfg = dir.path().join("scene.cfg");
    fs::write(
        &cfg,
        "duration = 40\ninitial_count = 4\nspeed_range = 0.5, 1.0\n",
    )
    .unwrap();
    assert_eq!(
        run(&[
            "simulate",
            "--out",
            s(&scene),
            "--config",
            s(&cfg),
            "--duration",
            "25"
        ])
        .0,
        0
    );
    let seq = load_sequence(&scene).unwrap();
    assert_eq!(seq.duration(), 25);
    assert_eq!(seq.frames[0].len(), 4);
    assert_eq!(seq.config.speed_range, (0.5, 1.0));

    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let (code, _, err) = run(&["simulate", "--out", s(&scene), "--config", s(&cfg)]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such_key"), "{err}");
}

#[test]
fn trained_mode_requires_model() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert_eq!(
        run(&["simulate", "--out", s(&scene), "--duration", "20"]).0,
        0
    );
    let (code, _, err) = run(&[
        "count",
        "--input",
        s(&scene),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("--model"), "{err}");
}
