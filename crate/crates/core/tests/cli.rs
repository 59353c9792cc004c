mod common;

use std::path::Path;
use std::process::Command;

use headshift::cli::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_headshift"))
}

fn ok(args: &[&str]) {
    let mut argv = vec!["headshift"];
    argv.extend_from_slice(args);
    run(argv.clone()).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_small_world(dir: &Path, seed: u64) -> std::path::PathBuf {
    let mut w = common::small_world();
    w.model.seed = seed;
    w.seed = seed;
    let path = dir.join(format!("world{seed}.json"));
    std::fs::write(&path, serde_json::to_string(&w).unwrap()).unwrap();
    path
}

/// Runs the binary and returns (exit code, stderr).
fn status(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn error_kind(stderr: &str) -> String {
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn pipeline_equals_the_individual_commands() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = dir.path().join("pipe");
    ok(&["pipeline", "--out", s(&pipe), "--seed", "3", "--b", "40"]);

    let d = dir.path().join("steps");
    std::fs::create_dir_all(&d).unwrap();
    let p = |n: &str| d.join(n);
    ok(&["gen-model", "--out", s(&p("model")), "--seed", "3"]);
    ok(&["gen-data", "--model", s(&p("model")), "--out", s(&p("data.jsonl")), "--b", "40"]);
    ok(&["record", "--model", s(&p("model")), "--data", s(&p("data.jsonl")), "--out", s(&p("taps.bin"))]);
    ok(&["probe", "--taps", s(&p("taps.bin")), "--out", s(&p("probes.json")), "--seed", "3"]);
    ok(&[
        "sweep", "--model", s(&p("model")), "--data", s(&p("data.jsonl")), "--taps", s(&p("taps.bin")),
        "--probes", s(&p("probes.json")), "--out", s(&p("sweep.json")), "--seed", "3",
    ]);
    let sweep: serde_json::Value = serde_json::from_slice(&std::fs::read(p("sweep.json")).unwrap()).unwrap();
    let alpha = sweep["payload"]["alpha_star"].to_string();
    let k = sweep["payload"]["k_star"].to_string();
    ok(&["select-heads", "--probes", s(&p("probes.json")), "--k", &k, "--out", s(&p("headset.json"))]);
    ok(&["estimate-shift", "--taps", s(&p("taps.bin")), "--out", s(&p("shifts.bin"))]);
    ok(&[
        "intervene", "--headset", s(&p("headset.json")), "--shifts", s(&p("shifts.bin")), "--alpha", &alpha,
        "--out", s(&p("plan.json")),
    ]);
    ok(&[
        "evaluate", "--model", s(&p("model")), "--data", s(&p("data.jsonl")), "--plan", s(&p("plan.json")),
        "--subset", "holdout", "--seed", "3", "--out", s(&p("intervened.json")),
    ]);

    for name in [
        "data.jsonl", "taps.bin", "probes.json", "sweep.json", "headset.json", "shifts.bin", "plan.json",
        "intervened.json", "model/weights.bin", "model/config.json",
    ] {
        let a = std::fs::read(pipe.join(name)).unwrap();
        let b = std::fs::read(d.join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(pipe.join("plan.json.run.json")).unwrap()).unwrap();
    assert!(manifest["inputs"]["headset"].is_string());
    assert!(manifest["outputs"]["plan.json"].is_string());
    assert!(manifest["timestamp"].is_null());
    for extra in ["summary.json", "baseline.json", "heatmap.csv", "heatmap.svg"] {
        assert!(pipe.join(extra).exists(), "{extra}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let (code, err) = status(&["gen-model", "--bogus"]);
    assert_eq!(code, 2);
    assert_eq!(error_kind(&err), "usage");
    let (code, _) = status(&["select-heads"]);
    assert_eq!(code, 2);
    let (code, _) = status(&["--threads", "0", "analyze", "heatmap", "--probes", "x", "--out", "y"]);
    assert_eq!(code, 2);
    assert_eq!(status(&["--help"]).0, 0);
}

#[test]
fn format_and_provenance_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w0 = write_small_world(d, 0);
    let w1 = write_small_world(d, 1);
    ok(&["gen-model", "--world", s(&w0), "--out", s(&d.join("m0"))]);
    ok(&["gen-model", "--world", s(&w1), "--out", s(&d.join("m1"))]);
    ok(&["gen-data", "--model", s(&d.join("m0")), "--out", s(&d.join("data.jsonl")), "--b", "20"]);

    // Dataset made for m0, evaluated against m1.
    let (code, err) = status(&[
        "evaluate", "--model", s(&d.join("m1")), "--data", s(&d.join("data.jsonl")), "--out", s(&d.join("r.json")),
    ]);
    assert_eq!(code, 4, "{err}");
    assert_eq!(error_kind(&err), "provenance");

    // Evaluation without a plan works and reports both languages.
    ok(&[
        "evaluate", "--model", s(&d.join("m0")), "--data", s(&d.join("data.jsonl")), "--out", s(&d.join("r.csv")),
        "--format", "csv",
    ]);
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40);

    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    let (code, err) = status(&["select-heads", "--probes", s(&d.join("bad.json")), "--k", "2", "--out", s(&d.join("h.json"))]);
    assert_eq!(code, 3);
    assert_eq!(error_kind(&err), "format");

    ok(&["record", "--model", s(&d.join("m0")), "--data", s(&d.join("data.jsonl")), "--out", s(&d.join("t0.bin"))]);
    let bytes = std::fs::read(d.join("t0.bin")).unwrap();
    std::fs::write(d.join("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let (code, _) = status(&["probe", "--taps", s(&d.join("cut.bin")), "--out", s(&d.join("p.json"))]);
    assert_eq!(code, 3);

    // Taps from m0 with a model m1 dataset in a sweep.
    ok(&["gen-data", "--model", s(&d.join("m1")), "--out", s(&d.join("data1.jsonl")), "--b", "20"]);
    ok(&["probe", "--taps", s(&d.join("t0.bin")), "--out", s(&d.join("p0.json"))]);
    let (code, err) = status(&[
        "sweep", "--model", s(&d.join("m1")), "--data", s(&d.join("data1.jsonl")), "--taps", s(&d.join("t0.bin")),
        "--probes", s(&d.join("p0.json")), "--out", s(&d.join("sw.json")),
    ]);
    assert_eq!(code, 4, "{err}");
}

#[test]
fn multi_with_one_target_writes_the_specific_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w0 = write_small_world(d, 0);
    ok(&["gen-model", "--world", s(&w0), "--out", s(&d.join("m"))]);
    ok(&["gen-data", "--model", s(&d.join("m")), "--out", s(&d.join("data.jsonl")), "--b", "10"]);
    ok(&["record", "--model", s(&d.join("m")), "--data", s(&d.join("data.jsonl")), "--out", s(&d.join("t.bin"))]);
    ok(&["estimate-shift", "--taps", s(&d.join("t.bin")), "--out", s(&d.join("specific.bin"))]);
    ok(&["estimate-shift", "--taps", s(&d.join("t.bin")), "--mode", "multi", "--out", s(&d.join("multi.bin"))]);
    assert_eq!(std::fs::read(d.join("specific.bin")).unwrap(), std::fs::read(d.join("multi.bin")).unwrap());
}
