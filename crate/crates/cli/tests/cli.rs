use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamrecon")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

#[test]
fn equivalence_passes_at_default_tolerance() {
    let out = run(&["equivalence", "--frames", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], Value::Bool(true));
}

#[test]
fn equivalence_fails_when_tolerance_is_exceeded() {
    let out = run(&["equivalence", "--frames", "3", "--tolerance=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "tolerance");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["masks", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn invalid_override_is_reported_as_config_error() {
    for set in ["model.n_heads=3", "train.nonexistent=1", "stream.window=0"] {
        let out = run(&["--set", set, "masks", "--frames", "2", "--patches", "1"]);
        assert_eq!(out.status.code(), Some(1), "{set}");
        let err = stderr_json(&out);
        assert_eq!(err["error"], "config", "{set}: {err}");
        assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn masks_write_grid_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("m");
    let out = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "seed=7",
        "masks",
        "--frames",
        "2",
        "--patches",
        "1",
        "--kind",
        "grouped",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = fs::read_to_string(out_dir.join("mask.txt")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows, ["1 1 0 0", "1 1 0 0", "1 1 1 1", "1 1 1 1"]);
    let run_cfg: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_cfg["seed"], 7);
}

#[test]
fn generated_scene_feeds_stream_demo() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let demo = dir.path().join("demo");
    let out = run(&["--out", scene.to_str().unwrap(), "--set", "scene.frames=6", "gen-scene"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tokens = scene.join("tokens");
    let out = run(&["--out", demo.to_str().unwrap(), "stream-demo", "--input", tokens.to_str().unwrap(), "--window", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(demo.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 7);
    assert!(traj.starts_with("frame,qw,qx,qy,qz,tx,ty,tz,fx,fy"));
    assert!(demo.join("preds").join("frame_0005.json").exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let out = run(&["eval-traj", "--est", "/nonexistent/a.txt", "--gt", "/nonexistent/b.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"].is_string());
}
