//! End-to-end tests of the `planeslam` binary: exit codes, output formats,
//! and the run determinism contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planeslam"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("planeslam-cli-{}-{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn write_small_config(dir: &Path, frames: usize, seed: u64) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(
        &path,
        format!(
            "[trajectory]\nframes = {frames}\n\n[run]\nseed = {seed}\n\n[noise]\ndepth_sigma = 0.003\npixel_sigma = 0.5\n\n[odometry]\nmode = \"gt-noise\"\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn evaluate_identical_trajectories_prints_zero() {
    let dir = workdir("eval");
    let traj = dir.join("traj.txt");
    fs::write(
        &traj,
        "# test\n0.000000 0.0 0.0 0.0 0.0 0.0 0.0 1.0\n0.100000 0.1 0.0 0.0 0.0 0.0 0.0 1.0\n",
    )
    .unwrap();
    let output = bin().arg("evaluate").arg(&traj).arg(&traj).output().unwrap();
    assert!(output.status.success(), "{output:?}");
    assert!(stdout(&output).contains("rmse 0.000000"), "{}", stdout(&output));
}

#[test]
fn evaluate_missing_file_is_user_error() {
    let output = bin().arg("evaluate").arg("/nonexistent/a.txt").arg("/nonexistent/b.txt").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let output = bin().arg("run").arg("--frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let output = bin().arg("wat").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn bad_config_is_user_error_naming_the_key() {
    let dir = workdir("badcfg");
    let path = dir.join("bad.toml");
    fs::write(&path, "[association]\nbeta_tt = 0.1\n").unwrap();
    let output = bin().arg("--config").arg(&path).arg("run").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("beta_tt"));
}

#[test]
fn run_twice_with_same_seed_is_byte_identical() {
    let dir = workdir("determinism");
    let config = write_small_config(&dir, 10, 7);
    for sub in ["a", "b"] {
        let output = bin()
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(dir.join(sub))
            .arg("run")
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    }
    for file in ["trajectory.txt", "map.ply", "map.json"] {
        let a = fs::read(dir.join("a").join(file)).unwrap();
        let b = fs::read(dir.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn run_evaluate_round_trip() {
    let dir = workdir("roundtrip");
    let config = write_small_config(&dir, 8, 3);
    let out = dir.join("out");
    let output =
        bin().arg("--config").arg(&config).arg("--out").arg(&out).arg("run").output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let eval = bin()
        .arg("evaluate")
        .arg(out.join("trajectory.txt"))
        .arg(out.join("groundtruth.txt"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    assert!(stdout(&eval).contains("rmse"));
}

#[test]
fn dump_problems_feeds_optimize() {
    let dir = workdir("optimize");
    let config = write_small_config(&dir, 3, 5);
    let out = dir.join("out");
    let run = bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("run")
        .arg("--dump-problems")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let problem = out.join("problems").join("frame_0000.json");
    assert!(problem.exists());
    let log = dir.join("solve.log");
    let output = bin().arg("optimize").arg(&problem).arg("--log").arg(&log).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(stdout(&output).contains("final_cost"));
    assert!(log.exists());
}

#[test]
fn associate_writes_gate_trace() {
    let dir = workdir("trace");
    let config = write_small_config(&dir, 4, 2);
    let trace = dir.join("gates.log");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("associate")
        .arg("--frame")
        .arg("2")
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 0);
    assert!(text.contains("angle="));
    assert!(text.contains("candidate="));
}

#[test]
fn simulate_writes_scene_frames_and_groundtruth() {
    let dir = workdir("simulate");
    let config = write_small_config(&dir, 3, 9);
    let out = dir.join("sim");
    let output = bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("simulate")
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for file in ["scene.json", "frames.json", "groundtruth.txt"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let scene: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("scene.json")).unwrap()).unwrap();
    assert_eq!(scene["planes"].as_array().unwrap().len(), 5);
}

#[test]
fn check_jacobians_reports_all_kinds() {
    let output = bin().arg("check-jacobians").output().unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    for kind in [
        "pose_point",
        "pose_plane",
        "box_plane",
        "point_plane",
        "plane_parallel",
        "plane_perpendicular",
    ] {
        assert!(text.contains(kind), "missing {kind} in:\n{text}");
    }
}
