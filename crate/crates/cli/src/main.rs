//! `planeslam` — run and inspect the planar SLAM back-end on simulated
//! desk scenes.
//!
//! Exit codes: 0 success, 1 user error (arguments, config, input files),
//! 2 internal error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use planeslam_core::config::{OdometryMode, PipelineConfig};
use planeslam_core::factor_graph::{finite_difference_audit, optimize, PoseProblem};
use planeslam_core::Intrinsics64;
use planeslam_core::io::{format_tum_trajectory, read_tum_trajectory};
use planeslam_core::pipeline::{run_pipeline, write_outputs, RunOptions};
use planeslam_core::sim::{evaluate_ate, generate_scene, generate_trajectory, render_frame, SimFrame};

#[derive(Parser, Debug)]
#[command(name = "planeslam", version, about = "Planar SLAM back-end with a synthetic desk-scene benchmark")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Pipeline config (TOML); defaults to the `ambiguous-desk` preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the scene, ground-truth trajectory, and rendered frames.
    Simulate {
        /// Render only this many frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run the full per-frame pipeline and write trajectory/map/report.
    Run {
        /// Also write each frame's built pose problem as JSON.
        #[arg(long)]
        dump_problems: bool,
        /// Odometry source, overriding the config: `gt` or `gt-noise`.
        #[arg(long, value_parser = parse_odometry)]
        odom: Option<OdometryMode>,
    },
    /// Run association up to a frame and report its matches.
    Associate {
        /// Frame index to associate (the map is built from earlier frames).
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Write the per-pair gate trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Solve a serialized pose problem.
    Optimize {
        /// Pose problem JSON with intrinsics (see `run --dump-problems`).
        problem: PathBuf,
        /// Write the per-iteration solver log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM trajectory files.
    Evaluate { estimated: PathBuf, groundtruth: PathBuf },
    /// Audit analytic factor Jacobians against finite differences.
    CheckJacobians,
}

enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn user(message: impl Into<String>) -> Self {
        CliError::User(message.into())
    }
    fn internal(message: impl Into<String>) -> Self {
        CliError::Internal(message.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(message)) => {
            eprintln!("internal error: {message}");
            ExitCode::from(2)
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig, CliError> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| CliError::user(e.to_string()))?,
        None => PipelineConfig::preset("ambiguous-desk").expect("built-in preset"),
    };
    if let Some(seed) = global.seed {
        config.run.seed = seed;
    }
    Ok(config)
}

fn out_dir(global: &GlobalArgs) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { frames } => simulate(&cli.global, *frames),
        Command::Run { dump_problems, odom } => run(&cli.global, *dump_problems, *odom),
        Command::Associate { frame, trace } => associate(&cli.global, *frame, trace.as_deref()),
        Command::Optimize { problem, log } => run_optimize(problem, log.as_deref()),
        Command::Evaluate { estimated, groundtruth } => evaluate(estimated, groundtruth),
        Command::CheckJacobians => check_jacobians(),
    }
}

fn simulate(global: &GlobalArgs, frames: Option<usize>) -> Result<(), CliError> {
    let mut config = load_config(global)?;
    if let Some(n) = frames {
        config.trajectory.frames = n;
    }
    config.validate().map_err(|e| CliError::user(e.to_string()))?;
    let dir = out_dir(global);
    fs::create_dir_all(&dir).map_err(|e| CliError::internal(e.to_string()))?;

    let mut scene_spec = config.scene.resolve().map_err(|e| CliError::user(e.to_string()))?;
    scene_spec.rng_seed ^= config.run.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let scene = generate_scene(&scene_spec).map_err(|e| CliError::user(e.to_string()))?;
    let trajectory =
        generate_trajectory(&config.trajectory).map_err(|e| CliError::user(e.to_string()))?;

    let mut rendered: Vec<SimFrame> = Vec::new();
    for (idx, tp) in trajectory.iter().enumerate() {
        match render_frame(
            &scene,
            &tp.t_wc.inverse(),
            tp.timestamp,
            &config.intrinsics,
            &config.noise,
            idx as u64,
            config.run.seed,
        ) {
            Ok(frame) => rendered.push(frame),
            Err(planeslam_core::sim::SimError::NothingVisible) => continue,
            Err(e) => return Err(CliError::internal(e.to_string())),
        }
    }

    let write_json = |name: &str, value: String| -> Result<(), CliError> {
        fs::write(dir.join(name), value).map_err(|e| CliError::internal(e.to_string()))
    };
    write_json(
        "scene.json",
        serde_json::to_string_pretty(&scene).map_err(|e| CliError::internal(e.to_string()))? + "\n",
    )?;
    write_json(
        "frames.json",
        serde_json::to_string(&rendered).map_err(|e| CliError::internal(e.to_string()))? + "\n",
    )?;
    fs::write(dir.join("groundtruth.txt"), format_tum_trajectory(&trajectory))
        .map_err(|e| CliError::internal(e.to_string()))?;
    println!(
        "simulated {} frames ({} planes, {} map points) into {}",
        rendered.len(),
        scene.planes.len(),
        scene.map_points.len(),
        dir.display()
    );
    Ok(())
}

fn parse_odometry(raw: &str) -> Result<OdometryMode, String> {
    match raw {
        "gt" => Ok(OdometryMode::Gt),
        "gt-noise" => Ok(OdometryMode::GtNoise),
        other => Err(format!("unknown odometry mode `{other}` (expected gt or gt-noise)")),
    }
}

fn run(
    global: &GlobalArgs,
    dump_problems: bool,
    odom: Option<OdometryMode>,
) -> Result<(), CliError> {
    let mut config = load_config(global)?;
    if let Some(mode) = odom {
        config.odometry.mode = mode;
    }
    let options = RunOptions { keep_problems: dump_problems, max_frames: None };
    let outcome = run_pipeline(&config, &options).map_err(|e| CliError::user(e.to_string()))?;
    let dir = out_dir(global);
    write_outputs(&outcome, &dir).map_err(|e| CliError::internal(e.to_string()))?;
    if dump_problems {
        let problems_dir = dir.join("problems");
        fs::create_dir_all(&problems_dir).map_err(|e| CliError::internal(e.to_string()))?;
        for (frame_id, problem) in &outcome.problems {
            let file = ProblemFile { intrinsics: config.intrinsics, problem: problem.clone() };
            let text =
                serde_json::to_string(&file).map_err(|e| CliError::internal(e.to_string()))?;
            fs::write(problems_dir.join(format!("frame_{frame_id:04}.json")), text)
                .map_err(|e| CliError::internal(e.to_string()))?;
        }
    }
    let report = &outcome.report;
    println!(
        "frames {} (skipped {}) precision {:.4} recall {:.4} landmarks {} wrong-fusions {}",
        report.frames_run,
        report.frames_skipped.len(),
        report.association_precision,
        report.association_recall,
        report.final_landmarks,
        report.wrongly_fused_landmarks
    );
    println!("ate rmse {:.6} stddev {:.6}", report.ate_rmse, report.ate_stddev);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn associate(global: &GlobalArgs, frame: usize, trace: Option<&Path>) -> Result<(), CliError> {
    let config = load_config(global)?;
    let options = RunOptions { keep_problems: false, max_frames: Some(frame + 1) };
    let outcome = run_pipeline(&config, &options).map_err(|e| CliError::user(e.to_string()))?;
    if outcome.report.frames_run <= frame.min(outcome.report.frames_run) && outcome.report.frames_run == 0 {
        return Err(CliError::user("no frames were processed"));
    }
    let stats = outcome
        .report
        .per_frame
        .last()
        .ok_or_else(|| CliError::user("requested frame not reached".to_string()))?;
    println!(
        "frame {}: {} matches ({} correct, {} possible)",
        stats.frame_id, stats.matches, stats.correct_matches, stats.possible_matches
    );
    if let Some(path) = trace {
        let mut text = String::new();
        for line in outcome.last_traces.iter().map(|t| t.to_line()) {
            let _ = writeln!(text, "{line}");
        }
        fs::write(path, text).map_err(|e| CliError::internal(e.to_string()))?;
        println!("gate trace ({} pairs) written to {}", outcome.last_traces.len(), path.display());
    }
    Ok(())
}

/// On-disk pose problem: the factor set plus the camera it was built for.
#[derive(serde::Serialize, serde::Deserialize)]
struct ProblemFile {
    intrinsics: Intrinsics64,
    problem: PoseProblem<f64>,
}

fn run_optimize(problem_path: &Path, log: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(problem_path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", problem_path.display())))?;
    let file: ProblemFile =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("bad problem JSON: {e}")))?;
    let outcome =
        optimize(&file.problem, &file.intrinsics).map_err(|e| CliError::user(e.to_string()))?;
    let q = outcome.pose.quaternion();
    let t = outcome.pose.translation;
    println!(
        "converged {} iterations {} final_cost {:.6e}",
        outcome.converged, outcome.iterations, outcome.final_cost
    );
    println!(
        "pose: t [{:.6} {:.6} {:.6}] q [{:.6} {:.6} {:.6} {:.6}]",
        t.x, t.y, t.z, q.i, q.j, q.k, q.w
    );
    if let Some(path) = log {
        let mut text = String::new();
        for rec in &outcome.log {
            let _ = writeln!(
                text,
                "iter {} lambda {:.3e} cost {:.6e} step {:.3e}",
                rec.iteration, rec.lambda, rec.cost, rec.step_norm
            );
        }
        fs::write(path, text).map_err(|e| CliError::internal(e.to_string()))?;
    }
    Ok(())
}

fn evaluate(estimated: &Path, groundtruth: &Path) -> Result<(), CliError> {
    let est = read_tum_trajectory(estimated)
        .map_err(|e| CliError::user(format!("{}: {e}", estimated.display())))?;
    let gt = read_tum_trajectory(groundtruth)
        .map_err(|e| CliError::user(format!("{}: {e}", groundtruth.display())))?;
    let result = evaluate_ate(&est, &gt).map_err(|e| CliError::user(e.to_string()))?;
    println!("rmse {:.6}", result.rmse);
    println!("stddev {:.6}", result.stddev);
    Ok(())
}

fn check_jacobians() -> Result<(), CliError> {
    let config = PipelineConfig::default();
    let audits = finite_difference_audit(100, 0xA0D1, &config.intrinsics);
    let mut all_ok = true;
    for audit in &audits {
        println!(
            "{:<20} samples {:>4} max relative error {:.3e}",
            audit.kind, audit.samples, audit.max_relative_error
        );
        all_ok &= audit.max_relative_error < 1e-5;
    }
    if all_ok {
        println!("all factor kinds within 1e-5");
        Ok(())
    } else {
        Err(CliError::user("jacobian audit failed"))
    }
}
