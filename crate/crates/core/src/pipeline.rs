//! The per-frame pipeline: render (or ingest) observations, process planes,
//! associate, optimize the pose, update the map, and periodically fuse
//! landmarks, with evaluation against the simulator's ground-truth labels.

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

use crate::association::{associate_planes, associate_point_plane, GateTrace};
use crate::config::{ConfigError, OdometryMode, PipelineConfig};
use crate::factor_graph::{build_problem, optimize, PoseProblem};
use crate::io::{write_map_json, write_map_ply, write_tum_trajectory, IoError};
use crate::map::{
    export_map, fuse_landmarks, insert_or_update, Frame, MapPointStore, MapSnapshot, PlaneMap,
};
use crate::processing::{process_captures, PlaneQuality, ProcessedPlane};
use crate::sim::{
    generate_scene, generate_trajectory, render_frame, SimError, TimedPose, Trajectory,
};
use crate::Pose64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Wall-clock per-stage totals, milliseconds. Excluded from determinism
/// comparisons.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub render_ms: f64,
    pub processing_ms: f64,
    pub association_ms: f64,
    pub optimization_ms: f64,
    pub map_update_ms: f64,
    pub fusion_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_id: u64,
    pub timestamp: f64,
    pub matches: usize,
    pub correct_matches: usize,
    pub possible_matches: usize,
    pub precision: f64,
    pub recall: f64,
    pub pose_error_m: f64,
    pub pose_error_deg: f64,
    pub landmarks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub frames_run: usize,
    pub frames_skipped: Vec<u64>,
    pub per_frame: Vec<FrameStats>,
    pub association_precision: f64,
    pub association_recall: f64,
    pub ate_rmse: f64,
    pub ate_stddev: f64,
    pub final_landmarks: usize,
    /// Fusion merges that joined landmarks created from different
    /// ground-truth planes (association errors are measured separately by
    /// precision).
    pub wrongly_fused_landmarks: usize,
    pub timing: StageTimings,
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RunReport,
    pub estimated: Trajectory,
    pub ground_truth: Trajectory,
    pub map_snapshot: MapSnapshot<f64>,
    /// Gate traces of the last processed frame (for `associate --trace`).
    pub last_traces: Vec<GateTrace<f64>>,
    /// Built pose problems per frame when requested via [`RunOptions`].
    pub problems: Vec<(u64, PoseProblem<f64>)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every frame's built [`PoseProblem`] in the result.
    pub keep_problems: bool,
    /// Stop after this many frames (None = trajectory length).
    pub max_frames: Option<usize>,
}

fn perturbation(rng: &mut ChaCha8Rng, sigma_trans: f64, sigma_rot_rad: f64) -> Pose64 {
    let trans = Normal::new(0.0, sigma_trans.max(1e-300)).unwrap();
    let rot = Normal::new(0.0, sigma_rot_rad.max(1e-300)).unwrap();
    let xi = Vector6::from_column_slice(&[
        rot.sample(rng),
        rot.sample(rng),
        rot.sample(rng),
        trans.sample(rng),
        trans.sample(rng),
        trans.sample(rng),
    ]);
    Pose64::identity().retract(&xi)
}

pub fn run_pipeline(
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<PipelineRun, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let k = config.intrinsics;
    let seed = config.run.seed;

    let mut scene_spec = config.scene.resolve()?;
    scene_spec.rng_seed ^= seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let scene = generate_scene(&scene_spec)?;
    let gt_trajectory = generate_trajectory(&config.trajectory)?;
    let unstructured: BTreeSet<i32> = config.unstructured_classes.iter().copied().collect();

    let mut store = MapPointStore::new();
    for point in &scene.map_points {
        store.insert(point.id, point.position);
    }
    let mut odom_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1234_5678_9abc_def1));
    let mut withhold_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x0fed_cba9_8765_4321));

    let mut map = PlaneMap::<f64>::new();
    let mut timings = StageTimings::default();
    let mut report_frames = Vec::new();
    let mut frames_skipped = Vec::new();
    let mut estimated: Trajectory = Vec::new();
    let mut last_traces = Vec::new();
    let mut problems = Vec::new();

    // Evaluation-only landmark identity: the ground-truth plane whose
    // observation created each landmark.
    let mut lm_identity: BTreeMap<u64, u64> = BTreeMap::new();

    let mut prev_est: Option<Pose64> = None;
    let mut prev_gt: Option<Pose64> = None;
    let mut total_matches = 0usize;
    let mut total_correct = 0usize;
    let mut total_possible = 0usize;
    let mut wrong_fusions = 0usize;

    let frame_limit = options.max_frames.unwrap_or(gt_trajectory.len());

    for (idx, tp) in gt_trajectory.iter().take(frame_limit).enumerate() {
        let frame_id = idx as u64;
        let t_cw_gt = tp.t_wc.inverse();

        let t0 = Instant::now();
        let sim_frame = match render_frame(
            &scene,
            &t_cw_gt,
            tp.timestamp,
            &k,
            &config.noise,
            frame_id,
            seed,
        ) {
            Ok(f) => f,
            Err(SimError::NothingVisible) => {
                frames_skipped.push(frame_id);
                prev_gt = Some(t_cw_gt);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        timings.render_ms += t0.elapsed().as_secs_f64() * 1e3;

        // odometry: previous estimate composed with (possibly noisy)
        // ground-truth relative motion
        let noise_pose = match config.odometry.mode {
            OdometryMode::Gt => Pose64::identity(),
            OdometryMode::GtNoise => perturbation(
                &mut odom_rng,
                config.odometry.sigma_trans,
                config.odometry.sigma_rot_deg.to_radians(),
            ),
        };
        let initial = match (prev_est, prev_gt) {
            (Some(est), Some(gt_prev)) => {
                let delta = t_cw_gt.compose(&gt_prev.inverse());
                noise_pose.compose(&delta).compose(&est)
            }
            _ => noise_pose.compose(&t_cw_gt),
        };

        let t1 = Instant::now();
        let processed = process_captures(
            &sim_frame.captures,
            &sim_frame.boxes,
            &k,
            &config.processing,
            &unstructured,
            seed ^ frame_id.wrapping_mul(0xc2b2_ae35),
        );
        // keep ground-truth ids aligned with surviving observations
        let mut observations: Vec<ProcessedPlane<f64>> = Vec::new();
        let mut obs_gt: Vec<u64> = Vec::new();
        for (slot, gt_id) in processed.into_iter().zip(&sim_frame.truth.capture_plane_ids) {
            if let Some(item) = slot {
                observations.push(item);
                obs_gt.push(*gt_id);
            }
        }
        timings.processing_ms += t1.elapsed().as_secs_f64() * 1e3;

        // map point ↔ frame plane association (closest passing plane wins)
        let mut obs_point_ids: Vec<Vec<u64>> = vec![Vec::new(); observations.len()];
        for po in &sim_frame.point_observations {
            let mut best: Option<(usize, f64)> = None;
            for (i, item) in observations.iter().enumerate() {
                let obs = &item.observation;
                if obs.quality != PlaneQuality::Good {
                    continue;
                }
                if associate_point_plane(
                    &po.world,
                    obs,
                    &initial,
                    &k,
                    config.association.point_plane_dist_max,
                ) {
                    let p_c = initial.transform_point(&po.world);
                    let dist = obs.plane.signed_distance(&p_c).abs();
                    if best.is_none_or(|(_, d)| dist < d) {
                        best = Some((i, dist));
                    }
                }
            }
            if let Some((i, _)) = best {
                obs_point_ids[i].push(po.point_id);
            }
        }

        let t2 = Instant::now();
        let mut matches = associate_planes(
            &observations,
            &obs_point_ids,
            &map,
            &store,
            &initial,
            &k,
            &config.association,
        );
        timings.association_ms += t2.elapsed().as_secs_f64() * 1e3;

        // fault injection: withhold a fraction of successful associations
        if config.noise.association_withhold > 0.0 {
            matches.matches.retain(|_| {
                withhold_rng.random::<f64>() >= config.noise.association_withhold
            });
        }

        let frame = Frame {
            id: frame_id,
            timestamp: tp.timestamp,
            t_cw: initial,
            observations,
            boxes: sim_frame.boxes.clone(),
            point_observations: sim_frame.point_observations.clone(),
            matches: None,
        };

        let t3 = Instant::now();
        let problem = build_problem(
            &frame,
            &matches,
            &map,
            &store,
            &obs_point_ids,
            &config.weights,
            config.solver,
        );
        if options.keep_problems {
            problems.push((frame_id, problem.clone()));
        }
        let estimated_pose = match optimize(&problem, &k) {
            Ok(outcome) => outcome.pose,
            Err(_) => {
                frames_skipped.push(frame_id);
                prev_est = Some(initial);
                prev_gt = Some(t_cw_gt);
                continue;
            }
        };
        timings.optimization_ms += t3.elapsed().as_secs_f64() * 1e3;

        // evaluation bookkeeping against ground-truth labels (pre-insert)
        let existing_identities: BTreeSet<u64> = lm_identity.values().copied().collect();
        let mut correct = 0usize;
        for m in &matches.matches {
            if lm_identity.get(&m.landmark_id) == Some(&obs_gt[m.obs_index]) {
                correct += 1;
            }
        }
        let possible = obs_gt
            .iter()
            .zip(frame.observations.iter())
            .filter(|(gt_id, item)| {
                item.observation.quality == PlaneQuality::Good
                    && existing_identities.contains(gt_id)
            })
            .count();

        let t4 = Instant::now();
        let mut updated_frame = frame;
        updated_frame.t_cw = estimated_pose;
        let summary = insert_or_update(
            &mut map,
            &updated_frame,
            &matches,
            &obs_point_ids,
            &store,
            &k,
            &config.processing,
            &config.map,
        );
        timings.map_update_ms += t4.elapsed().as_secs_f64() * 1e3;

        for (obs_idx, lm_id) in &summary.created {
            lm_identity.insert(*lm_id, obs_gt[*obs_idx]);
        }

        let t5 = Instant::now();
        if config.run.fuse_every > 0 && (frame_id + 1).is_multiple_of(config.run.fuse_every) {
            let merges = fuse_landmarks(&mut map, &config.association, &config.map);
            for (kept, removed) in merges {
                if lm_identity.get(&kept) != lm_identity.get(&removed) {
                    wrong_fusions += 1;
                }
                lm_identity.remove(&removed);
            }
        }
        timings.fusion_ms += t5.elapsed().as_secs_f64() * 1e3;

        let matches_count = matches.matches.len();
        total_matches += matches_count;
        total_correct += correct;
        total_possible += possible;
        let delta = estimated_pose.compose(&t_cw_gt.inverse());
        report_frames.push(FrameStats {
            frame_id,
            timestamp: tp.timestamp,
            matches: matches_count,
            correct_matches: correct,
            possible_matches: possible,
            precision: if matches_count == 0 { 1.0 } else { correct as f64 / matches_count as f64 },
            recall: if possible == 0 { 1.0 } else { correct as f64 / possible as f64 },
            pose_error_m: delta.translation.norm(),
            pose_error_deg: delta.rotation_angle().to_degrees(),
            landmarks: map.len(),
        });
        estimated.push(TimedPose { timestamp: tp.timestamp, t_wc: estimated_pose.inverse() });
        last_traces = matches.traces;
        prev_est = Some(estimated_pose);
        prev_gt = Some(t_cw_gt);
    }

    // final fusion pass so stragglers merge even off-cadence
    let t5 = Instant::now();
    let merges = fuse_landmarks(&mut map, &config.association, &config.map);
    for (kept, removed) in merges {
        if lm_identity.get(&kept) != lm_identity.get(&removed) {
            wrong_fusions += 1;
        }
        lm_identity.remove(&removed);
    }
    timings.fusion_ms += t5.elapsed().as_secs_f64() * 1e3;

    let ate = evaluate_on(&estimated, &gt_trajectory).unwrap_or((0.0, 0.0));
    let wrongly_fused = wrong_fusions;

    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    let report = RunReport {
        frames_run: report_frames.len(),
        frames_skipped,
        per_frame: report_frames,
        association_precision: if total_matches == 0 {
            1.0
        } else {
            total_correct as f64 / total_matches as f64
        },
        association_recall: if total_possible == 0 {
            1.0
        } else {
            total_correct as f64 / total_possible as f64
        },
        ate_rmse: ate.0,
        ate_stddev: ate.1,
        final_landmarks: map.len(),
        wrongly_fused_landmarks: wrongly_fused,
        timing: timings,
    };

    Ok(PipelineRun {
        report,
        estimated,
        ground_truth: gt_trajectory,
        map_snapshot: export_map(&map),
        last_traces,
        problems,
    })
}

fn evaluate_on(estimated: &Trajectory, ground_truth: &Trajectory) -> Option<(f64, f64)> {
    crate::sim::evaluate_ate(estimated, ground_truth).ok().map(|r| (r.rmse, r.stddev))
}

/// Writes `trajectory.txt`, `groundtruth.txt`, `map.ply`, `map.json`, and
/// `report.json` into `dir`.
pub fn write_outputs(run: &PipelineRun, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(IoError::from)?;
    write_tum_trajectory(&run.estimated, &dir.join("trajectory.txt"))?;
    write_tum_trajectory(&run.ground_truth, &dir.join("groundtruth.txt"))?;
    write_map_ply(&run.map_snapshot, &dir.join("map.ply"))?;
    write_map_json(&run.map_snapshot, &dir.join("map.json"))?;
    let report =
        serde_json::to_string_pretty(&run.report).expect("report serializes") + "\n";
    std::fs::write(dir.join("report.json"), report).map_err(IoError::from)?;
    Ok(())
}
