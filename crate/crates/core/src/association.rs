//! Plane data association: geometric gates, projection-IoU matching for
//! object planes, and a tie-corrected Mann-Whitney rank test over the map
//! points associated with each plane.
//!
//! In ambiguous scenes (book tops millimeters above a table) the plane
//! parameters alone cannot separate candidates; the semantic/IoU path plus
//! the rank test does. The `params-only` mode disables everything but the
//! parameter gates and exists for ablation runs.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PixelBox, Plane, RigidTransform};
use crate::map::{MapPointStore, PlaneLandmark, PlaneMap};
use crate::processing::{PlaneObservation, PlaneQuality, ProcessedPlane};
use crate::scalar::Real;

pub use crate::processing::box_overlap as box_iou;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AssociationError {
    #[error("rank test needs {need} samples per side, got {got_frame} and {got_map}")]
    InsufficientSamples { got_frame: usize, got_map: usize, need: usize },
    #[error("landmark has no point with positive depth in this view")]
    NotVisible,
}

/// Association strategy. `ParamsOnly` mirrors parameter-comparison baselines
/// and is used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssociationMode {
    Integrated,
    ParamsOnly,
}

/// Which mean to use for the rank statistic `W = min(U_c, U_w)`.
///
/// `UMean` (`I·J/2`) is the mean of a U statistic and makes identical
/// samples score `z = 0`. `RankSumMean` (`I(I+J+1)/2`) is the mean of the
/// rank-sum statistic; it is kept selectable for reproducing the literal
/// formula some references print next to the min-U statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpMean {
    UMean,
    RankSumMean,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig<S: Real> {
    pub mode: AssociationMode,
    /// Normal-angle gate, radians.
    pub beta_t: S,
    /// World-offset gate, meters.
    pub d_t: S,
    /// Edge point-to-plane gate, meters.
    pub d_t_prime: S,
    /// Required fraction of edge points passing the point-plane gate.
    pub r_t: S,
    /// IoU floor for the semantic (object-object) path.
    pub iou_assoc_min: S,
    /// Two-sided significance level of the rank test.
    pub alpha: S,
    /// Critical value `z_{α/2}` matching `alpha`.
    pub z_crit: S,
    /// Minimum samples per side before the rank test applies.
    pub np_min_samples: usize,
    pub np_mean: NpMean,
    /// Point-to-plane distance for map point ↔ frame plane association, meters.
    pub point_plane_dist_max: S,
}

impl<S: Real> Default for AssociationConfig<S> {
    fn default() -> Self {
        Self {
            mode: AssociationMode::Integrated,
            beta_t: S::c(10.0_f64.to_radians()),
            d_t: S::c(0.05),
            d_t_prime: S::c(0.02),
            r_t: S::c(0.8),
            iou_assoc_min: S::c(0.3),
            alpha: S::c(0.05),
            z_crit: S::c(1.96),
            np_min_samples: 10,
            np_mean: NpMean::UMean,
            point_plane_dist_max: S::c(0.01),
        }
    }
}

/// Eq-style angle gate: `arccos(|(R_cw⁻¹ n_c)·n_w|) < β_T`.
pub fn angle_gate<S: Real>(
    pi_c: &Plane<S>,
    pi_w: &Plane<S>,
    t_cw: &RigidTransform<S>,
    beta_t: S,
) -> bool {
    let n_c_world = t_cw.rotation.inverse() * pi_c.normal();
    let cos = n_c_world.dot(&pi_w.normal()).abs().clamp(S::zero(), S::one());
    cos.acos() < beta_t
}

/// World-origin offset gate: `|t_cwᵀ n_c + d_c − d_w| < d_T`, with the
/// camera plane sign-aligned to the map normal first so canonicalization
/// cannot flip the comparison.
pub fn offset_gate<S: Real>(
    pi_c: &Plane<S>,
    pi_w: &Plane<S>,
    t_cw: &RigidTransform<S>,
    d_t: S,
) -> bool {
    let mut n_c = pi_c.normal();
    let mut d_c = pi_c.offset();
    if (t_cw.rotation.inverse() * n_c).dot(&pi_w.normal()) < S::zero() {
        n_c = -n_c;
        d_c = -d_c;
    }
    (t_cw.translation.dot(&n_c) + d_c - pi_w.offset()).abs() < d_t
}

/// Edge-point gate: fraction of camera-frame edge points whose world
/// position lies within `d_T'` of the map plane; passes when the fraction
/// exceeds `R_T`. Returns `(pass, fraction)`.
pub fn edge_point_gate<S: Real>(
    edge_points_c: &[Vector3<S>],
    pi_w: &Plane<S>,
    t_cw: &RigidTransform<S>,
    d_t_prime: S,
    r_t: S,
) -> (bool, S) {
    if edge_points_c.is_empty() {
        return (false, S::zero());
    }
    let t_wc = t_cw.inverse();
    let close = edge_points_c
        .iter()
        .filter(|b| {
            let world = t_wc.transform_point(b);
            pi_w.signed_distance(&world).abs() < d_t_prime
        })
        .count();
    let fraction = S::from_count(close) / S::from_count(edge_points_c.len());
    (fraction > r_t, fraction)
}

/// Per-axis rank statistic of the two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStat<S> {
    pub w: S,
    pub z: S,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyOutcome<S> {
    pub pass: bool,
    pub axes: [AxisStat<S>; 3],
}

/// One-axis Mann-Whitney test with midranks and tie-corrected variance.
///
/// `U_c = ΣR_c − I(I+1)/2`, `U_w = ΣR_w − J(J+1)/2`, `W = min(U_c, U_w)`;
/// the variance subtracts the tie term `Σ(τ³−τ)` over pooled tie groups.
/// A degenerate variance (every pooled value tied) counts as a pass.
pub fn mann_whitney_axis<S: Real>(
    frame_values: &[S],
    map_values: &[S],
    z_crit: S,
    np_mean: NpMean,
) -> AxisStat<S> {
    let i_len = frame_values.len();
    let j_len = map_values.len();
    let mut pooled: Vec<(S, bool)> = frame_values
        .iter()
        .map(|&v| (v, true))
        .chain(map_values.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("rank values must not be NaN"));

    let n = pooled.len();
    let mut rank_sum_frame = S::zero();
    let mut tie_term = S::zero();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && pooled[end].0 == pooled[start].0 {
            end += 1;
        }
        // 1-based midrank of the run [start, end)
        let midrank = S::from_count(start + 1 + end) * S::c(0.5);
        let run = end - start;
        if run > 1 {
            let tau = S::from_count(run);
            tie_term += tau * tau * tau - tau;
        }
        for item in &pooled[start..end] {
            if item.1 {
                rank_sum_frame += midrank;
            }
        }
        start = end;
    }

    let i = S::from_count(i_len);
    let j = S::from_count(j_len);
    let half = S::c(0.5);
    let u_frame = rank_sum_frame - i * (i + S::one()) * half;
    let total_ranks = S::from_count(n) * (S::from_count(n) + S::one()) * half;
    let u_map = (total_ranks - rank_sum_frame) - j * (j + S::one()) * half;

    // U_c + U_w = I·J holds identically; 0 ≤ W ≤ I·J/2 follows.
    let ij = i * j;
    assert!(
        (u_frame + u_map - ij).abs() < S::c(1e-9),
        "rank bookkeeping broke the U_c + U_w = IJ identity"
    );
    let w = u_frame.min(u_map);
    assert!(w >= -S::c(1e-9) && w <= ij * half + S::c(1e-9), "W out of [0, IJ/2]");

    let mean = match np_mean {
        NpMean::UMean => ij * half,
        NpMean::RankSumMean => i * (i + j + S::one()) * half,
    };
    let n_s = S::from_count(n);
    let twelve = S::c(12.0);
    let variance = ij * (n_s + S::one()) / twelve
        - ij * tie_term / (twelve * n_s * (n_s - S::one()));

    if variance <= S::c(1e-12) {
        // every pooled value tied: the samples are indistinguishable
        return AxisStat { w, z: S::zero(), pass: true };
    }
    let z = (mean - w).abs() / variance.sqrt();
    AxisStat { w, z, pass: z < z_crit }
}

/// Three independent per-axis rank tests over two 3D point samples; the
/// gate passes only when every axis passes.
pub fn mann_whitney_gate<S: Real>(
    m_frame: &[Vector3<S>],
    m_map: &[Vector3<S>],
    cfg: &AssociationConfig<S>,
) -> Result<MannWhitneyOutcome<S>, AssociationError> {
    if m_frame.len() < cfg.np_min_samples || m_map.len() < cfg.np_min_samples {
        return Err(AssociationError::InsufficientSamples {
            got_frame: m_frame.len(),
            got_map: m_map.len(),
            need: cfg.np_min_samples,
        });
    }
    let axes = [0, 1, 2].map(|axis| {
        let xs: Vec<S> = m_frame.iter().map(|p| p[axis]).collect();
        let ys: Vec<S> = m_map.iter().map(|p| p[axis]).collect();
        mann_whitney_axis(&xs, &ys, cfg.z_crit, cfg.np_mean)
    });
    Ok(MannWhitneyOutcome { pass: axes.iter().all(|a| a.pass), axes })
}

/// Axis-aligned pixel box of a landmark's projected vertices (if it has all
/// four) or edge points, clipped to the image. Points behind the camera are
/// skipped; fails when nothing projects.
pub fn project_landmark_box<S: Real>(
    lm: &PlaneLandmark<S>,
    t_cw: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
) -> Result<PixelBox<S>, AssociationError> {
    let source: &[Vector3<S>] = if lm.structure.vertices.len() == 4 {
        &lm.structure.vertices
    } else {
        &lm.edge_points
    };
    let pixels: Vec<Vector2<S>> = source
        .iter()
        .filter_map(|p| k.project(&t_cw.transform_point(p)).ok())
        .collect();
    PixelBox::from_pixels(&pixels)
        .map(|b| b.clipped_to_image(k))
        .ok_or(AssociationError::NotVisible)
}

/// Map point ↔ frame plane association: point-to-plane distance below
/// `dist_max`, and for object planes the projection must fall inside the
/// observation's detection box.
pub fn associate_point_plane<S: Real>(
    p_w: &Vector3<S>,
    obs: &PlaneObservation<S>,
    t_cw: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    dist_max: S,
) -> bool {
    let p_c = t_cw.transform_point(p_w);
    if obs.plane.signed_distance(&p_c).abs() >= dist_max {
        return false;
    }
    if obs.class_id == -1 {
        return true;
    }
    let Some(det_box) = obs.det_box.as_ref() else { return false };
    match k.project(&p_c) {
        Ok(px) => det_box.contains(&px),
        Err(_) => false,
    }
}

/// A resolved frame-plane ↔ landmark match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneMatch<S> {
    pub obs_index: usize,
    pub landmark_id: u64,
    /// IoU for semantic pairs, edge-point fraction for geometric pairs.
    pub score: S,
    pub semantic: bool,
}

/// Record of every gate evaluated for one (observation, landmark) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateTrace<S: Real> {
    pub obs_index: usize,
    pub landmark_id: u64,
    pub obs_class: i32,
    pub landmark_class: i32,
    pub angle: bool,
    pub offset: Option<bool>,
    pub edge: Option<(bool, S)>,
    pub iou: Option<S>,
    pub rank_test: Option<MannWhitneyOutcome<S>>,
    pub candidate: bool,
    pub score: S,
}

impl<S: Real> GateTrace<S> {
    /// One-line text form for the association trace log.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "obs={} lm={} classes={}/{} angle={}",
            self.obs_index, self.landmark_id, self.obs_class, self.landmark_class, self.angle
        );
        if let Some(offset) = self.offset {
            let _ = write!(line, " offset={offset}");
        }
        if let Some((pass, fraction)) = self.edge {
            let _ = write!(line, " edge={pass}({:.4})", fraction.as_f64());
        }
        if let Some(iou) = self.iou {
            let _ = write!(line, " iou={:.4}", iou.as_f64());
        }
        if let Some(mw) = &self.rank_test {
            let _ = write!(line, " mw={}", mw.pass);
            for (axis, stat) in ["x", "y", "z"].iter().zip(mw.axes.iter()) {
                let _ = write!(line, " {axis}:W={:.1},z={:.3}", stat.w.as_f64(), stat.z.as_f64());
            }
        }
        let _ = write!(line, " candidate={} score={:.4}", self.candidate, self.score.as_f64());
        line
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssociationResult<S: Real> {
    pub matches: Vec<PlaneMatch<S>>,
    /// Good observations that matched nothing.
    pub unmatched_frame: Vec<usize>,
    pub traces: Vec<GateTrace<S>>,
}

impl<S: Real> Default for AssociationResult<S> {
    fn default() -> Self {
        Self { matches: Vec::new(), unmatched_frame: Vec::new(), traces: Vec::new() }
    }
}

/// Matches Good frame planes against map landmarks.
///
/// Object-object pairs (both class ids set, integrated mode) pass through
/// the angle gate, projection IoU, and — when both associated map-point
/// samples are large enough — the rank test. Every other pair uses the
/// geometric rule: angle gate plus (offset gate or edge-point gate).
/// Candidates resolve one-to-one greedily by descending score.
pub fn associate_planes<S: Real>(
    observations: &[ProcessedPlane<S>],
    obs_point_ids: &[Vec<u64>],
    map: &PlaneMap<S>,
    points: &MapPointStore<S>,
    t_cw: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    cfg: &AssociationConfig<S>,
) -> AssociationResult<S> {
    let mut result = AssociationResult::default();
    let mut candidates: Vec<PlaneMatch<S>> = Vec::new();

    for (obs_index, item) in observations.iter().enumerate() {
        let obs = &item.observation;
        if obs.quality != PlaneQuality::Good {
            continue;
        }
        for (&landmark_id, lm) in map.iter() {
            let mut trace = GateTrace {
                obs_index,
                landmark_id,
                obs_class: obs.class_id,
                landmark_class: lm.class_id,
                angle: false,
                offset: None,
                edge: None,
                iou: None,
                rank_test: None,
                candidate: false,
                score: S::zero(),
            };
            trace.angle = angle_gate(&obs.plane, &lm.plane, t_cw, cfg.beta_t);

            let semantic_path = cfg.mode == AssociationMode::Integrated
                && obs.class_id != -1
                && lm.class_id != -1;

            if trace.angle {
                if semantic_path {
                    if let (Ok(lm_box), Some(det_box)) =
                        (project_landmark_box(lm, t_cw, k), obs.det_box.as_ref())
                    {
                        let iou = box_iou(&lm_box, det_box);
                        trace.iou = Some(iou);
                        if iou >= cfg.iou_assoc_min {
                            let m_frame = points.resolve(obs_point_ids[obs_index].iter());
                            let m_map = points.resolve(lm.associated_points.iter());
                            match mann_whitney_gate(&m_frame, &m_map, cfg) {
                                Ok(outcome) => {
                                    trace.rank_test = Some(outcome);
                                    trace.candidate = outcome.pass;
                                }
                                // too few samples: IoU alone decides
                                Err(_) => trace.candidate = true,
                            }
                            trace.score = iou;
                        }
                    }
                } else {
                    let offset = offset_gate(&obs.plane, &lm.plane, t_cw, cfg.d_t);
                    let (edge_ok, fraction) =
                        edge_point_gate(&obs.edge_points, &lm.plane, t_cw, cfg.d_t_prime, cfg.r_t);
                    trace.offset = Some(offset);
                    trace.edge = Some((edge_ok, fraction));
                    trace.candidate = offset || edge_ok;
                    trace.score = fraction;
                }
            }

            if trace.candidate {
                candidates.push(PlaneMatch {
                    obs_index,
                    landmark_id,
                    score: trace.score,
                    semantic: semantic_path,
                });
            }
            result.traces.push(trace);
        }
    }

    // Greedy one-to-one resolution by descending score; ties break on the
    // lower observation index, then the lower landmark id.
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.obs_index.cmp(&b.obs_index))
            .then(a.landmark_id.cmp(&b.landmark_id))
    });
    let mut used_obs = std::collections::BTreeSet::new();
    let mut used_lm = std::collections::BTreeSet::new();
    for c in candidates {
        if used_obs.contains(&c.obs_index) || used_lm.contains(&c.landmark_id) {
            continue;
        }
        used_obs.insert(c.obs_index);
        used_lm.insert(c.landmark_id);
        result.matches.push(c);
    }
    result.matches.sort_by_key(|m| m.obs_index);

    for (obs_index, item) in observations.iter().enumerate() {
        if item.observation.quality == PlaneQuality::Good && !used_obs.contains(&obs_index) {
            result.unmatched_frame.push(obs_index);
        }
    }
    result
}
