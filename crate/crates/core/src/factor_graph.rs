//! Multi-constraint pose optimization: six factor kinds over a single 6-DoF
//! camera pose, solved by Levenberg-Marquardt on a Huber-robustified cost.
//!
//! The pose is parameterized by a left-multiplicative tangent increment
//! `ξ = (ω, v)`: `T ← (exp(ω), v) ∘ T`, under which a camera-frame point
//! perturbs as `p ← exp(ω)·p + v`, giving the compact Jacobian blocks
//! `∂p/∂ω = -[p]×` and `∂p/∂v = I` used throughout.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::AssociationResult;
use crate::geometry::{normal_angles, wrap_angle, CameraIntrinsics, PixelBox, Plane, RigidTransform};
use crate::map::{Frame, MapPointStore, ObsPointIds, PlaneMap};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FactorError {
    #[error("factor not evaluable at this pose (projection or parameterization singular)")]
    NotEvaluable,
    #[error("problem has no evaluable factor")]
    NoFactors,
}

/// One measurement constraint on the camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Factor<S: Real> {
    /// Reprojection of a map point against its pixel measurement.
    PosePoint { u_obs: Vector2<S>, p_w: Vector3<S> },
    /// Observed camera-frame plane against the transformed map plane, in
    /// minimal (azimuth, elevation, offset) coordinates.
    PosePlane { pi_c: Plane<S>, pi_w: Plane<S> },
    /// Detection box against the axis-aligned box of the projected map-plane
    /// vertices; residual is the (left, top, right, bottom) edge difference.
    BoxPlane { b_obs: PixelBox<S>, vertices_w: [Vector3<S>; 4] },
    /// Distance of a transformed map point to its associated observed plane.
    PointPlane { pi_c: Plane<S>, p_w: Vector3<S> },
    /// Structural parallelism: observed normal against a rotated map normal,
    /// in (azimuth, elevation) coordinates.
    PlaneParallel { n_c: Vector3<S>, n_w: Vector3<S> },
    /// Structural perpendicularity: the observed normal pre-rotated by 90°
    /// onto the map normal's direction, then compared like the parallel case.
    PlanePerpendicular { rotated_n_c: Vector3<S>, n_w: Vector3<S> },
}

impl<S: Real> Factor<S> {
    /// Residual dimension: 2, 3, 4, 1, 2, 2.
    pub fn dim(&self) -> usize {
        match self {
            Factor::PosePoint { .. } => 2,
            Factor::PosePlane { .. } => 3,
            Factor::BoxPlane { .. } => 4,
            Factor::PointPlane { .. } => 1,
            Factor::PlaneParallel { .. } => 2,
            Factor::PlanePerpendicular { .. } => 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Factor::PosePoint { .. } => "pose_point",
            Factor::PosePlane { .. } => "pose_plane",
            Factor::BoxPlane { .. } => "box_plane",
            Factor::PointPlane { .. } => "point_plane",
            Factor::PlaneParallel { .. } => "plane_parallel",
            Factor::PlanePerpendicular { .. } => "plane_perpendicular",
        }
    }

    pub fn residual(
        &self,
        t_cw: &RigidTransform<S>,
        k: &CameraIntrinsics<S>,
    ) -> Result<DVector<S>, FactorError> {
        match self {
            Factor::PosePoint { u_obs, p_w } => {
                let p_c = t_cw.transform_point(p_w);
                let u = k.project(&p_c).map_err(|_| FactorError::NotEvaluable)?;
                Ok(DVector::from_column_slice(&[u_obs.x - u.x, u_obs.y - u.y]))
            }
            Factor::PosePlane { pi_c, pi_w } => {
                let pred = pi_w.transformed(t_cw);
                guard_normal(&pred.normal())?;
                let (phi_o, psi_o, d_o) = pi_c.minimal_params();
                let (phi_p, psi_p, d_p) = pred.minimal_params();
                Ok(DVector::from_column_slice(&[
                    wrap_angle(phi_o - phi_p),
                    wrap_angle(psi_o - psi_p),
                    d_o - d_p,
                ]))
            }
            Factor::BoxPlane { b_obs, vertices_w } => {
                let (bx, _) = project_vertex_box(vertices_w, t_cw, k)?;
                Ok(DVector::from_column_slice(&[
                    b_obs.x_min - bx.x_min,
                    b_obs.y_min - bx.y_min,
                    b_obs.x_max - bx.x_max,
                    b_obs.y_max - bx.y_max,
                ]))
            }
            Factor::PointPlane { pi_c, p_w } => {
                let p_c = t_cw.transform_point(p_w);
                Ok(DVector::from_column_slice(&[pi_c.signed_distance(&p_c)]))
            }
            Factor::PlaneParallel { n_c, n_w } => {
                let pred = t_cw.rotation * n_w;
                guard_normal(&pred)?;
                Ok(angle_pair_residual(n_c, &pred))
            }
            Factor::PlanePerpendicular { rotated_n_c, n_w } => {
                let pred = t_cw.rotation * n_w;
                guard_normal(&pred)?;
                Ok(angle_pair_residual(rotated_n_c, &pred))
            }
        }
    }

    /// Residual and its analytic Jacobian with respect to the tangent
    /// increment `(ω, v)`.
    pub fn jacobian(
        &self,
        t_cw: &RigidTransform<S>,
        k: &CameraIntrinsics<S>,
    ) -> Result<(DVector<S>, DMatrix<S>), FactorError> {
        let r = self.residual(t_cw, k)?;
        let j = match self {
            Factor::PosePoint { p_w, .. } => {
                let p_c = t_cw.transform_point(p_w);
                let du = projection_jacobian(&p_c, k);
                // r = u_obs − u(p_c)
                let mut j = DMatrix::zeros(2, 6);
                let dp = point_pose_jacobian(&p_c);
                j.copy_from(&(-du * dp));
                j
            }
            Factor::PosePlane { pi_w, .. } => {
                let pred = pi_w.transformed(t_cw);
                let n = pred.normal();
                let q_grad = minimal_param_jacobian(&n)?;
                // rows: (phi, psi, d); cols: (ω, v)
                let mut dn_dd = DMatrix::<S>::zeros(4, 6);
                let n_cross = skew(&n);
                dn_dd.view_mut((0, 0), (3, 3)).copy_from(&(-n_cross));
                dn_dd
                    .view_mut((3, 3), (1, 3))
                    .copy_from(&(-n.transpose()));
                -q_grad * dn_dd
            }
            Factor::BoxPlane { vertices_w, .. } => {
                let (_, active) = project_vertex_box(vertices_w, t_cw, k)?;
                let mut j = DMatrix::zeros(4, 6);
                // rows: left (min x), top (min y), right (max x), bottom (max y)
                for (row, &(vertex_idx, coord)) in active.iter().enumerate() {
                    let p_c = t_cw.transform_point(&vertices_w[vertex_idx]);
                    let du = projection_jacobian(&p_c, k);
                    let dp = point_pose_jacobian(&p_c);
                    let full = du * dp;
                    for col in 0..6 {
                        j[(row, col)] = -full[(coord, col)];
                    }
                }
                j
            }
            Factor::PointPlane { pi_c, p_w } => {
                let p_c = t_cw.transform_point(p_w);
                let dp = point_pose_jacobian(&p_c);
                let mut j = DMatrix::zeros(1, 6);
                let n = pi_c.normal();
                let grad = n.transpose() * dp;
                j.copy_from(&grad);
                j
            }
            Factor::PlaneParallel { n_w, .. } | Factor::PlanePerpendicular { n_w, .. } => {
                let pred = t_cw.rotation * n_w;
                let q_grad = normal_angles_jacobian(&pred)?;
                // r = q_n(obs) − q_n(pred), ∂pred/∂ω = −[pred]×, v-block zero
                let mut j = DMatrix::zeros(2, 6);
                let block = q_grad * skew(&pred);
                j.view_mut((0, 0), (2, 3)).copy_from(&block);
                j
            }
        };
        Ok((r, j))
    }
}

fn guard_normal<S: Real>(n: &Vector3<S>) -> Result<(), FactorError> {
    let planar_sq = n.x * n.x + n.y * n.y;
    let polar_sq = S::one() - n.z * n.z;
    if planar_sq < S::c(1e-12) || polar_sq < S::c(1e-12) {
        return Err(FactorError::NotEvaluable);
    }
    Ok(())
}

fn skew<S: Real>(v: &Vector3<S>) -> Matrix3<S> {
    Matrix3::new(
        S::zero(),
        -v.z,
        v.y,
        v.z,
        S::zero(),
        -v.x,
        -v.y,
        v.x,
        S::zero(),
    )
}

/// `∂p_c/∂(ω, v)` for the left increment: `[-[p_c]× | I]`, 3×6.
fn point_pose_jacobian<S: Real>(p_c: &Vector3<S>) -> DMatrix<S> {
    let mut j = DMatrix::zeros(3, 6);
    j.view_mut((0, 0), (3, 3)).copy_from(&(-skew(p_c)));
    j.view_mut((0, 3), (3, 3)).copy_from(&Matrix3::identity());
    j
}

/// `∂u/∂p_c` of the pinhole projection, 2×3.
fn projection_jacobian<S: Real>(p_c: &Vector3<S>, k: &CameraIntrinsics<S>) -> DMatrix<S> {
    let z = p_c.z;
    let z2 = z * z;
    DMatrix::from_row_slice(
        2,
        3,
        &[
            k.fx / z,
            S::zero(),
            -k.fx * p_c.x / z2,
            S::zero(),
            k.fy / z,
            -k.fy * p_c.y / z2,
        ],
    )
}

/// Gradient of `(azimuth, elevation)` with respect to the unit normal, 2×3.
fn normal_angles_jacobian<S: Real>(n: &Vector3<S>) -> Result<DMatrix<S>, FactorError> {
    guard_normal(n)?;
    let planar_sq = n.x * n.x + n.y * n.y;
    let polar = (S::one() - n.z * n.z).sqrt();
    Ok(DMatrix::from_row_slice(
        2,
        3,
        &[
            -n.y / planar_sq,
            n.x / planar_sq,
            S::zero(),
            S::zero(),
            S::zero(),
            S::one() / polar,
        ],
    ))
}

/// Gradient of `(azimuth, elevation, d)` with respect to `(n, d)`, 3×4.
fn minimal_param_jacobian<S: Real>(n: &Vector3<S>) -> Result<DMatrix<S>, FactorError> {
    let angles = normal_angles_jacobian(n)?;
    let mut j = DMatrix::zeros(3, 4);
    j.view_mut((0, 0), (2, 3)).copy_from(&angles);
    j[(2, 3)] = S::one();
    Ok(j)
}

fn angle_pair_residual<S: Real>(observed: &Vector3<S>, predicted: &Vector3<S>) -> DVector<S> {
    let (phi_o, psi_o) = normal_angles(observed);
    let (phi_p, psi_p) = normal_angles(predicted);
    DVector::from_column_slice(&[wrap_angle(phi_o - phi_p), wrap_angle(psi_o - psi_p)])
}

/// Per box edge: (active vertex index, pixel coordinate index).
type ActiveVertices = [(usize, usize); 4];

/// Projects the four vertices, forms the axis-aligned box, and records which
/// vertex is active per edge (ties to the lowest index).
fn project_vertex_box<S: Real>(
    vertices_w: &[Vector3<S>; 4],
    t_cw: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
) -> Result<(PixelBox<S>, ActiveVertices), FactorError> {
    let mut pixels = [Vector2::zeros(); 4];
    for (i, v) in vertices_w.iter().enumerate() {
        let p_c = t_cw.transform_point(v);
        pixels[i] = k.project(&p_c).map_err(|_| FactorError::NotEvaluable)?;
    }
    let mut left = (0usize, pixels[0].x);
    let mut top = (0usize, pixels[0].y);
    let mut right = (0usize, pixels[0].x);
    let mut bottom = (0usize, pixels[0].y);
    for (i, px) in pixels.iter().enumerate().skip(1) {
        if px.x < left.1 {
            left = (i, px.x);
        }
        if px.y < top.1 {
            top = (i, px.y);
        }
        if px.x > right.1 {
            right = (i, px.x);
        }
        if px.y > bottom.1 {
            bottom = (i, px.y);
        }
    }
    let bx = PixelBox { x_min: left.1, y_min: top.1, x_max: right.1, y_max: bottom.1 };
    // (vertex index, pixel coordinate index) per box edge
    Ok((bx, [(left.0, 0), (top.0, 1), (right.0, 0), (bottom.0, 1)]))
}

/// A factor with its scalar information weight and Huber width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedFactor<S: Real> {
    pub factor: Factor<S>,
    pub weight: S,
    pub huber_delta: S,
}

/// Huber-robustified squared error: equals `s` (the squared residual norm)
/// up to `δ²`, then grows linearly in the residual norm.
pub fn huber_cost<S: Real>(s: S, delta: S) -> S {
    let d2 = delta * delta;
    if s <= d2 {
        s
    } else {
        S::c(2.0) * delta * s.sqrt() - d2
    }
}

/// First derivative of [`huber_cost`] in `s`; the IRLS weight.
pub fn huber_weight<S: Real>(s: S, delta: S) -> S {
    let d2 = delta * delta;
    if s <= d2 {
        S::one()
    } else {
        delta / s.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings<S: Real> {
    pub max_iterations: usize,
    pub lambda_init: S,
    pub lambda_scale: S,
    pub convergence_tol: S,
}

impl<S: Real> Default for SolverSettings<S> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: S::c(1e-4),
            lambda_scale: S::c(10.0),
            convergence_tol: S::c(1e-10),
        }
    }
}

/// One frame's pose optimization problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseProblem<S: Real> {
    pub initial: RigidTransform<S>,
    pub factors: Vec<WeightedFactor<S>>,
    pub settings: SolverSettings<S>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationRecord<S> {
    pub iteration: usize,
    pub lambda: S,
    pub cost: S,
    pub step_norm: S,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome<S: Real> {
    pub pose: RigidTransform<S>,
    pub final_cost: S,
    pub iterations: usize,
    pub converged: bool,
    /// Factors that were not evaluable at the final linearization.
    pub skipped_factors: usize,
    pub log: Vec<IterationRecord<S>>,
}

/// Total robust cost at a pose; also reports how many factors evaluated.
pub fn total_cost<S: Real>(
    factors: &[WeightedFactor<S>],
    pose: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
) -> (S, usize) {
    let mut cost = S::zero();
    let mut evaluated = 0;
    for wf in factors {
        if let Ok(r) = wf.factor.residual(pose, k) {
            cost += wf.weight * huber_cost(r.norm_squared(), wf.huber_delta);
            evaluated += 1;
        }
    }
    (cost, evaluated)
}

/// Levenberg-Marquardt over the robustified cost. Accepted steps strictly
/// decrease the cost; the solve stops on relative improvement below
/// `convergence_tol` or after `max_iterations`.
pub fn optimize<S: Real>(
    problem: &PoseProblem<S>,
    k: &CameraIntrinsics<S>,
) -> Result<SolveOutcome<S>, FactorError> {
    if problem.factors.is_empty() {
        return Err(FactorError::NoFactors);
    }
    let mut pose = problem.initial;
    let (mut cost, evaluated) = total_cost(&problem.factors, &pose, k);
    if evaluated == 0 {
        return Err(FactorError::NoFactors);
    }
    let settings = problem.settings;
    let mut lambda = settings.lambda_init;
    let mut log = Vec::new();
    let mut converged = cost <= S::c(1e-18);
    let mut iterations = 0;
    let mut skipped = problem.factors.len() - evaluated;

    while !converged && iterations < settings.max_iterations {
        let mut normal = DMatrix::<S>::zeros(6, 6);
        let mut gradient = DVector::<S>::zeros(6);
        let mut evaluated = 0;
        for wf in &problem.factors {
            let Ok((r, j)) = wf.factor.jacobian(&pose, k) else { continue };
            let w = wf.weight * huber_weight(r.norm_squared(), wf.huber_delta);
            normal += (j.transpose() * &j) * w;
            gradient += j.transpose() * &r * w;
            evaluated += 1;
        }
        skipped = problem.factors.len() - evaluated;
        if evaluated == 0 {
            break;
        }
        if gradient.norm() < S::c(1e-14) {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..24 {
            let damped = &normal + DMatrix::identity(6, 6) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= settings.lambda_scale;
                continue;
            };
            let step = chol.solve(&(-&gradient));
            let xi = Vector6::from_iterator(step.iter().copied());
            let candidate = pose.retract(&xi);
            let (candidate_cost, _) = total_cost(&problem.factors, &candidate, k);
            if candidate_cost < cost {
                let relative = (cost - candidate_cost) / cost.max(S::c(1e-300));
                pose = candidate;
                cost = candidate_cost;
                lambda = (lambda / settings.lambda_scale).max(S::c(1e-12));
                log.push(IterationRecord {
                    iteration: iterations,
                    lambda,
                    cost,
                    step_norm: xi.norm(),
                });
                if relative < settings.convergence_tol || cost < S::c(1e-15) {
                    converged = true;
                }
                accepted = true;
                break;
            }
            lambda *= settings.lambda_scale;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }

    Ok(SolveOutcome { pose, final_cost: cost, iterations, converged, skipped_factors: skipped, log })
}

/// Result of the central finite-difference audit for one factor kind.
#[derive(Debug, Clone, Copy)]
pub struct JacobianAudit {
    pub kind: &'static str,
    pub samples: usize,
    /// Worst relative error over all entries above the 1e-8 absolute floor.
    pub max_relative_error: f64,
}

/// Audits the analytic Jacobians of all six factor kinds against central
/// finite differences (step 1e-6) on random well-conditioned instances.
pub fn finite_difference_audit(
    samples_per_kind: usize,
    seed: u64,
    k: &CameraIntrinsics<f64>,
) -> Vec<JacobianAudit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-6;
    let mut out = Vec::with_capacity(6);
    for kind in 0..6 {
        let mut worst: f64 = 0.0;
        let mut name = "";
        for _ in 0..samples_per_kind {
            let (wf, pose) = crate::testing::factors::random_factor(kind, &mut rng, k);
            name = wf.factor.kind_name();
            let (_, analytic) = wf.factor.jacobian(&pose, k).expect("generated factor evaluable");
            let dim = wf.factor.dim();
            for col in 0..6 {
                let mut xi = Vector6::zeros();
                xi[col] = step;
                let plus = wf.factor.residual(&pose.retract(&xi), k).expect("evaluable");
                xi[col] = -step;
                let minus = wf.factor.residual(&pose.retract(&xi), k).expect("evaluable");
                for row in 0..dim {
                    let fd = (plus[row] - minus[row]) / (2.0 * step);
                    let diff = (analytic[(row, col)] - fd).abs();
                    if diff > 1e-8 {
                        worst = worst.max(diff / analytic[(row, col)].abs().max(1e-12));
                    }
                }
            }
        }
        out.push(JacobianAudit { kind: name, samples: samples_per_kind, max_relative_error: worst });
    }
    out
}

/// Per-kind information weights, Huber widths, and the structural-pair
/// angle tolerance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorWeights<S: Real> {
    pub w_pose_point: S,
    pub w_pose_plane: S,
    pub w_box_plane: S,
    pub w_point_plane: S,
    pub w_parallel: S,
    pub w_perpendicular: S,
    pub huber_pose_point: S,
    pub huber_pose_plane: S,
    pub huber_box_plane: S,
    pub huber_point_plane: S,
    pub huber_struct: S,
    /// Structural pairs are created when map normals are within this angle
    /// of parallel or perpendicular, radians.
    pub angle_struct_tol: S,
}

impl<S: Real> Default for FactorWeights<S> {
    fn default() -> Self {
        Self {
            w_pose_point: S::one(),
            w_pose_plane: S::c(100.0),
            w_box_plane: S::c(1e-3),
            w_point_plane: S::c(400.0),
            w_parallel: S::c(50.0),
            w_perpendicular: S::c(50.0),
            huber_pose_point: S::c(2.0),
            huber_pose_plane: S::c(0.02),
            huber_box_plane: S::c(2.0),
            huber_point_plane: S::c(0.02),
            huber_struct: S::c(0.02),
            angle_struct_tol: S::c(5.0_f64.to_radians()),
        }
    }
}

/// Assembles the frame's factor set: one PosePoint per tracked map point,
/// one PosePlane per plane match, a BoxPlane for matched object landmarks
/// with four vertices, PointPlane factors for the frame's point-plane
/// associations, and structural parallel/perpendicular factors between
/// matched landmark pairs whose map normals are near-parallel or
/// near-perpendicular.
pub fn build_problem<S: Real>(
    frame: &Frame<S>,
    matches: &AssociationResult<S>,
    map: &PlaneMap<S>,
    store: &MapPointStore<S>,
    obs_point_ids: &ObsPointIds,
    weights: &FactorWeights<S>,
    settings: SolverSettings<S>,
) -> PoseProblem<S> {
    let mut factors = Vec::new();

    for po in &frame.point_observations {
        factors.push(WeightedFactor {
            factor: Factor::PosePoint { u_obs: po.pixel, p_w: po.world },
            weight: weights.w_pose_point,
            huber_delta: weights.huber_pose_point,
        });
    }

    let mut ordered = matches.matches.clone();
    ordered.sort_by_key(|m| m.obs_index);

    for m in &ordered {
        let obs = &frame.observations[m.obs_index].observation;
        let Some(lm) = map.get(m.landmark_id) else { continue };
        factors.push(WeightedFactor {
            factor: Factor::PosePlane { pi_c: obs.plane, pi_w: lm.plane },
            weight: weights.w_pose_plane,
            huber_delta: weights.huber_pose_plane,
        });
        if lm.class_id != -1 && lm.structure.vertices.len() == 4 {
            if let Some(b_obs) = obs.det_box {
                let vertices_w = [
                    lm.structure.vertices[0],
                    lm.structure.vertices[1],
                    lm.structure.vertices[2],
                    lm.structure.vertices[3],
                ];
                factors.push(WeightedFactor {
                    factor: Factor::BoxPlane { b_obs, vertices_w },
                    weight: weights.w_box_plane,
                    huber_delta: weights.huber_box_plane,
                });
            }
        }
    }

    for (obs_index, item) in frame.observations.iter().enumerate() {
        let obs = &item.observation;
        if obs.quality != crate::processing::PlaneQuality::Good {
            continue;
        }
        for pid in &obs_point_ids[obs_index] {
            if let Some(p_w) = store.get(*pid) {
                factors.push(WeightedFactor {
                    factor: Factor::PointPlane { pi_c: obs.plane, p_w: *p_w },
                    weight: weights.w_point_plane,
                    huber_delta: weights.huber_point_plane,
                });
            }
        }
    }

    // Structural factors between co-observed matched landmark pairs.
    let parallel_cos = weights.angle_struct_tol.cos();
    let perpendicular_cos = weights.angle_struct_tol.sin();
    for (i, a) in ordered.iter().enumerate() {
        for b in ordered.iter().skip(i + 1) {
            let (Some(lm_a), Some(lm_b)) = (map.get(a.landmark_id), map.get(b.landmark_id))
            else {
                continue;
            };
            let obs_a = &frame.observations[a.obs_index].observation;
            let n_c = obs_a.plane.normal();
            let n_w_b = lm_b.plane.normal();
            let cos = lm_a.plane.normal().dot(&n_w_b).abs();
            if cos >= parallel_cos {
                // align the map normal with the observed one at build time
                let rotated = frame.t_cw.rotation * n_w_b;
                let n_w = if rotated.dot(&n_c) < S::zero() { -n_w_b } else { n_w_b };
                factors.push(WeightedFactor {
                    factor: Factor::PlaneParallel { n_c, n_w },
                    weight: weights.w_parallel,
                    huber_delta: weights.huber_struct,
                });
            } else if cos <= perpendicular_cos {
                let target = frame.t_cw.rotation * n_w_b;
                let axis = n_c.cross(&target);
                if axis.norm() > S::c(1e-6) {
                    let r_perp =
                        Rotation3::from_axis_angle(&Unit::new_normalize(axis), S::frac_pi_2());
                    factors.push(WeightedFactor {
                        factor: Factor::PlanePerpendicular {
                            rotated_n_c: r_perp * n_c,
                            n_w: n_w_b,
                        },
                        weight: weights.w_perpendicular,
                        huber_delta: weights.huber_struct,
                    });
                }
            }
        }
    }

    PoseProblem { initial: frame.t_cw, factors, settings }
}
