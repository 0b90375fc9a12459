//! Synthetic desk-scene simulator and trajectory evaluation.
//!
//! Generates ground-truth tabletop scenes whose object-top planes sit only
//! centimeters above the table (the ambiguity regime that defeats
//! parameter-only association), renders noisy per-frame observations, and
//! evaluates trajectories with the rigid-alignment absolute trajectory
//! error. Everything is deterministic for a fixed seed.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PixelBox, RigidTransform};
use crate::map::PointObservation;
use crate::processing::{DetectionBox, RawPlaneCapture};
use crate::{Plane64, Pose64};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scene/trajectory spec: {0}")]
    InvalidSpec(String),
    #[error("no plane is visible from this pose")]
    NothingVisible,
    #[error("fewer than 2 timestamp-matched pose pairs")]
    NoMatches,
}

/// Tabletop rectangle: center, half-extent derives from `extent`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub center: [f64; 3],
    /// Full side lengths along x and y, meters.
    pub extent: [f64; 2],
}

/// A cuboid object resting on the table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class_id: i32,
    pub center_xy: [f64; 2],
    pub yaw_deg: f64,
    /// Full extents (dx, dy, dz), meters.
    pub dims: [f64; 3],
    /// Structured objects contribute a top-face plane; unstructured ones
    /// only a detection box.
    pub structured: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub table: TableSpec,
    pub objects: Vec<ObjectSpec>,
    /// Map points sampled per square meter of each plane.
    pub map_point_density: f64,
    /// Grid spacing of rendered plane clouds, meters.
    pub cloud_spacing: f64,
    /// Spacing of rendered boundary points, meters.
    pub edge_spacing: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            table: TableSpec { center: [0.0, 0.0, 0.75], extent: [1.6, 1.0] },
            objects: Vec::new(),
            map_point_density: 400.0,
            cloud_spacing: 0.025,
            edge_spacing: 0.01,
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Orbit,
    Arc,
    Stationary,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub radius: f64,
    /// Camera height above the look-at point, meters.
    pub height: f64,
    pub frames: usize,
    pub rate_hz: f64,
    pub look_at: [f64; 3],
    /// Arc sweep, degrees (ignored for orbit/stationary).
    pub arc_span_deg: f64,
    pub start_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Orbit,
            radius: 1.0,
            height: 1.2,
            frames: 100,
            rate_hz: 30.0,
            look_at: [0.0, 0.0, 0.75],
            arc_span_deg: 90.0,
            start_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Depth noise along the viewing ray, meters (1σ).
    pub depth_sigma: f64,
    /// Pixel measurement noise, px (1σ).
    pub pixel_sigma: f64,
    /// Probability of dropping a detection box.
    pub detection_dropout: f64,
    /// Probability of withholding a successful plane association
    /// (fault injection for fusion tests).
    pub association_withhold: f64,
    /// Fraction of point observations replaced by uniform outliers.
    pub outlier_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            pixel_sigma: 0.0,
            detection_dropout: 0.0,
            association_withhold: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("detection_dropout", self.detection_dropout),
            ("association_withhold", self.association_withhold),
            ("outlier_fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidSpec(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.depth_sigma < 0.0 || self.pixel_sigma < 0.0 {
            return Err(SimError::InvalidSpec("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground-truth rectangular plane patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenePlane {
    pub id: u64,
    pub plane: Plane64,
    pub class_id: i32,
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub vertices: [Vector3<f64>; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: i32,
    pub corners: [Vector3<f64>; 8],
    pub structured: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenePoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub plane_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub planes: Vec<ScenePlane>,
    pub objects: Vec<SceneObject>,
    pub map_points: Vec<ScenePoint>,
    pub cloud_spacing: f64,
    pub edge_spacing: f64,
}

fn rect_plane(
    id: u64,
    class_id: i32,
    center: Vector3<f64>,
    yaw: f64,
    half_u: f64,
    half_v: f64,
) -> ScenePlane {
    let axis_u = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let axis_v = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    let plane = Plane64::from_point_normal(&center, &Vector3::z()).expect("unit normal");
    let vertices = [
        center + axis_u * half_u + axis_v * half_v,
        center - axis_u * half_u + axis_v * half_v,
        center - axis_u * half_u - axis_v * half_v,
        center + axis_u * half_u - axis_v * half_v,
    ];
    ScenePlane { id, plane, class_id, center, axis_u, axis_v, half_u, half_v, vertices }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    if spec.table.extent[0] <= 0.0 || spec.table.extent[1] <= 0.0 {
        return Err(SimError::InvalidSpec("table extent must be positive".into()));
    }
    if spec.cloud_spacing <= 0.0 || spec.edge_spacing <= 0.0 {
        return Err(SimError::InvalidSpec("sampling spacings must be positive".into()));
    }
    if spec.map_point_density < 0.0 {
        return Err(SimError::InvalidSpec("map point density must be non-negative".into()));
    }

    let table_center = Vector3::from_column_slice(&spec.table.center);
    let mut planes = vec![rect_plane(
        0,
        -1,
        table_center,
        0.0,
        spec.table.extent[0] * 0.5,
        spec.table.extent[1] * 0.5,
    )];
    let mut objects = Vec::new();

    for obj in &spec.objects {
        if obj.dims.iter().any(|&d| d <= 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "object dims must be positive, got {:?}",
                obj.dims
            )));
        }
        let yaw = obj.yaw_deg.to_radians();
        let base_center = Vector3::new(obj.center_xy[0], obj.center_xy[1], table_center.z);
        let top_center = base_center + Vector3::z() * obj.dims[2];
        let axis_u = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let axis_v = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let (hu, hv) = (obj.dims[0] * 0.5, obj.dims[1] * 0.5);
        let mut corners = [Vector3::zeros(); 8];
        for (i, (su, sv, sz)) in [
            (1.0, 1.0, 0.0),
            (-1.0, 1.0, 0.0),
            (-1.0, -1.0, 0.0),
            (1.0, -1.0, 0.0),
            (1.0, 1.0, 1.0),
            (-1.0, 1.0, 1.0),
            (-1.0, -1.0, 1.0),
            (1.0, -1.0, 1.0),
        ]
        .iter()
        .enumerate()
        {
            corners[i] =
                base_center + axis_u * (hu * su) + axis_v * (hv * sv) + Vector3::z() * (obj.dims[2] * sz);
        }
        objects.push(SceneObject { class_id: obj.class_id, corners, structured: obj.structured });
        if obj.structured {
            let id = planes.len() as u64;
            planes.push(rect_plane(id, obj.class_id, top_center, yaw, hu, hv));
        }
    }

    // Map points sampled uniformly per plane at the requested density.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut map_points = Vec::new();
    let mut next_point = 0u64;
    for plane in &planes {
        let area = 4.0 * plane.half_u * plane.half_v;
        let count = (spec.map_point_density * area).round() as usize;
        for _ in 0..count {
            let u = rng.random_range(-plane.half_u..plane.half_u);
            let v = rng.random_range(-plane.half_v..plane.half_v);
            map_points.push(ScenePoint {
                id: next_point,
                position: plane.center + plane.axis_u * u + plane.axis_v * v,
                plane_id: plane.id,
            });
            next_point += 1;
        }
    }

    Ok(Scene {
        planes,
        objects,
        map_points,
        cloud_spacing: spec.cloud_spacing,
        edge_spacing: spec.edge_spacing,
    })
}

/// Named scene presets.
///
/// `ambiguous-desk` is the benchmark scene: three same-class book tops
/// 0.02 m above the table (normals identical, offsets inside the default
/// offset gate), a taller box, and an unstructured plant.
pub fn scene_preset(name: &str) -> Option<SceneSpec> {
    match name {
        "empty-table" => Some(SceneSpec::default()),
        "book-stack" => Some(SceneSpec {
            objects: vec![
                ObjectSpec {
                    class_id: 73,
                    center_xy: [0.0, 0.0],
                    yaw_deg: 0.0,
                    dims: [0.30, 0.22, 0.02],
                    structured: true,
                },
                ObjectSpec {
                    class_id: 73,
                    center_xy: [0.02, 0.03],
                    yaw_deg: 20.0,
                    dims: [0.28, 0.20, 0.05],
                    structured: true,
                },
            ],
            rng_seed: 2,
            ..SceneSpec::default()
        }),
        "ambiguous-desk" => Some(SceneSpec {
            objects: vec![
                ObjectSpec {
                    class_id: 73,
                    center_xy: [-0.42, -0.05],
                    yaw_deg: 15.0,
                    dims: [0.30, 0.22, 0.02],
                    structured: true,
                },
                ObjectSpec {
                    class_id: 73,
                    center_xy: [0.02, 0.12],
                    yaw_deg: -10.0,
                    dims: [0.30, 0.22, 0.02],
                    structured: true,
                },
                ObjectSpec {
                    class_id: 73,
                    center_xy: [0.44, -0.08],
                    yaw_deg: 30.0,
                    dims: [0.30, 0.22, 0.02],
                    structured: true,
                },
                ObjectSpec {
                    class_id: 41,
                    center_xy: [0.05, -0.28],
                    yaw_deg: 0.0,
                    dims: [0.25, 0.18, 0.10],
                    structured: true,
                },
                ObjectSpec {
                    class_id: 63,
                    center_xy: [-0.62, 0.32],
                    yaw_deg: 0.0,
                    dims: [0.18, 0.18, 0.35],
                    structured: false,
                },
            ],
            rng_seed: 3,
            ..SceneSpec::default()
        }),
        _ => None,
    }
}

/// A timestamped camera pose. `t_wc` places the camera in the world
/// (its translation is the camera position), matching the trajectory file
/// convention.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimedPose {
    pub timestamp: f64,
    pub t_wc: Pose64,
}

pub type Trajectory = Vec<TimedPose>;

fn look_at_pose(eye: Vector3<f64>, target: Vector3<f64>) -> Pose64 {
    let forward = (target - eye).normalize();
    let up = if forward.z.abs() > 0.999 { Vector3::x() } else { Vector3::z() };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right); // y points "down" in a right-handed (x, y, z=forward)
    let rotation = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
        right, down, forward,
    ]));
    RigidTransform::new(rotation, eye)
}

pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Trajectory, SimError> {
    if spec.frames == 0 {
        return Ok(Vec::new());
    }
    if spec.rate_hz <= 0.0 {
        return Err(SimError::InvalidSpec("frame rate must be positive".into()));
    }
    if spec.height <= 0.0 {
        return Err(SimError::InvalidSpec("camera height must keep it above the table".into()));
    }
    let target = Vector3::from_column_slice(&spec.look_at);
    let mut out = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let fraction = if spec.frames == 1 { 0.0 } else { i as f64 / spec.frames as f64 };
        let theta = match spec.kind {
            TrajectoryKind::Orbit => spec.start_deg.to_radians() + std::f64::consts::TAU * fraction,
            TrajectoryKind::Arc => {
                let frac = if spec.frames == 1 {
                    0.0
                } else {
                    i as f64 / (spec.frames - 1) as f64
                };
                (spec.start_deg + spec.arc_span_deg * frac).to_radians()
            }
            TrajectoryKind::Stationary => spec.start_deg.to_radians(),
        };
        let eye = target
            + Vector3::new(spec.radius * theta.cos(), spec.radius * theta.sin(), spec.height);
        out.push(TimedPose { timestamp: i as f64 / spec.rate_hz, t_wc: look_at_pose(eye, target) });
    }
    Ok(out)
}

/// One rendered frame: camera-frame plane captures, detection boxes, and
/// map-point observations, plus the evaluation-only ground truth channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub t_cw_gt: Pose64,
    pub captures: Vec<RawPlaneCapture<f64>>,
    pub boxes: Vec<DetectionBox<f64>>,
    pub point_observations: Vec<PointObservation<f64>>,
    pub truth: FrameTruth,
}

/// Ground-truth labels riding with a frame. Pipeline stages never see this
/// type; only the evaluation layer reads it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTruth {
    /// Ground-truth scene plane id per capture.
    pub capture_plane_ids: Vec<u64>,
    /// Point observation ids that were replaced by outliers.
    pub outlier_point_ids: Vec<u64>,
}

const MIN_RENDER_DEPTH: f64 = 0.1;
const MIN_CLOUD_POINTS: usize = 40;
const MIN_EDGE_POINTS: usize = 8;
const MIN_BOX_AREA_PX: f64 = 25.0;
/// Detector boxes are slightly loose around the true silhouette.
const BOX_DILATION_PX: f64 = 2.0;

fn visible_pixel(
    k: &CameraIntrinsics<f64>,
    t_cw: &Pose64,
    p_w: &Vector3<f64>,
) -> Option<(Vector3<f64>, Vector2<f64>)> {
    let p_c = t_cw.transform_point(p_w);
    if p_c.z <= MIN_RENDER_DEPTH {
        return None;
    }
    let px = k.project(&p_c).ok()?;
    if !k.contains_pixel(&px) {
        return None;
    }
    Some((p_c, px))
}

/// Renders the observations of one frame. Deterministic for a fixed
/// `(scene, pose, noise, frame_id, rng_seed)`.
pub fn render_frame(
    scene: &Scene,
    t_cw_gt: &Pose64,
    timestamp: f64,
    k: &CameraIntrinsics<f64>,
    noise: &NoiseSpec,
    frame_id: u64,
    rng_seed: u64,
) -> Result<SimFrame, SimError> {
    noise.validate()?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(rng_seed ^ frame_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let depth_noise = Normal::new(0.0, noise.depth_sigma.max(1e-300)).unwrap();
    let pixel_noise = Normal::new(0.0, noise.pixel_sigma.max(1e-300)).unwrap();

    let mut captures = Vec::new();
    let mut capture_plane_ids = Vec::new();

    for plane in &scene.planes {
        let mut cloud = Vec::new();
        let mut u = -plane.half_u;
        while u <= plane.half_u + 1e-12 {
            let mut v = -plane.half_v;
            while v <= plane.half_v + 1e-12 {
                let p_w = plane.center + plane.axis_u * u + plane.axis_v * v;
                if let Some((p_c, _)) = visible_pixel(k, t_cw_gt, &p_w) {
                    let noisy = if noise.depth_sigma > 0.0 {
                        let along = depth_noise.sample(&mut rng);
                        p_c + p_c / p_c.norm() * along
                    } else {
                        p_c
                    };
                    cloud.push(noisy);
                }
                v += scene.cloud_spacing;
            }
            u += scene.cloud_spacing;
        }

        let mut edge_points = Vec::new();
        let perimeter_step = scene.edge_spacing;
        for side in 0..4 {
            let a = plane.vertices[side];
            let b = plane.vertices[(side + 1) % 4];
            let len = (b - a).norm();
            let steps = (len / perimeter_step).ceil().max(1.0) as usize;
            for s in 0..steps {
                let p_w = a + (b - a) * (s as f64 / steps as f64);
                if let Some((p_c, _)) = visible_pixel(k, t_cw_gt, &p_w) {
                    let noisy = if noise.depth_sigma > 0.0 {
                        let along = depth_noise.sample(&mut rng);
                        p_c + p_c / p_c.norm() * along
                    } else {
                        p_c
                    };
                    edge_points.push(noisy);
                }
            }
        }

        if cloud.len() >= MIN_CLOUD_POINTS && edge_points.len() >= MIN_EDGE_POINTS {
            captures.push(RawPlaneCapture { cloud, edge_points });
            capture_plane_ids.push(plane.id);
        }
    }

    let mut boxes = Vec::new();
    for obj in &scene.objects {
        let pixels: Vec<Vector2<f64>> = obj
            .corners
            .iter()
            .filter_map(|c| {
                let p_c = t_cw_gt.transform_point(c);
                if p_c.z <= MIN_RENDER_DEPTH {
                    return None;
                }
                k.project(&p_c).ok()
            })
            .collect();
        // rng drawn unconditionally so dropout does not desync the stream
        let dropped = rng.random::<f64>() < noise.detection_dropout;
        let Some(raw_box) = PixelBox::from_pixels(&pixels) else { continue };
        if pixels.len() < 4 {
            continue;
        }
        let dilated = PixelBox {
            x_min: raw_box.x_min - BOX_DILATION_PX,
            y_min: raw_box.y_min - BOX_DILATION_PX,
            x_max: raw_box.x_max + BOX_DILATION_PX,
            y_max: raw_box.y_max + BOX_DILATION_PX,
        };
        let clipped = dilated.clipped_to_image(k);
        if clipped.area() < MIN_BOX_AREA_PX || dropped {
            continue;
        }
        boxes.push(DetectionBox { bounds: clipped, class_id: obj.class_id, score: 1.0 });
    }

    let mut point_observations = Vec::new();
    let mut outlier_point_ids = Vec::new();
    for point in &scene.map_points {
        let Some((_, px)) = visible_pixel(k, t_cw_gt, &point.position) else { continue };
        let outlier_draw = rng.random::<f64>();
        let mut pixel = if noise.pixel_sigma > 0.0 {
            Vector2::new(px.x + pixel_noise.sample(&mut rng), px.y + pixel_noise.sample(&mut rng))
        } else {
            px
        };
        if outlier_draw < noise.outlier_fraction {
            pixel = Vector2::new(
                rng.random_range(0.0..k.width as f64),
                rng.random_range(0.0..k.height as f64),
            );
            outlier_point_ids.push(point.id);
        }
        point_observations.push(PointObservation {
            point_id: point.id,
            pixel,
            world: point.position,
        });
    }

    if captures.is_empty() {
        return Err(SimError::NothingVisible);
    }

    Ok(SimFrame {
        frame_id,
        timestamp,
        t_cw_gt: *t_cw_gt,
        captures,
        boxes,
        point_observations,
        truth: FrameTruth { capture_plane_ids, outlier_point_ids },
    })
}

/// Absolute trajectory error after closed-form rigid alignment (scale 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteResult {
    pub rmse: f64,
    pub stddev: f64,
    pub errors: Vec<f64>,
}

const ATE_MATCH_WINDOW: f64 = 0.02;

/// Matches poses by nearest timestamp within 20 ms, rigidly aligns the
/// translation sets, and reports the RMSE and standard deviation of the
/// translational residuals.
pub fn evaluate_ate(estimated: &[TimedPose], ground_truth: &[TimedPose]) -> Result<AteResult, SimError> {
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    for est in estimated {
        let nearest = ground_truth.iter().min_by(|a, b| {
            (a.timestamp - est.timestamp)
                .abs()
                .partial_cmp(&(b.timestamp - est.timestamp).abs())
                .unwrap()
        });
        if let Some(gt) = nearest {
            if (gt.timestamp - est.timestamp).abs() <= ATE_MATCH_WINDOW {
                pairs.push((est.t_wc.translation, gt.t_wc.translation));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(SimError::NoMatches);
    }

    let n = pairs.len() as f64;
    let centroid_est = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let centroid_gt = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut cross = nalgebra::Matrix3::<f64>::zeros();
    for (p, q) in &pairs {
        cross += (p - centroid_est) * (q - centroid_gt).transpose();
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd");
    let v_t = svd.v_t.expect("svd");
    let det = (v_t.transpose() * u.transpose()).determinant();
    let correction = nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = v_t.transpose() * correction * u.transpose();

    let errors: Vec<f64> = pairs
        .iter()
        .map(|(p, q)| (rotation * (p - centroid_est) - (q - centroid_gt)).norm())
        .collect();
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mean = errors.iter().sum::<f64>() / n;
    let variance = (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).max(0.0);
    Ok(AteResult { rmse: mean_sq.sqrt(), stddev: variance.sqrt(), errors })
}
