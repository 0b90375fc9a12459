//! Global plane map: landmark creation, per-frame merging, duplicate fusion,
//! and deterministic snapshot export.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::association::{AssociationConfig, AssociationMode, AssociationResult};
use crate::geometry::{CameraIntrinsics, Line3D, RigidTransform};
use crate::processing::{
    extract_edge_lines, extract_vertices, least_squares_plane, DetectionBox, PlaneQuality,
    PlaneStructure, ProcessedPlane, ProcessingConfig, VertexConfig,
};
use crate::geometry::Plane;
use crate::scalar::Real;

/// One tracked map-point observation in a frame: the point id, its pixel
/// measurement, and its (known) world position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointObservation<S: Real> {
    pub point_id: u64,
    pub pixel: Vector2<S>,
    pub world: Vector3<S>,
}

/// One camera frame: pose estimate plus everything observed in it.
#[derive(Debug, Clone)]
pub struct Frame<S: Real> {
    pub id: u64,
    pub timestamp: f64,
    pub t_cw: RigidTransform<S>,
    pub observations: Vec<ProcessedPlane<S>>,
    pub boxes: Vec<DetectionBox<S>>,
    pub point_observations: Vec<PointObservation<S>>,
    pub matches: Option<AssociationResult<S>>,
}

/// World positions of the map points, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct MapPointStore<S: Real> {
    points: BTreeMap<u64, Vector3<S>>,
}

impl<S: Real> MapPointStore<S> {
    pub fn new() -> Self {
        Self { points: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: u64, position: Vector3<S>) {
        self.points.insert(id, position);
    }

    pub fn get(&self, id: u64) -> Option<&Vector3<S>> {
        self.points.get(&id)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Resolves a set of ids to positions, silently skipping unknown ids.
    pub fn resolve<'a>(&self, ids: impl IntoIterator<Item = &'a u64>) -> Vec<Vector3<S>> {
        ids.into_iter().filter_map(|id| self.points.get(id).copied()).collect()
    }
}

/// A plane landmark in the world frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneLandmark<S: Real> {
    pub id: u64,
    pub plane: Plane<S>,
    pub cloud: Vec<Vector3<S>>,
    pub edge_points: Vec<Vector3<S>>,
    pub structure: PlaneStructure<S>,
    pub class_id: i32,
    /// landmark id -> number of shared frames
    pub covisible: BTreeMap<u64, u32>,
    pub observations: u32,
    /// ids of map points associated with this plane (the `M_w` sample)
    pub associated_points: BTreeSet<u64>,
}

/// The plane map. Landmark ids are unique and never reused.
#[derive(Debug, Clone, Default)]
pub struct PlaneMap<S: Real> {
    landmarks: BTreeMap<u64, PlaneLandmark<S>>,
    next_id: u64,
}

impl<S: Real> PlaneMap<S> {
    pub fn new() -> Self {
        Self { landmarks: BTreeMap::new(), next_id: 0 }
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&PlaneLandmark<S>> {
        self.landmarks.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut PlaneLandmark<S>> {
        self.landmarks.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &PlaneLandmark<S>)> {
        self.landmarks.iter()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.landmarks.keys().copied().collect()
    }

    /// Inserts a landmark under a fresh id (the `id` field is overwritten).
    pub fn insert(&mut self, mut landmark: PlaneLandmark<S>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        landmark.id = id;
        self.landmarks.insert(id, landmark);
        id
    }

    fn remove(&mut self, id: u64) -> Option<PlaneLandmark<S>> {
        self.landmarks.remove(&id)
    }
}

/// Map maintenance settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig<S: Real> {
    /// Voxel size for cloud downsampling, meters.
    pub voxel_size: S,
    /// Cloud-to-plane residual bound used by consistency checks, meters.
    pub fuse_distance: S,
    /// Covisible-frame count required to nominate a fusion pair.
    pub covisible_min_frames: u32,
    /// A map point joins a landmark's associated set only when it lies
    /// within this distance of the landmark plane, meters. Keeps one wrong
    /// frame-level match from permanently skewing the rank-test sample.
    pub point_membership_dist: S,
}

impl<S: Real> Default for MapConfig<S> {
    fn default() -> Self {
        Self {
            voxel_size: S::c(0.02),
            fuse_distance: S::c(0.05),
            covisible_min_frames: 3,
            point_membership_dist: S::c(0.01),
        }
    }
}

/// Voxel-grid downsampling: one centroid per occupied voxel, emitted in
/// voxel-key order (input-order independent).
pub fn voxel_downsample<S: Real>(points: &[Vector3<S>], voxel: S) -> Vec<Vector3<S>> {
    if voxel <= S::zero() {
        return points.to_vec();
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<S>, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / voxel).floor().as_f64() as i64,
            (p.y / voxel).floor().as_f64() as i64,
            (p.z / voxel).floor().as_f64() as i64,
        );
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    cells.values().map(|(sum, count)| sum / S::from_count(*count)).collect()
}

/// Ids of the frame-plane point associations, one list per observation.
pub type ObsPointIds = Vec<Vec<u64>>;

/// What [`insert_or_update`] did, for callers that track landmark identity.
#[derive(Debug, Clone, Default)]
pub struct InsertSummary {
    /// (observation index, landmark id) pairs merged into existing landmarks.
    pub matched: Vec<(usize, u64)>,
    /// (observation index, landmark id) pairs for newly created landmarks.
    pub created: Vec<(usize, u64)>,
}

/// Merges matched observations into their landmarks and creates new
/// landmarks from unmatched Good observations; updates covisibility for
/// every landmark seen in the frame.
#[allow(clippy::too_many_arguments)]
pub fn insert_or_update<S: Real>(
    map: &mut PlaneMap<S>,
    frame: &Frame<S>,
    matches: &AssociationResult<S>,
    obs_point_ids: &ObsPointIds,
    store: &MapPointStore<S>,
    k: &CameraIntrinsics<S>,
    proc_cfg: &ProcessingConfig<S>,
    map_cfg: &MapConfig<S>,
) -> InsertSummary {
    let mut summary = InsertSummary::default();
    let t_wc = frame.t_cw.inverse();

    let mut ordered = matches.matches.clone();
    ordered.sort_by_key(|m| m.obs_index);

    let mut matched_obs: BTreeSet<usize> = BTreeSet::new();
    for m in &ordered {
        let item = &frame.observations[m.obs_index];
        let obs = &item.observation;
        matched_obs.insert(m.obs_index);
        let Some(lm) = map.get_mut(m.landmark_id) else { continue };

        lm.cloud.extend(obs.cloud.iter().map(|p| t_wc.transform_point(p)));
        lm.cloud = voxel_downsample(&lm.cloud, map_cfg.voxel_size);
        lm.edge_points.extend(obs.edge_points.iter().map(|p| t_wc.transform_point(p)));
        lm.edge_points = voxel_downsample(&lm.edge_points, map_cfg.voxel_size);
        if let Ok(plane) = least_squares_plane(&lm.cloud) {
            lm.plane = plane;
        }
        if lm.class_id == -1 && obs.class_id != -1 {
            lm.class_id = obs.class_id;
        }
        for pid in &obs_point_ids[m.obs_index] {
            let on_plane = store
                .get(*pid)
                .map(|p| lm.plane.signed_distance(p).abs() < map_cfg.point_membership_dist)
                .unwrap_or(false);
            if on_plane {
                lm.associated_points.insert(*pid);
            }
        }
        lm.observations += 1;

        if lm.class_id != -1 {
            refresh_structure(lm, obs.det_box.as_ref(), &frame.t_cw, k, proc_cfg, frame.id);
        }
        summary.matched.push((m.obs_index, m.landmark_id));
    }

    for (idx, item) in frame.observations.iter().enumerate() {
        let obs = &item.observation;
        if matched_obs.contains(&idx) || obs.quality != PlaneQuality::Good {
            continue;
        }
        let world_plane = obs.plane.transformed(&t_wc);
        let cloud = voxel_downsample(
            &obs.cloud.iter().map(|p| t_wc.transform_point(p)).collect::<Vec<_>>(),
            map_cfg.voxel_size,
        );
        let edge_points: Vec<Vector3<S>> =
            obs.edge_points.iter().map(|p| t_wc.transform_point(p)).collect();
        let structure = PlaneStructure {
            edge_lines: item
                .structure
                .edge_lines
                .iter()
                .filter_map(|l| {
                    Line3D::new(t_wc.transform_point(&l.point), t_wc.transform_vector(&l.direction()))
                        .ok()
                })
                .collect(),
            vertices: item.structure.vertices.iter().map(|v| t_wc.transform_point(v)).collect(),
        };
        let id = map.insert(PlaneLandmark {
            id: 0,
            plane: world_plane,
            cloud,
            edge_points,
            structure,
            class_id: obs.class_id,
            covisible: BTreeMap::new(),
            observations: 1,
            associated_points: obs_point_ids[idx].iter().copied().collect(),
        });
        summary.created.push((idx, id));
    }

    // Covisibility counts landmarks sharing a frame's view, not a match:
    // a duplicate born from a missed association must still become covisible
    // with its original so fusion can nominate the pair.
    let mut seen: Vec<u64> = summary
        .matched
        .iter()
        .map(|(_, id)| *id)
        .chain(summary.created.iter().map(|(_, id)| *id))
        .collect();
    for (&id, lm) in map.iter() {
        if crate::association::project_landmark_box(lm, &frame.t_cw, k)
            .map(|b| b.area() > S::zero())
            .unwrap_or(false)
        {
            seen.push(id);
        }
    }
    seen.sort_unstable();
    seen.dedup();
    for (i, &a) in seen.iter().enumerate() {
        for &b in seen.iter().skip(i + 1) {
            if let Some(lm) = map.get_mut(a) {
                *lm.covisible.entry(b).or_insert(0) += 1;
            }
            if let Some(lm) = map.get_mut(b) {
                *lm.covisible.entry(a).or_insert(0) += 1;
            }
        }
    }

    summary
}

/// Re-extracts edge lines and vertices from the landmark's merged edge
/// points. Failures keep the previous structure.
fn refresh_structure<S: Real>(
    lm: &mut PlaneLandmark<S>,
    det_box: Option<&crate::geometry::PixelBox<S>>,
    t_cw: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    proc_cfg: &ProcessingConfig<S>,
    frame_id: u64,
) {
    let seed = frame_id.wrapping_mul(0x9e37_79b9).wrapping_add(lm.id);
    let Ok(lines) = extract_edge_lines(
        &lm.edge_points,
        &lm.plane,
        proc_cfg.line_distance,
        proc_cfg.line_min_inliers,
        proc_cfg.max_lines,
        seed,
    ) else {
        return;
    };
    if let Some(bx) = det_box {
        if let Ok(vertices) =
            extract_vertices(&lines, &lm.plane, bx, t_cw, k, &VertexConfig::from(proc_cfg))
        {
            lm.structure.vertices = vertices.to_vec();
        }
    }
    lm.structure.edge_lines = lines;
}

/// World-frame plane-plane fusion rule between two landmarks.
///
/// Geometric agreement (offset gate or edge-point gate) plus class
/// compatibility (known classes must match; `-1` pairs with anything) plus
/// in-plane patch overlap. The rank test is deliberately not consulted
/// here: accumulated landmark point sets are unions over different
/// visibility windows, so they are not the exchangeable samples the test
/// assumes — it stays a frame-to-map association gate. In params-only mode
/// only the geometric gates apply.
fn fusion_rule<S: Real>(
    keeper: &PlaneLandmark<S>,
    candidate: &PlaneLandmark<S>,
    cfg: &AssociationConfig<S>,
) -> bool {
    let cos = keeper.plane.normal().dot(&candidate.plane.normal()).abs().clamp(S::zero(), S::one());
    if cos.acos() >= cfg.beta_t {
        return false;
    }

    let offset_ok = (keeper.plane.offset() - candidate.plane.offset()).abs() < cfg.d_t;
    let edge_ok = {
        let m = candidate.edge_points.len();
        if m == 0 {
            false
        } else {
            let close = candidate
                .edge_points
                .iter()
                .filter(|p| keeper.plane.signed_distance(p).abs() < cfg.d_t_prime)
                .count();
            S::from_count(close) / S::from_count(m) > cfg.r_t
        }
    };
    if cfg.mode == AssociationMode::ParamsOnly {
        return offset_ok || edge_ok;
    }

    // Fusion is irreversible and the ambiguity regime puts distinct planes
    // inside the offset gate, so the integrated rule demands both gates:
    // the edge-point gate resolves offsets the d_T threshold cannot.
    if !(offset_ok && edge_ok) {
        return false;
    }
    // Known, different object classes never merge; an unknown class (-1,
    // e.g. a duplicate born during detection dropout) may pair with either.
    if keeper.class_id != -1 && candidate.class_id != -1 && keeper.class_id != candidate.class_id
    {
        return false;
    }
    // Plane parameters cannot separate coplanar patches (book tops at one
    // height, or a book over a table within the offset gate), so the
    // patches must actually overlap in the plane.
    in_plane_overlap(keeper, candidate) >= cfg.iou_assoc_min
}

/// IoU of the two landmarks' edge clouds as 2D bounding boxes in the
/// keeper plane's in-plane basis (the world-frame analog of the projection
/// box overlap used by frame-to-map association).
fn in_plane_overlap<S: Real>(keeper: &PlaneLandmark<S>, candidate: &PlaneLandmark<S>) -> S {
    let (e1, e2) = crate::processing::plane_basis(&keeper.plane.normal());
    let bounds = |points: &[Vector3<S>]| -> Option<crate::geometry::PixelBox<S>> {
        let coords: Vec<Vector2<S>> =
            points.iter().map(|p| Vector2::new(p.dot(&e1), p.dot(&e2))).collect();
        crate::geometry::PixelBox::from_pixels(&coords)
    };
    match (bounds(&keeper.edge_points), bounds(&candidate.edge_points)) {
        (Some(a), Some(b)) => crate::association::box_iou(&a, &b),
        _ => S::zero(),
    }
}

/// Fuses duplicate landmarks: every covisible pair passing the fusion rule
/// merges the younger landmark into the older, repeated to fixpoint.
/// Returns `(kept_id, removed_id)` per merge.
pub fn fuse_landmarks<S: Real>(
    map: &mut PlaneMap<S>,
    assoc_cfg: &AssociationConfig<S>,
    map_cfg: &MapConfig<S>,
) -> Vec<(u64, u64)> {
    let mut merged = Vec::new();
    loop {
        let ids = map.ids();
        let mut found: Option<(u64, u64)> = None;
        'scan: for (i, &a) in ids.iter().enumerate() {
            for &b in ids.iter().skip(i + 1) {
                let (keeper, candidate) = (map.get(a).unwrap(), map.get(b).unwrap());
                let shared = keeper.covisible.get(&b).copied().unwrap_or(0);
                if shared < map_cfg.covisible_min_frames {
                    continue;
                }
                if fusion_rule(keeper, candidate, assoc_cfg) {
                    found = Some((a, b));
                    break 'scan;
                }
            }
        }
        let Some((kept, removed)) = found else { break };
        merge_into(map, kept, removed, map_cfg);
        merged.push((kept, removed));
    }
    merged
}

fn merge_into<S: Real>(map: &mut PlaneMap<S>, kept: u64, removed: u64, map_cfg: &MapConfig<S>) {
    let Some(dead) = map.remove(removed) else { return };
    // Rewrite covisibility references to the removed landmark.
    let other_ids = map.ids();
    for id in other_ids {
        if id == kept {
            continue;
        }
        let lm = map.get_mut(id).unwrap();
        if let Some(count) = lm.covisible.remove(&removed) {
            *lm.covisible.entry(kept).or_insert(0) += count;
        }
    }
    let keeper = map.get_mut(kept).unwrap();
    keeper.cloud.extend(dead.cloud);
    keeper.cloud = voxel_downsample(&keeper.cloud, map_cfg.voxel_size);
    keeper.edge_points.extend(dead.edge_points);
    keeper.edge_points = voxel_downsample(&keeper.edge_points, map_cfg.voxel_size);
    if let Ok(plane) = least_squares_plane(&keeper.cloud) {
        keeper.plane = plane;
    }
    if keeper.class_id == -1 {
        keeper.class_id = dead.class_id;
    }
    keeper.observations += dead.observations;
    keeper.associated_points.extend(dead.associated_points);
    for (id, count) in dead.covisible {
        if id != kept {
            *keeper.covisible.entry(id).or_insert(0) += count;
        }
    }
    keeper.covisible.remove(&kept);
    keeper.covisible.remove(&removed);
}

/// Deterministic, serializable view of one landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSnapshot<S: Real> {
    pub id: u64,
    pub n: [S; 3],
    pub d: S,
    pub class_id: i32,
    pub vertices: Vec<[S; 3]>,
    pub num_points: usize,
    pub cloud: Vec<[S; 3]>,
}

/// Deterministic, serializable view of the whole map (landmarks by id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot<S: Real> {
    pub landmarks: Vec<LandmarkSnapshot<S>>,
}

pub fn export_map<S: Real>(map: &PlaneMap<S>) -> MapSnapshot<S> {
    let landmarks = map
        .iter()
        .map(|(&id, lm)| {
            let n = lm.plane.normal();
            LandmarkSnapshot {
                id,
                n: [n.x, n.y, n.z],
                d: lm.plane.offset(),
                class_id: lm.class_id,
                vertices: lm.structure.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
                num_points: lm.cloud.len(),
                cloud: lm.cloud.iter().map(|p| [p.x, p.y, p.z]).collect(),
            }
        })
        .collect();
    MapSnapshot { landmarks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{AssociationResult, PlaneMatch};
    use crate::processing::{extract_edge_points, PlaneObservation};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn k640() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Camera 1.5 m above the world origin looking straight down +z... the
    /// camera convention here: world plane z=0 seen at depth 1.5.
    fn top_down_pose() -> RigidTransform<f64> {
        // p_c = R p_w + t with R = I and t = (0,0,1.5): plane z_w = 0 maps to z_c = 1.5
        RigidTransform::new(Rotation3::identity(), nalgebra::Vector3::new(0.0, 0.0, 1.5))
    }

    fn patch_cloud(cx: f64, cy: f64, half: f64, z_cam: f64) -> Vec<nalgebra::Vector3<f64>> {
        let mut pts = Vec::new();
        let n = 14;
        for i in 0..=n {
            for j in 0..=n {
                pts.push(nalgebra::Vector3::new(
                    cx - half + 2.0 * half * i as f64 / n as f64,
                    cy - half + 2.0 * half * j as f64 / n as f64,
                    z_cam,
                ));
            }
        }
        pts
    }

    fn camera_obs(cx: f64, cy: f64, half: f64, z_cam: f64, class_id: i32) -> ProcessedPlane<f64> {
        let cloud = patch_cloud(cx, cy, half, z_cam);
        let plane = least_squares_plane(&cloud).unwrap();
        let edge_points = extract_edge_points(&cloud, 0.05);
        ProcessedPlane {
            observation: PlaneObservation {
                plane,
                cloud,
                edge_points,
                class_id,
                det_box: None,
                inlier_ratio: 1.0,
                quality: PlaneQuality::Good,
            },
            structure: PlaneStructure::empty(),
        }
    }

    fn frame(id: u64, items: Vec<ProcessedPlane<f64>>) -> Frame<f64> {
        Frame {
            id,
            timestamp: id as f64 * 0.1,
            t_cw: top_down_pose(),
            observations: items,
            boxes: Vec::new(),
            point_observations: Vec::new(),
            matches: None,
        }
    }

    fn empty_matches() -> AssociationResult<f64> {
        AssociationResult::default()
    }

    fn match_to(obs_index: usize, landmark_id: u64) -> AssociationResult<f64> {
        AssociationResult {
            matches: vec![PlaneMatch { obs_index, landmark_id, score: 1.0, semantic: false }],
            unmatched_frame: Vec::new(),
            traces: Vec::new(),
        }
    }

    #[test]
    fn unmatched_good_observation_becomes_landmark() {
        let mut map = PlaneMap::new();
        let f = frame(0, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
        let summary = insert_or_update(
            &mut map,
            &f,
            &empty_matches(),
            &vec![vec![]],
            &MapPointStore::new(),
            &k640(),
            &ProcessingConfig::default(),
            &MapConfig::default(),
        );
        assert_eq!(summary.created.len(), 1);
        assert_eq!(map.len(), 1);
        let lm = map.get(0).unwrap();
        assert_eq!(lm.observations, 1);
        // world plane is z = 0
        assert_relative_eq!(lm.plane.normal().z.abs(), 1.0, epsilon = 1e-9);
        assert!(lm.plane.offset().abs() < 1e-9);
    }

    #[test]
    fn matched_observation_merges_and_keeps_plane_accurate() {
        let store = MapPointStore::new();
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let k = k640();
        let f0 = frame(0, vec![camera_obs(-0.1, 0.0, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f0, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        let f1 = frame(1, vec![camera_obs(0.1, 0.05, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f1, &match_to(0, 0), &vec![vec![]], &store, &k, &cfg, &map_cfg);

        assert_eq!(map.len(), 1);
        let lm = map.get(0).unwrap();
        assert_eq!(lm.observations, 2);
        assert_relative_eq!(lm.plane.normal().z.abs(), 1.0, epsilon = 1e-6);
        assert!(lm.plane.offset().abs() < 1e-6);

        // stored plane agrees with a fresh fit of the stored cloud
        let fresh = least_squares_plane(&lm.cloud).unwrap();
        let cos = fresh.normal().dot(&lm.plane.normal()).abs().clamp(0.0, 1.0);
        assert!(cos.acos() < 1.0_f64.to_radians());
        assert!((fresh.offset() - lm.plane.offset()).abs() < 0.01);
        // 95% of the cloud within fuse_distance
        let close = lm
            .cloud
            .iter()
            .filter(|p| lm.plane.signed_distance(p).abs() < map_cfg.fuse_distance)
            .count();
        assert!(close as f64 >= 0.95 * lm.cloud.len() as f64);
    }

    #[test]
    fn class_upgrades_from_unknown() {
        let store = MapPointStore::new();
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let k = k640();
        let f0 = frame(0, vec![camera_obs(0.0, 0.0, 0.2, 1.48, -1)]);
        insert_or_update(&mut map, &f0, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        assert_eq!(map.get(0).unwrap().class_id, -1);
        let f1 = frame(1, vec![camera_obs(0.0, 0.0, 0.2, 1.48, 3)]);
        insert_or_update(&mut map, &f1, &match_to(0, 0), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        assert_eq!(map.get(0).unwrap().class_id, 3);
    }

    #[test]
    fn missed_association_duplicates_fuse_back() {
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let assoc = AssociationConfig::default();
        let store = MapPointStore::new();
        let k = k640();

        // frame 0 creates the landmark, frame 1's association is withheld →
        // duplicate; frames 2..=4 match the original so the pair accrues
        // covisibility.
        let f0 = frame(0, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f0, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        let f1 = frame(1, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f1, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        assert_eq!(map.len(), 2);
        for fid in 2..=4 {
            let f = frame(fid, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
            insert_or_update(&mut map, &f, &match_to(0, 0), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        }

        // covisibility stays symmetric
        for (&a, lm) in map.iter() {
            for (&b, &count) in &lm.covisible {
                assert_eq!(map.get(b).unwrap().covisible.get(&a), Some(&count));
            }
        }

        let merged = fuse_landmarks(&mut map, &assoc, &map_cfg);
        assert_eq!(merged, vec![(0, 1)]);
        assert_eq!(map.len(), 1);

        // idempotent: nothing left to merge
        assert!(fuse_landmarks(&mut map, &assoc, &map_cfg).is_empty());

        // empty map: no-op
        let mut empty = PlaneMap::<f64>::new();
        assert!(fuse_landmarks(&mut empty, &assoc, &map_cfg).is_empty());
    }

    #[test]
    fn fusion_blocks_distinct_classes() {
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let assoc = AssociationConfig::default();
        let store = MapPointStore::new();
        let k = k640();

        // table at camera depth 1.5 (class -1), book top 2 cm above (class 7)
        for fid in 0..4 {
            let table = camera_obs(0.0, 0.0, 0.6, 1.5, -1);
            let book = camera_obs(0.2, 0.0, 0.12, 1.48, 7);
            let f = frame(fid, vec![table, book]);
            let matches = if fid == 0 {
                empty_matches()
            } else {
                AssociationResult {
                    matches: vec![
                        PlaneMatch { obs_index: 0, landmark_id: 0, score: 1.0, semantic: false },
                        PlaneMatch { obs_index: 1, landmark_id: 1, score: 1.0, semantic: true },
                    ],
                    unmatched_frame: Vec::new(),
                    traces: Vec::new(),
                }
            };
            insert_or_update(&mut map, &f, &matches, &vec![vec![], vec![]], &store, &k, &cfg, &map_cfg);
        }
        assert_eq!(map.len(), 2);
        let covis = map.get(0).unwrap().covisible.get(&1).copied().unwrap_or(0);
        assert!(covis >= map_cfg.covisible_min_frames);

        // offsets differ by 0.02 < d_T = 0.05, yet classes differ → no fusion
        assert!(fuse_landmarks(&mut map, &assoc, &map_cfg).is_empty());
        assert_eq!(map.len(), 2);

        // params-only mode ignores the classes and wrongly merges
        let mut params_only = assoc;
        params_only.mode = AssociationMode::ParamsOnly;
        let merged = fuse_landmarks(&mut map, &params_only, &map_cfg);
        assert_eq!(merged.len(), 1);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn fusion_conserves_associated_points_and_never_reuses_ids() {
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let assoc = AssociationConfig::default();
        let store = MapPointStore::new();
        let k = k640();

        let f0 = frame(0, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f0, &empty_matches(), &vec![vec![1, 2, 3]], &store, &k, &cfg, &map_cfg);
        let f1 = frame(1, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
        insert_or_update(&mut map, &f1, &empty_matches(), &vec![vec![3, 4]], &store, &k, &cfg, &map_cfg);
        for fid in 2..=4 {
            let f = frame(fid, vec![camera_obs(0.0, 0.0, 0.4, 1.5, -1)]);
            insert_or_update(&mut map, &f, &match_to(0, 0), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        }
        let before: BTreeSet<u64> = map
            .iter()
            .flat_map(|(_, lm)| lm.associated_points.iter().copied())
            .collect();
        fuse_landmarks(&mut map, &assoc, &map_cfg);
        let after: BTreeSet<u64> = map
            .iter()
            .flat_map(|(_, lm)| lm.associated_points.iter().copied())
            .collect();
        assert_eq!(before, after);

        // a landmark created after the removal gets a fresh id
        let f5 = frame(5, vec![camera_obs(0.0, 0.0, 0.1, 0.9, -1)]);
        let summary =
            insert_or_update(&mut map, &f5, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);
        assert_eq!(summary.created[0].1, 2, "ids must not be reused after removal");
    }

    #[test]
    fn export_is_deterministic_and_round_trips() {
        let store = MapPointStore::new();
        let mut map = PlaneMap::new();
        let cfg = ProcessingConfig::default();
        let map_cfg = MapConfig::default();
        let k = k640();
        let f0 = frame(0, vec![camera_obs(0.0, 0.0, 0.3, 1.5, -1)]);
        insert_or_update(&mut map, &f0, &empty_matches(), &vec![vec![]], &store, &k, &cfg, &map_cfg);

        let snapshot = export_map(&map);
        assert_eq!(snapshot.landmarks.len(), 1);
        assert_eq!(snapshot.landmarks[0].num_points, snapshot.landmarks[0].cloud.len());

        let json = serde_json::to_string_pretty(&snapshot).unwrap();
        let parsed: MapSnapshot<f64> = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string_pretty(&parsed).unwrap();
        assert_eq!(json, json2);

        let empty = export_map(&PlaneMap::<f64>::new());
        assert!(empty.landmarks.is_empty());
    }

    #[test]
    fn voxel_downsample_is_order_independent() {
        let mut pts = patch_cloud(0.0, 0.0, 0.3, 1.5);
        let a = voxel_downsample(&pts, 0.05);
        pts.reverse();
        let b = voxel_downsample(&pts, 0.05);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        assert!(a.len() < pts.len());
    }
}
