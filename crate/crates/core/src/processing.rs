//! Plane observation processing: re-fitting, edge points, detection-box
//! tagging, edge-line extraction, vertex extraction, and quality selection.
//!
//! This stage turns raw per-frame plane captures (cloud + boundary points)
//! into vetted observations carrying a class id and, for planes on regular
//! objects, the four vertices recovered from pairs of edge lines via the
//! minimum common perpendicular construction.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Line3D, PixelBox, Plane, RigidTransform};
use crate::scalar::Real;

/// Random-sample hypotheses tried per extracted line.
const LINE_HYPOTHESES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VertexFailure {
    #[error("no two disjoint parallel line pairs with non-parallel crossings")]
    NoParallelPairs,
    #[error("common perpendicular feet further apart than the gap threshold")]
    FootGap,
    #[error("a perpendicular foot lies too far from the plane")]
    PlaneDistance,
    #[error("a perpendicular foot projects outside the detection box")]
    OutsideBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProcessingError {
    #[error("cloud is rank-deficient or has too few consensus inliers")]
    DegenerateCloud,
    #[error("no line with enough inliers in the edge points")]
    NoLinesFound,
    #[error("lines are parallel within the configured tolerance")]
    ParallelLines,
    #[error("vertex extraction failed: {0}")]
    VertexExtraction(VertexFailure),
}

/// Observation quality decided by [`select_planes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneQuality {
    Good,
    Bad,
}

/// One processed plane observation in the camera frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneObservation<S: Real> {
    pub plane: Plane<S>,
    pub cloud: Vec<Vector3<S>>,
    pub edge_points: Vec<Vector3<S>>,
    /// Object category id; `-1` when no detection box is associated.
    pub class_id: i32,
    pub det_box: Option<PixelBox<S>>,
    pub inlier_ratio: S,
    pub quality: PlaneQuality,
}

/// Object detection box with class id and confidence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectionBox<S: Real> {
    pub bounds: PixelBox<S>,
    pub class_id: i32,
    pub score: S,
}

/// Edge lines and (0 or 4) vertices recovered for a plane.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PlaneStructure<S: Real> {
    pub edge_lines: Vec<Line3D<S>>,
    pub vertices: Vec<Vector3<S>>,
}

impl<S: Real> PlaneStructure<S> {
    pub fn empty() -> Self {
        Self { edge_lines: Vec::new(), vertices: Vec::new() }
    }

    /// True when the edge lines contain at least one parallel pair.
    pub fn has_parallel_pair(&self, parallel_dot_min: S) -> bool {
        for i in 0..self.edge_lines.len() {
            for j in i + 1..self.edge_lines.len() {
                let dot = self.edge_lines[i].direction().dot(&self.edge_lines[j].direction());
                if dot.abs() >= parallel_dot_min {
                    return true;
                }
            }
        }
        false
    }
}

/// Observation plus its recovered structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessedPlane<S: Real> {
    pub observation: PlaneObservation<S>,
    pub structure: PlaneStructure<S>,
}

/// Thresholds for the processing stage. All distances in meters, margins in
/// pixels, parallelism as absolute direction dot products.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessingConfig<S: Real> {
    pub refit_distance: S,
    pub refit_iterations: usize,
    pub edge_grid: S,
    pub iou_min: S,
    pub inbox_fraction_min: S,
    pub line_distance: S,
    pub line_min_inliers: usize,
    pub max_lines: usize,
    pub parallel_dot_min: S,
    pub parallel_dot_max: S,
    pub foot_gap_max: S,
    pub vertex_plane_distance_max: S,
    pub far_depth_max: S,
    pub inlier_ratio_min: S,
    pub edge_margin_px: S,
    pub unstructured_fraction_max: S,
}

impl<S: Real> Default for ProcessingConfig<S> {
    fn default() -> Self {
        Self {
            refit_distance: S::c(0.01),
            refit_iterations: 200,
            edge_grid: S::c(0.05),
            iou_min: S::c(0.3),
            inbox_fraction_min: S::c(0.6),
            line_distance: S::c(0.02),
            line_min_inliers: 20,
            max_lines: 8,
            parallel_dot_min: S::c(0.985),
            parallel_dot_max: S::c(0.999),
            foot_gap_max: S::c(0.03),
            vertex_plane_distance_max: S::c(0.05),
            far_depth_max: S::c(5.0),
            inlier_ratio_min: S::c(0.8),
            edge_margin_px: S::c(20.0),
            unstructured_fraction_max: S::c(0.5),
        }
    }
}

/// Result of consensus plane re-fitting.
#[derive(Debug, Clone)]
pub struct RefitResult<S: Real> {
    pub plane: Plane<S>,
    pub inlier_ratio: S,
    pub inliers: Vec<Vector3<S>>,
}

/// Scatter eigen-decomposition of a point set about its centroid.
/// Eigenvalues come out ascending.
fn scatter_eigen<S: Real>(points: &[Vector3<S>]) -> (Vector3<S>, SymmetricEigen<S, nalgebra::U3>) {
    let n = S::from_count(points.len().max(1));
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let r = p - centroid;
        scatter += r * r.transpose();
    }
    let mut eigen = SymmetricEigen::new(scatter);
    // Sort eigenpairs ascending for a deterministic layout.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[a].partial_cmp(&eigen.eigenvalues[b]).unwrap());
    let values = Vector3::new(
        eigen.eigenvalues[order[0]],
        eigen.eigenvalues[order[1]],
        eigen.eigenvalues[order[2]],
    );
    let vectors = Matrix3::from_columns(&[
        eigen.eigenvectors.column(order[0]).into_owned(),
        eigen.eigenvectors.column(order[1]).into_owned(),
        eigen.eigenvectors.column(order[2]).into_owned(),
    ]);
    eigen.eigenvalues = values;
    eigen.eigenvectors = vectors;
    (centroid, eigen)
}

/// Least-squares plane through a point set: centroid plus the smallest
/// eigenvector of the scatter matrix. Fails when the points are fewer than 3
/// or collinear (RMS transverse spread below 1e-9 m).
pub fn least_squares_plane<S: Real>(points: &[Vector3<S>]) -> Result<Plane<S>, ProcessingError> {
    if points.len() < 3 {
        return Err(ProcessingError::DegenerateCloud);
    }
    let (centroid, eigen) = scatter_eigen(points);
    let n = S::from_count(points.len());
    let mid_rms = (eigen.eigenvalues[1].max(S::zero()) / n).sqrt();
    if mid_rms < S::c(1e-9) {
        return Err(ProcessingError::DegenerateCloud);
    }
    let normal = eigen.eigenvectors.column(0).into_owned();
    Plane::from_point_normal(&centroid, &normal).map_err(|_| ProcessingError::DegenerateCloud)
}

fn plane_from_triplet<S: Real>(
    a: &Vector3<S>,
    b: &Vector3<S>,
    c: &Vector3<S>,
) -> Option<Plane<S>> {
    let normal = (b - a).cross(&(c - a));
    Plane::from_point_normal(a, &normal).ok()
}

/// Consensus plane fit: random 3-point hypotheses scored by inlier count,
/// followed by least-squares refinement on the winning inliers. Deterministic
/// for a fixed `rng_seed`.
pub fn refit_plane<S: Real>(
    cloud: &[Vector3<S>],
    distance_threshold: S,
    iterations: usize,
    rng_seed: u64,
) -> Result<RefitResult<S>, ProcessingError> {
    if cloud.len() < 3 {
        return Err(ProcessingError::DegenerateCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<(usize, Plane<S>)> = None;
    for _ in 0..iterations {
        let i = rng.random_range(0..cloud.len());
        let j = rng.random_range(0..cloud.len());
        let k = rng.random_range(0..cloud.len());
        if i == j || j == k || i == k {
            continue;
        }
        let Some(hypothesis) = plane_from_triplet(&cloud[i], &cloud[j], &cloud[k]) else {
            continue;
        };
        let count = cloud
            .iter()
            .filter(|p| hypothesis.signed_distance(p).abs() < distance_threshold)
            .count();
        if best.as_ref().is_none_or(|(best_count, _)| count > *best_count) {
            best = Some((count, hypothesis));
        }
    }
    let (count, hypothesis) = best.ok_or(ProcessingError::DegenerateCloud)?;
    if count < 3 {
        return Err(ProcessingError::DegenerateCloud);
    }
    let seed_inliers: Vec<Vector3<S>> = cloud
        .iter()
        .filter(|p| hypothesis.signed_distance(p).abs() < distance_threshold)
        .copied()
        .collect();
    let refined = least_squares_plane(&seed_inliers)?;
    let inliers: Vec<Vector3<S>> = cloud
        .iter()
        .filter(|p| refined.signed_distance(p).abs() < distance_threshold)
        .copied()
        .collect();
    if inliers.len() < 3 {
        return Err(ProcessingError::DegenerateCloud);
    }
    let plane = least_squares_plane(&inliers)?;
    let inlier_ratio = S::from_count(inliers.len()) / S::from_count(cloud.len());
    Ok(RefitResult { plane, inlier_ratio, inliers })
}

/// Deterministic in-plane orthonormal basis for a unit normal.
pub fn plane_basis<S: Real>(normal: &Vector3<S>) -> (Vector3<S>, Vector3<S>) {
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut pick = 0;
    let mut best = S::c(2.0);
    for (idx, axis) in axes.iter().enumerate() {
        let align = normal.dot(axis).abs();
        if align < best {
            best = align;
            pick = idx;
        }
    }
    let a = axes[pick];
    let e1 = (a - normal * normal.dot(&a)).normalize();
    let e2 = normal.cross(&e1);
    (e1, e2)
}

/// Boundary points of a near-planar cloud: the cloud is projected into the
/// plane's 2D frame and rasterized at `grid_resolution`; one representative
/// point (lowest input index) is returned per occupied cell with fewer than
/// 8 occupied neighbors. The output is a subset of the input.
pub fn extract_edge_points<S: Real>(
    cloud: &[Vector3<S>],
    grid_resolution: S,
) -> Vec<Vector3<S>> {
    if cloud.len() <= 1 {
        return cloud.to_vec();
    }
    let (centroid, eigen) = scatter_eigen(cloud);
    // In-plane axes are the two largest-spread directions.
    let e1 = eigen.eigenvectors.column(2).into_owned();
    let e2 = eigen.eigenvectors.column(1).into_owned();

    let cell_of = |p: &Vector3<S>| -> (i64, i64) {
        let r = p - centroid;
        let u = (r.dot(&e1) / grid_resolution).floor();
        let v = (r.dot(&e2) / grid_resolution).floor();
        (u.as_f64() as i64, v.as_f64() as i64)
    };

    let mut cells: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (idx, p) in cloud.iter().enumerate() {
        cells.entry(cell_of(p)).or_insert(idx);
    }
    let mut picked: Vec<usize> = Vec::new();
    for (&(u, v), &idx) in &cells {
        let mut neighbors = 0;
        for du in -1..=1i64 {
            for dv in -1..=1i64 {
                if du == 0 && dv == 0 {
                    continue;
                }
                if cells.contains_key(&(u + du, v + dv)) {
                    neighbors += 1;
                }
            }
        }
        if neighbors < 8 {
            picked.push(idx);
        }
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| cloud[i]).collect()
}

/// Associates a plane observation with the best-overlapping detection box.
///
/// The edge points are transformed by `pose`, projected, and bounded; the box
/// maximizing IoU among those with `IoU ≥ iou_min` and at least
/// `inbox_fraction_min` of the projected edge points inside wins. Returns the
/// winning class id, or `-1` when nothing qualifies.
pub fn associate_plane_with_box<S: Real>(
    edge_points: &[Vector3<S>],
    boxes: &[DetectionBox<S>],
    pose: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    iou_min: S,
    inbox_fraction_min: S,
) -> i32 {
    associate_plane_with_box_index(edge_points, boxes, pose, k, iou_min, inbox_fraction_min)
        .map_or(-1, |idx| boxes[idx].class_id)
}

/// Index variant of [`associate_plane_with_box`]: which detection box won.
pub fn associate_plane_with_box_index<S: Real>(
    edge_points: &[Vector3<S>],
    boxes: &[DetectionBox<S>],
    pose: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    iou_min: S,
    inbox_fraction_min: S,
) -> Option<usize> {
    let pixels: Vec<Vector2<S>> = edge_points
        .iter()
        .filter_map(|p| k.project(&pose.transform_point(p)).ok())
        .collect();
    let projection_box = PixelBox::from_pixels(&pixels)?;
    let total = S::from_count(pixels.len());
    let mut best: Option<(S, usize)> = None;
    for (idx, det) in boxes.iter().enumerate() {
        let iou = box_overlap(&projection_box, &det.bounds);
        if iou < iou_min {
            continue;
        }
        let inside = pixels.iter().filter(|px| det.bounds.contains(px)).count();
        let fraction = S::from_count(inside) / total;
        if fraction < inbox_fraction_min {
            continue;
        }
        if best.is_none_or(|(best_iou, _)| iou > best_iou) {
            best = Some((iou, idx));
        }
    }
    best.map(|(_, idx)| idx)
}

/// Intersection-over-union of two pixel boxes; 0 for disjoint or
/// degenerate-union inputs.
pub fn box_overlap<S: Real>(a: &PixelBox<S>, b: &PixelBox<S>) -> S {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(S::zero());
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        return S::zero();
    }
    inter / union
}

/// Iterated consensus line extraction from edge points.
///
/// Repeatedly fits the best 2-point hypothesis line, refines it along the
/// principal direction of its inliers (projected into the plane), removes the
/// inliers, and continues until `max_lines` is reached or no remaining line
/// gathers `min_inliers`.
pub fn extract_edge_lines<S: Real>(
    edge_points: &[Vector3<S>],
    plane: &Plane<S>,
    distance_threshold: S,
    min_inliers: usize,
    max_lines: usize,
    rng_seed: u64,
) -> Result<Vec<Line3D<S>>, ProcessingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut remaining: Vec<Vector3<S>> = edge_points.to_vec();
    let mut lines = Vec::new();
    let normal = plane.normal();

    while lines.len() < max_lines && remaining.len() >= min_inliers.max(2) {
        let mut best: Option<(usize, Line3D<S>)> = None;
        for _ in 0..LINE_HYPOTHESES {
            let i = rng.random_range(0..remaining.len());
            let j = rng.random_range(0..remaining.len());
            if i == j {
                continue;
            }
            let Ok(candidate) = Line3D::new(remaining[i], remaining[j] - remaining[i]) else {
                continue;
            };
            let count = remaining
                .iter()
                .filter(|p| candidate.distance_to_point(p) < distance_threshold)
                .count();
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, candidate));
            }
        }
        let Some((count, hypothesis)) = best else { break };
        if count < min_inliers {
            break;
        }
        // Re-fit rounds shed stray near-corner inliers that a tilted 2-point
        // hypothesis may have captured; successive rounds trim to a tighter
        // core so corner points of adjacent segments cannot hold the tilt.
        let mut refined = hypothesis;
        let half = distance_threshold * S::c(0.5);
        let quarter = distance_threshold * S::c(0.25);
        for band in [distance_threshold, half, quarter] {
            let inliers: Vec<Vector3<S>> = remaining
                .iter()
                .filter(|p| refined.distance_to_point(p) < band)
                .copied()
                .collect();
            if inliers.len() < 2 {
                break;
            }
            let (centroid, eigen) = scatter_eigen(&inliers);
            let principal = eigen.eigenvectors.column(2).into_owned();
            // Constrain the direction to the plane so every reported line is
            // orthogonal to the plane normal.
            let in_plane = principal - normal * normal.dot(&principal);
            match Line3D::new(centroid, in_plane) {
                Ok(line) => refined = line,
                Err(_) => break,
            }
        }
        let (inliers, rest): (Vec<_>, Vec<_>) = remaining
            .iter()
            .partition(|p| refined.distance_to_point(p) < distance_threshold);
        if inliers.len() < min_inliers {
            break;
        }
        lines.push(refined);
        remaining = rest.into_iter().copied().collect();
    }

    if lines.is_empty() {
        Err(ProcessingError::NoLinesFound)
    } else {
        Ok(lines)
    }
}

/// Feet of the minimum common perpendicular between two non-parallel lines.
///
/// Returns `(P_pi, P_pj)`: the feet on `li` and `lj` respectively. The
/// segment between them is orthogonal to both directions; for intersecting
/// lines the feet coincide.
pub fn common_perpendicular<S: Real>(
    li: &Line3D<S>,
    lj: &Line3D<S>,
    parallel_dot_max: S,
) -> Result<(Vector3<S>, Vector3<S>), ProcessingError> {
    let vi = li.direction();
    let vj = lj.direction();
    let a = vi.dot(&vj);
    if a.abs() >= parallel_dot_max {
        return Err(ProcessingError::ParallelLines);
    }
    let pi = li.point;
    let pj = lj.point;
    let numerator = (pi - pj + vi * (pj - pi).dot(&vi)).dot(&vj);
    let k_j = numerator / (S::one() - a * a);
    let p_pj = pj + vj * k_j;
    let p_pi = pi + vi * (p_pj - pi).dot(&vi);
    Ok((p_pi, p_pj))
}

/// Vertex-extraction thresholds, shared with [`ProcessingConfig`].
#[derive(Debug, Clone, Copy)]
pub struct VertexConfig<S: Real> {
    pub parallel_dot_min: S,
    pub parallel_dot_max: S,
    pub foot_gap_max: S,
    pub vertex_plane_distance_max: S,
}

impl<S: Real> From<&ProcessingConfig<S>> for VertexConfig<S> {
    fn from(cfg: &ProcessingConfig<S>) -> Self {
        Self {
            parallel_dot_min: cfg.parallel_dot_min,
            parallel_dot_max: cfg.parallel_dot_max,
            foot_gap_max: cfg.foot_gap_max,
            vertex_plane_distance_max: cfg.vertex_plane_distance_max,
        }
    }
}

/// Recovers the four plane vertices from two parallel pairs of edge lines.
///
/// Each of the four crossings must satisfy: (1) perpendicular feet closer
/// than `foot_gap_max`, (2) both feet within `vertex_plane_distance_max` of
/// the plane, (3) both feet projecting inside the detection box. The returned
/// vertices are crossing midpoints ordered counterclockwise about the plane
/// normal, starting from the smallest azimuth.
pub fn extract_vertices<S: Real>(
    lines: &[Line3D<S>],
    plane: &Plane<S>,
    det_box: &PixelBox<S>,
    pose: &RigidTransform<S>,
    k: &CameraIntrinsics<S>,
    cfg: &VertexConfig<S>,
) -> Result<[Vector3<S>; 4], ProcessingError> {
    let pairing = find_parallel_pairs(lines, cfg.parallel_dot_min)
        .ok_or(ProcessingError::VertexExtraction(VertexFailure::NoParallelPairs))?;
    let (pair_a, pair_b) = pairing;

    let mut vertices = Vec::with_capacity(4);
    for &ia in &[pair_a.0, pair_a.1] {
        for &ib in &[pair_b.0, pair_b.1] {
            let (foot_a, foot_b) =
                common_perpendicular(&lines[ia], &lines[ib], cfg.parallel_dot_max)?;
            if (foot_a - foot_b).norm() >= cfg.foot_gap_max {
                return Err(ProcessingError::VertexExtraction(VertexFailure::FootGap));
            }
            if plane.signed_distance(&foot_a).abs() > cfg.vertex_plane_distance_max
                || plane.signed_distance(&foot_b).abs() > cfg.vertex_plane_distance_max
            {
                return Err(ProcessingError::VertexExtraction(VertexFailure::PlaneDistance));
            }
            for foot in [&foot_a, &foot_b] {
                let inside = k
                    .project(&pose.transform_point(foot))
                    .map(|px| det_box.contains(&px))
                    .unwrap_or(false);
                if !inside {
                    return Err(ProcessingError::VertexExtraction(VertexFailure::OutsideBox));
                }
            }
            vertices.push((foot_a + foot_b) * S::c(0.5));
        }
    }

    Ok(order_vertices_ccw(&vertices, &plane.normal()))
}

/// First two vertex-disjoint parallel pairs whose four crossings are all
/// non-parallel, in lexicographic pair order.
fn find_parallel_pairs<S: Real>(
    lines: &[Line3D<S>],
    parallel_dot_min: S,
) -> Option<((usize, usize), (usize, usize))> {
    let mut parallel_pairs = Vec::new();
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            if lines[i].direction().dot(&lines[j].direction()).abs() >= parallel_dot_min {
                parallel_pairs.push((i, j));
            }
        }
    }
    for (pa_idx, &pa) in parallel_pairs.iter().enumerate() {
        for &pb in parallel_pairs.iter().skip(pa_idx + 1) {
            let indices: BTreeSet<usize> = [pa.0, pa.1, pb.0, pb.1].into_iter().collect();
            if indices.len() != 4 {
                continue;
            }
            let crossings_ok = [pa.0, pa.1].iter().all(|&a| {
                [pb.0, pb.1].iter().all(|&b| {
                    lines[a].direction().dot(&lines[b].direction()).abs() < parallel_dot_min
                })
            });
            if crossings_ok {
                return Some((pa, pb));
            }
        }
    }
    None
}

fn order_vertices_ccw<S: Real>(vertices: &[Vector3<S>], normal: &Vector3<S>) -> [Vector3<S>; 4] {
    debug_assert_eq!(vertices.len(), 4);
    let centroid = vertices.iter().fold(Vector3::zeros(), |acc, v| acc + v) / S::c(4.0);
    let (e1, e2) = plane_basis(normal);
    let mut keyed: Vec<(S, Vector3<S>)> = vertices
        .iter()
        .map(|v| {
            let r = v - centroid;
            (r.dot(&e2).atan2(r.dot(&e1)), *v)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    [keyed[0].1, keyed[1].1, keyed[2].1, keyed[3].1]
}

/// Applies the four quality criteria, setting `quality` on every observation.
///
/// A plane goes Bad when (1) its centroid depth exceeds `far_depth_max`,
/// (2) its re-fit inlier ratio is below `inlier_ratio_min`, (3) it has a
/// class id but sits near the image border or lacks a parallel line pair or
/// four vertices, or (4) too many of its edge points project into a
/// detection box of an unstructured class.
pub fn select_planes<S: Real>(
    planes: &mut [ProcessedPlane<S>],
    boxes: &[DetectionBox<S>],
    k: &CameraIntrinsics<S>,
    cfg: &ProcessingConfig<S>,
    unstructured_classes: &BTreeSet<i32>,
) {
    let identity = RigidTransform::identity();
    let unstructured_boxes: Vec<&DetectionBox<S>> =
        boxes.iter().filter(|b| unstructured_classes.contains(&b.class_id)).collect();

    for item in planes.iter_mut() {
        item.observation.quality = classify(item, &unstructured_boxes, k, cfg, &identity);
    }
}

fn classify<S: Real>(
    item: &ProcessedPlane<S>,
    unstructured_boxes: &[&DetectionBox<S>],
    k: &CameraIntrinsics<S>,
    cfg: &ProcessingConfig<S>,
    identity: &RigidTransform<S>,
) -> PlaneQuality {
    let obs = &item.observation;
    if obs.cloud.is_empty() {
        return PlaneQuality::Bad;
    }

    // (1) far away from the observation position
    let n = S::from_count(obs.cloud.len());
    let depth = obs.cloud.iter().fold(S::zero(), |acc, p| acc + p.z) / n;
    if depth > cfg.far_depth_max {
        return PlaneQuality::Bad;
    }

    // (2) weak consensus
    if obs.inlier_ratio < cfg.inlier_ratio_min {
        return PlaneQuality::Bad;
    }

    let projected: Vec<Vector2<S>> = obs
        .edge_points
        .iter()
        .filter_map(|p| k.project(&identity.transform_point(p)).ok())
        .collect();

    // (3) object plane without usable structure or hugging the border
    if obs.class_id != -1 {
        let near_border = PixelBox::from_pixels(&projected)
            .is_none_or(|bx| bx.near_image_border(k, cfg.edge_margin_px));
        if near_border
            || !item.structure.has_parallel_pair(cfg.parallel_dot_min)
            || item.structure.vertices.len() != 4
        {
            return PlaneQuality::Bad;
        }
    }

    // (4) mostly covered by an unstructured object
    if !projected.is_empty() && !unstructured_boxes.is_empty() {
        let inside = projected
            .iter()
            .filter(|px| unstructured_boxes.iter().any(|b| b.bounds.contains(px)))
            .count();
        let fraction = S::from_count(inside) / S::from_count(projected.len());
        if fraction > cfg.unstructured_fraction_max {
            return PlaneQuality::Bad;
        }
    }

    PlaneQuality::Good
}

/// Raw per-frame plane capture (camera frame) before processing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPlaneCapture<S: Real> {
    pub cloud: Vec<Vector3<S>>,
    pub edge_points: Vec<Vector3<S>>,
}

/// Full processing chain for one frame's captures.
///
/// Per capture: consensus re-fit, edge-point filtering (falling back to grid
/// extraction from the inlier cloud when the capture carries none), detection
/// box association, edge-line and vertex extraction for object planes, then
/// quality selection over the whole batch. Entries that fail re-fitting come
/// back as `None` so indices stay aligned with the input.
pub fn process_captures<S: Real>(
    captures: &[RawPlaneCapture<S>],
    boxes: &[DetectionBox<S>],
    k: &CameraIntrinsics<S>,
    cfg: &ProcessingConfig<S>,
    unstructured_classes: &BTreeSet<i32>,
    rng_seed: u64,
) -> Vec<Option<ProcessedPlane<S>>> {
    let identity = RigidTransform::identity();
    let mut out: Vec<Option<ProcessedPlane<S>>> = Vec::with_capacity(captures.len());

    for (idx, capture) in captures.iter().enumerate() {
        let seed = rng_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(idx as u64);
        let Ok(refit) =
            refit_plane(&capture.cloud, cfg.refit_distance, cfg.refit_iterations, seed)
        else {
            out.push(None);
            continue;
        };

        let mut edge_points: Vec<Vector3<S>> = capture
            .edge_points
            .iter()
            .filter(|p| refit.plane.signed_distance(p).abs() <= cfg.refit_distance)
            .copied()
            .collect();
        if edge_points.is_empty() {
            edge_points = extract_edge_points(&refit.inliers, cfg.edge_grid);
        }

        let winning_box = associate_plane_with_box_index(
            &edge_points,
            boxes,
            &identity,
            k,
            cfg.iou_min,
            cfg.inbox_fraction_min,
        );
        let class_id = winning_box.map_or(-1, |idx| boxes[idx].class_id);
        let det_box = winning_box.map(|idx| boxes[idx].bounds);

        let mut structure = PlaneStructure::empty();
        if class_id != -1 {
            if let Ok(lines) = extract_edge_lines(
                &edge_points,
                &refit.plane,
                cfg.line_distance,
                cfg.line_min_inliers,
                cfg.max_lines,
                seed ^ 0x5bd1_e995,
            ) {
                if let (Some(bx), true) = (det_box.as_ref(), lines.len() >= 2) {
                    if let Ok(vertices) = extract_vertices(
                        &lines,
                        &refit.plane,
                        bx,
                        &identity,
                        k,
                        &VertexConfig::from(cfg),
                    ) {
                        structure.vertices = vertices.to_vec();
                    }
                }
                structure.edge_lines = lines;
            }
        }

        out.push(Some(ProcessedPlane {
            observation: PlaneObservation {
                plane: refit.plane,
                cloud: refit.inliers,
                edge_points,
                class_id,
                det_box,
                inlier_ratio: refit.inlier_ratio,
                quality: PlaneQuality::Good,
            },
            structure,
        }));
    }

    let mut present: Vec<ProcessedPlane<S>> =
        out.iter().flatten().cloned().collect();
    select_planes(&mut present, boxes, k, cfg, unstructured_classes);
    let mut it = present.into_iter();
    for slot in out.iter_mut() {
        if slot.is_some() {
            *slot = it.next();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_on_z1(step: f64, extent: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        let n = (extent / step).round() as i64;
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Vector3::new(i as f64 * step, j as f64 * step, 1.0));
            }
        }
        pts
    }

    #[test]
    fn refit_exact_plane_has_full_consensus() {
        let cloud = grid_on_z1(0.075, 1.0);
        assert!(cloud.len() >= 190);
        let result = refit_plane(&cloud, 0.01, 200, 7).unwrap();
        assert_eq!(result.inlier_ratio, 1.0);
        assert_relative_eq!(result.plane.normal().z.abs(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(result.plane.offset(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn refit_rejects_uniform_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cloud = grid_on_z1(0.0715, 1.0); // 15x15 = 225… keep 200
        cloud.truncate(200);
        for _ in 0..50 {
            // offset ball centered 1.5 above the plane
            cloud.push(Vector3::new(
                testing::uniform::<f64, _>(&mut rng, -0.5, 0.5),
                testing::uniform::<f64, _>(&mut rng, -0.5, 0.5),
                2.5 + testing::uniform::<f64, _>(&mut rng, -0.5, 0.5),
            ));
        }
        let result = refit_plane(&cloud, 0.01, 200, 3).unwrap();
        let angle = result.plane.normal().z.abs().clamp(0.0, 1.0).acos();
        assert!(angle < 1e-3, "angle {angle}");
        assert!((result.plane.offset() - 1.0).abs() < 1e-3);
        assert_relative_eq!(result.inlier_ratio, 0.8, epsilon = 1e-6);
    }

    #[test]
    fn refit_collinear_cloud_is_degenerate() {
        let cloud: Vec<_> = (0..10).map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        assert_eq!(
            refit_plane(&cloud, 0.01, 200, 7).unwrap_err(),
            ProcessingError::DegenerateCloud
        );
    }

    #[test]
    fn refit_is_deterministic_and_monotone_under_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut cloud = grid_on_z1(0.1, 1.0);
        for p in cloud.iter_mut() {
            p.z += testing::uniform::<f64, _>(&mut rng, -0.004, 0.004);
        }
        let a = refit_plane(&cloud, 0.01, 200, 99).unwrap();
        let b = refit_plane(&cloud, 0.01, 200, 99).unwrap();
        assert_eq!(a.plane, b.plane);
        assert_eq!(a.inlier_ratio, b.inlier_ratio);

        let mut extended = cloud.clone();
        for _ in 0..40 {
            extended.push(Vector3::new(
                testing::uniform::<f64, _>(&mut rng, 0.0, 1.0),
                testing::uniform::<f64, _>(&mut rng, 0.0, 1.0),
                3.0 + testing::uniform::<f64, _>(&mut rng, -0.3, 0.3),
            ));
        }
        let c = refit_plane(&extended, 0.01, 200, 99).unwrap();
        assert!(c.inlier_ratio <= a.inlier_ratio + 1e-12);
    }

    #[test]
    fn edge_points_of_filled_square_lie_on_perimeter_band() {
        let cloud = grid_on_z1(0.01, 1.0);
        let edges = extract_edge_points(&cloud, 0.05);
        assert!(!edges.is_empty());
        for p in &edges {
            let dist_to_perimeter =
                p.x.min(1.0 - p.x).min(p.y).min(1.0 - p.y);
            assert!(
                dist_to_perimeter <= 0.05 + 1e-9,
                "interior point {p:?} returned as edge"
            );
        }
    }

    #[test]
    fn edge_points_single_point_is_itself() {
        let cloud = vec![Vector3::new(0.3, 0.4, 1.0)];
        assert_eq!(extract_edge_points(&cloud, 0.05), cloud);
    }

    #[test]
    fn edge_points_on_segment_all_cells_are_boundary() {
        let cloud: Vec<_> =
            (0..101).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 1.0)).collect();
        let edges = extract_edge_points(&cloud, 0.05);
        // one representative per occupied cell, every cell is boundary
        assert!(edges.len() >= 20 && edges.len() <= 22, "got {}", edges.len());
    }

    fn k640() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn box_association_picks_best_iou() {
        let k = k640();
        // Edge points of a square patch at z = 2 projecting near the center.
        let edge_points: Vec<_> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0 * std::f64::consts::TAU;
                Vector3::new(0.4 * t.cos(), 0.4 * t.sin(), 2.0)
            })
            .collect();
        let pixels: Vec<_> =
            edge_points.iter().map(|p| k.project(p).unwrap()).collect();
        let tight = PixelBox::from_pixels(&pixels).unwrap();
        let shifted = PixelBox::new(
            tight.x_min + 0.6 * tight.width(),
            tight.y_min,
            tight.x_max + 0.6 * tight.width(),
            tight.y_max,
        )
        .unwrap();
        // dilated box: all points inside, IoU ≈ area ratio ≈ 0.5
        let dilated = PixelBox::new(
            tight.x_min - 0.2 * tight.width(),
            tight.y_min - 0.2 * tight.height(),
            tight.x_max + 0.2 * tight.width(),
            tight.y_max + 0.2 * tight.height(),
        )
        .unwrap();
        let boxes = vec![
            DetectionBox { bounds: shifted, class_id: 9, score: 0.9 },
            DetectionBox { bounds: dilated, class_id: 6, score: 0.9 },
            DetectionBox { bounds: tight, class_id: 4, score: 0.9 },
        ];
        // both the dilated and the tight box qualify; the higher IoU wins
        let class = associate_plane_with_box(
            &edge_points,
            &boxes,
            &RigidTransform::identity(),
            &k,
            0.3,
            0.6,
        );
        assert_eq!(class, 4);

        assert_eq!(
            associate_plane_with_box(
                &edge_points,
                &[],
                &RigidTransform::identity(),
                &k,
                0.3,
                0.6
            ),
            -1
        );
    }

    #[test]
    fn box_overlap_examples() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(box_overlap(&a, &a), 1.0);
        let disjoint = PixelBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(box_overlap(&a, &disjoint), 0.0);
        let b = PixelBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_relative_eq!(box_overlap(&a, &b), 1.0 / 7.0, epsilon = 1e-12);
    }

    fn square_perimeter(points_per_side: usize) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..points_per_side {
            let t = i as f64 / points_per_side as f64;
            pts.push(Vector3::new(t, 0.0, 1.0));
            pts.push(Vector3::new(1.0, t, 1.0));
            pts.push(Vector3::new(1.0 - t, 1.0, 1.0));
            pts.push(Vector3::new(0.0, 1.0 - t, 1.0));
        }
        pts
    }

    #[test]
    fn edge_lines_of_square_are_four_sides() {
        let plane = Plane::from_raw([0.0, 0.0, -1.0, 1.0]).unwrap();
        let pts = square_perimeter(50);
        let lines = extract_edge_lines(&pts, &plane, 0.02, 20, 8, 5).unwrap();
        assert_eq!(lines.len(), 4);
        for line in &lines {
            assert!(line.direction().dot(&plane.normal()).abs() < 1e-9);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let dot = lines[i].direction().dot(&lines[j].direction()).abs();
                assert!(
                    !(0.001..=0.999).contains(&dot),
                    "sides must be parallel or perpendicular, dot = {dot}"
                );
            }
        }
    }

    #[test]
    fn edge_lines_circle_yields_nothing() {
        let plane = Plane::from_raw([0.0, 0.0, -1.0, 1.0]).unwrap();
        let pts: Vec<_> = (0..360)
            .map(|i| {
                let t = (i as f64).to_radians();
                Vector3::new(t.cos(), t.sin(), 1.0)
            })
            .collect();
        assert_eq!(
            extract_edge_lines(&pts, &plane, 0.02, 50, 8, 5),
            Err(ProcessingError::NoLinesFound)
        );
    }

    #[test]
    fn edge_lines_single_segment() {
        let plane = Plane::from_raw([0.0, 0.0, -1.0, 1.0]).unwrap();
        let pts: Vec<_> =
            (0..60).map(|i| Vector3::new(i as f64 * 0.01, 0.2, 1.0)).collect();
        let lines = extract_edge_lines(&pts, &plane, 0.02, 20, 8, 5).unwrap();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].direction().x.abs() > 0.999);
    }

    #[test]
    fn common_perpendicular_intersecting_and_skew() {
        let li = Line3D::new(Vector3::zeros(), Vector3::x()).unwrap();
        let lj = Line3D::new(Vector3::zeros(), Vector3::y()).unwrap();
        let (a, b) = common_perpendicular(&li, &lj, 0.999).unwrap();
        assert_relative_eq!(a, Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(b, Vector3::zeros(), epsilon = 1e-12);

        let lj = Line3D::new(Vector3::new(0.0, 0.0, 1.0), Vector3::y()).unwrap();
        let (a, b) = common_perpendicular(&li, &lj, 0.999).unwrap();
        assert_relative_eq!(a, Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(b, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!((a - b).norm(), 1.0, epsilon = 1e-12);

        let parallel = Line3D::new(Vector3::new(0.0, 1.0, 0.0), Vector3::x()).unwrap();
        assert_eq!(
            common_perpendicular(&li, &parallel, 0.999),
            Err(ProcessingError::ParallelLines)
        );
    }

    /// Independent oracle: minimize ‖(P_i + s·V_i) − (P_j + t·V_j)‖ by the
    /// normal equations of the 2-variable least-squares problem.
    fn closest_params_oracle(
        li: &Line3D<f64>,
        lj: &Line3D<f64>,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let vi = li.direction();
        let vj = lj.direction();
        let rhs_vec = lj.point - li.point;
        let gram = Matrix2::new(vi.dot(&vi), -vi.dot(&vj), -vj.dot(&vi), vj.dot(&vj));
        let rhs = nalgebra::Vector2::new(vi.dot(&rhs_vec), -vj.dot(&rhs_vec));
        let st = gram.lu().solve(&rhs).unwrap();
        (li.at(st[0]), lj.at(st[1]))
    }

    #[test]
    fn common_perpendicular_matches_least_squares_on_random_skew_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tested = 0;
        while tested < 1000 {
            let li: Line3D<f64> = Line3D::new(
                testing::random_point_in_front(&mut rng),
                testing::random_unit_vector(&mut rng),
            )
            .unwrap();
            let lj = Line3D::new(
                testing::random_point_in_front(&mut rng),
                testing::random_unit_vector(&mut rng),
            )
            .unwrap();
            if li.direction().dot(&lj.direction()).abs() >= 0.99 {
                continue;
            }
            let (a, b) = common_perpendicular(&li, &lj, 0.999).unwrap();
            let (oa, ob) = closest_params_oracle(&li, &lj);
            assert_relative_eq!(a, oa, epsilon = 1e-7);
            assert_relative_eq!(b, ob, epsilon = 1e-7);
            // orthogonality of the connecting segment
            let seg = a - b;
            assert!(seg.dot(&li.direction()).abs() < 1e-9);
            assert!(seg.dot(&lj.direction()).abs() < 1e-9);
            // symmetry under swapping the lines
            let (sb, sa) = common_perpendicular(&lj, &li, 0.999).unwrap();
            assert_relative_eq!(sa, a, epsilon = 1e-9);
            assert_relative_eq!(sb, b, epsilon = 1e-9);
            tested += 1;
        }
    }

    fn unit_square_lines(z: f64) -> Vec<Line3D<f64>> {
        vec![
            Line3D::new(Vector3::new(0.0, 0.0, z), Vector3::x()).unwrap(),
            Line3D::new(Vector3::new(0.0, 1.0, z), Vector3::x()).unwrap(),
            Line3D::new(Vector3::new(0.0, 0.0, z), Vector3::y()).unwrap(),
            Line3D::new(Vector3::new(1.0, 0.0, z), Vector3::y()).unwrap(),
        ]
    }

    const SQUARE_Z: f64 = 3.0;

    fn vertex_cfg() -> VertexConfig<f64> {
        VertexConfig {
            parallel_dot_min: 0.985,
            parallel_dot_max: 0.999,
            foot_gap_max: 0.03,
            vertex_plane_distance_max: 0.05,
        }
    }

    #[test]
    fn vertices_of_unit_square_recovered_in_ccw_order() {
        let k = k640();
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z]).unwrap();
        let lines = unit_square_lines(SQUARE_Z);
        let det_box = PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap();
        let vertices = extract_vertices(
            &lines,
            &plane,
            &det_box,
            &RigidTransform::identity(),
            &k,
            &vertex_cfg(),
        )
        .unwrap();
        let expected = [
            Vector3::new(0.0, 1.0, SQUARE_Z),
            Vector3::new(1.0, 1.0, SQUARE_Z),
            Vector3::new(1.0, 0.0, SQUARE_Z),
            Vector3::new(0.0, 0.0, SQUARE_Z),
        ];
        // counterclockwise about +z starting from smallest azimuth about the centroid
        for (got, want) in vertices.iter().zip(expected.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn vertices_fail_on_lifted_pair_with_foot_gap() {
        let k = k640();
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z]).unwrap();
        let mut lines = unit_square_lines(SQUARE_Z);
        // lift the second parallel pair 10× the gap threshold along the normal
        lines[2] = Line3D::new(Vector3::new(0.0, 0.0, SQUARE_Z + 0.3), Vector3::y()).unwrap();
        lines[3] = Line3D::new(Vector3::new(1.0, 0.0, SQUARE_Z + 0.3), Vector3::y()).unwrap();
        let det_box = PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap();
        assert_eq!(
            extract_vertices(&lines, &plane, &det_box, &RigidTransform::identity(), &k, &vertex_cfg()),
            Err(ProcessingError::VertexExtraction(VertexFailure::FootGap))
        );
    }

    #[test]
    fn vertices_fail_when_feet_leave_the_plane() {
        let k = k640();
        // same square geometry, but the claimed plane sits 1 m away
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z + 1.0]).unwrap();
        let lines = unit_square_lines(SQUARE_Z);
        let det_box = PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap();
        assert_eq!(
            extract_vertices(&lines, &plane, &det_box, &RigidTransform::identity(), &k, &vertex_cfg()),
            Err(ProcessingError::VertexExtraction(VertexFailure::PlaneDistance))
        );
    }

    #[test]
    fn vertices_fail_when_projections_leave_the_box() {
        let k = k640();
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z]).unwrap();
        let lines = unit_square_lines(SQUARE_Z);
        // box covering only the left half of the square's projection
        let det_box = PixelBox::new(0.0, 0.0, 400.0, 480.0).unwrap();
        assert_eq!(
            extract_vertices(&lines, &plane, &det_box, &RigidTransform::identity(), &k, &vertex_cfg()),
            Err(ProcessingError::VertexExtraction(VertexFailure::OutsideBox))
        );
    }

    #[test]
    fn vertices_need_two_parallel_pairs() {
        let k = k640();
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z]).unwrap();
        let lines = vec![
            Line3D::new(Vector3::new(0.0, 0.0, SQUARE_Z), Vector3::x()).unwrap(),
            Line3D::new(Vector3::new(0.0, 0.0, SQUARE_Z), Vector3::y()).unwrap(),
        ];
        let det_box = PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap();
        assert_eq!(
            extract_vertices(&lines, &plane, &det_box, &RigidTransform::identity(), &k, &vertex_cfg()),
            Err(ProcessingError::VertexExtraction(VertexFailure::NoParallelPairs))
        );
    }

    #[test]
    fn vertices_invariant_under_rigid_motion_of_all_inputs() {
        let k = k640();
        let plane = Plane::from_raw([0.0, 0.0, -1.0, SQUARE_Z]).unwrap();
        let lines = unit_square_lines(SQUARE_Z);
        let det_box = PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap();
        let identity = RigidTransform::identity();
        let base =
            extract_vertices(&lines, &plane, &det_box, &identity, &k, &vertex_cfg()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let g: RigidTransform<f64> = testing::random_pose(&mut rng, 0.5);
            let moved_lines: Vec<_> = lines
                .iter()
                .map(|l| {
                    Line3D::new(g.transform_point(&l.point), g.transform_vector(&l.direction()))
                        .unwrap()
                })
                .collect();
            let moved_plane = plane.transformed(&g);
            // camera pose compensates so projections are unchanged
            let pose = g.inverse();
            let moved = extract_vertices(
                &moved_lines,
                &moved_plane,
                &det_box,
                &pose,
                &k,
                &vertex_cfg(),
            )
            .unwrap();
            let expected: Vec<_> = base.iter().map(|v| g.transform_point(v)).collect();
            // same cyclic order, possibly rotated start
            let start = (0..4)
                .min_by(|&a, &b| {
                    (moved[a] - expected[0])
                        .norm()
                        .partial_cmp(&(moved[b] - expected[0]).norm())
                        .unwrap()
                })
                .unwrap();
            for i in 0..4 {
                assert_relative_eq!(moved[(start + i) % 4], expected[i], epsilon = 1e-6);
            }
        }
    }

    fn good_observation(class_id: i32, depth: f64) -> ProcessedPlane<f64> {
        let mut cloud = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                cloud.push(Vector3::new(
                    (i as f64 - 10.0) * 0.01,
                    (j as f64 - 10.0) * 0.01,
                    depth,
                ));
            }
        }
        let plane = Plane::from_raw([0.0, 0.0, -1.0, depth]).unwrap();
        let edge_points = extract_edge_points(&cloud, 0.02);
        ProcessedPlane {
            observation: PlaneObservation {
                plane,
                cloud,
                edge_points,
                class_id,
                det_box: None,
                inlier_ratio: 0.95,
                quality: PlaneQuality::Good,
            },
            structure: PlaneStructure::empty(),
        }
    }

    #[test]
    fn select_marks_far_planes_bad() {
        let k = k640();
        let mut planes = vec![good_observation(-1, 10.0)];
        let cfg = ProcessingConfig { far_depth_max: 5.0, ..ProcessingConfig::default() };
        select_planes(&mut planes, &[], &k, &cfg, &BTreeSet::new());
        assert_eq!(planes[0].observation.quality, PlaneQuality::Bad);
    }

    #[test]
    fn select_keeps_clean_object_plane_good() {
        let k = k640();
        let mut item = good_observation(3, 1.0);
        let square = unit_square_lines(1.0);
        item.structure.edge_lines = square.clone();
        item.structure.vertices = vec![
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
        ];
        let mut planes = vec![item];
        select_planes(&mut planes, &[], &k, &ProcessingConfig::default(), &BTreeSet::new());
        assert_eq!(planes[0].observation.quality, PlaneQuality::Good);
    }

    #[test]
    fn select_applies_unstructured_coverage_rule() {
        let k = k640();
        let item = good_observation(-1, 1.0);
        // box over the whole image: every edge point lands inside
        let boxes = vec![DetectionBox {
            bounds: PixelBox::new(0.0, 0.0, 640.0, 480.0).unwrap(),
            class_id: 63,
            score: 0.9,
        }];
        let unstructured: BTreeSet<i32> = [63].into_iter().collect();
        let mut planes = vec![item];
        select_planes(&mut planes, &boxes, &k, &ProcessingConfig::default(), &unstructured);
        assert_eq!(planes[0].observation.quality, PlaneQuality::Bad);
    }

    #[test]
    fn select_is_per_element() {
        let k = k640();
        let cfg = ProcessingConfig::default();
        let a = good_observation(-1, 1.0);
        let b = good_observation(-1, 10.0);
        let mut fwd = vec![a.clone(), b.clone()];
        let mut rev = vec![b, a];
        select_planes(&mut fwd, &[], &k, &cfg, &BTreeSet::new());
        select_planes(&mut rev, &[], &k, &cfg, &BTreeSet::new());
        assert_eq!(fwd[0].observation.quality, rev[1].observation.quality);
        assert_eq!(fwd[1].observation.quality, rev[0].observation.quality);
    }
}
