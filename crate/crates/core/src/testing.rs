//! Seeded random generators shared by unit, property, and acceptance tests.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;

use crate::geometry::{Plane, RigidTransform};
use crate::scalar::Real;

pub fn uniform<S: Real, R: Rng>(rng: &mut R, lo: f64, hi: f64) -> S {
    S::c(rng.random_range(lo..hi))
}

pub fn random_unit_vector<S: Real, R: Rng>(rng: &mut R) -> Vector3<S> {
    loop {
        let v = Vector3::new(
            uniform::<S, _>(rng, -1.0, 1.0),
            uniform::<S, _>(rng, -1.0, 1.0),
            uniform::<S, _>(rng, -1.0, 1.0),
        );
        let n = v.norm();
        if n > S::c(0.1) && n < S::one() {
            return v / n;
        }
    }
}

pub fn random_rotation<S: Real, R: Rng>(rng: &mut R) -> Rotation3<S> {
    let axis = Unit::new_normalize(random_unit_vector::<S, _>(rng));
    let angle = uniform::<S, _>(rng, -3.0, 3.0);
    Rotation3::from_axis_angle(&axis, angle)
}

pub fn random_pose<S: Real, R: Rng>(rng: &mut R, translation_span: f64) -> RigidTransform<S> {
    RigidTransform::new(
        random_rotation(rng),
        Vector3::new(
            uniform::<S, _>(rng, -translation_span, translation_span),
            uniform::<S, _>(rng, -translation_span, translation_span),
            uniform::<S, _>(rng, -translation_span, translation_span),
        ),
    )
}

pub fn random_plane<S: Real, R: Rng>(rng: &mut R) -> Plane<S> {
    let n = random_unit_vector::<S, _>(rng);
    let d = uniform::<S, _>(rng, -3.0, 3.0);
    Plane::new(n, d).expect("unit normal")
}

/// Random point on `plane`, within `span` of the plane's foot point.
pub fn random_point_on_plane<S: Real, R: Rng>(
    rng: &mut R,
    plane: &Plane<S>,
    span: f64,
) -> Vector3<S> {
    let n = plane.normal();
    let foot = -n * plane.offset();
    let any = if n.x.abs() < S::c(0.9) { Vector3::x() } else { Vector3::y() };
    let e1 = (any - n * any.dot(&n)).normalize();
    let e2 = n.cross(&e1);
    foot + e1 * uniform::<S, _>(rng, -span, span) + e2 * uniform::<S, _>(rng, -span, span)
}

/// Random camera-frame point with comfortably positive depth.
pub fn random_point_in_front<S: Real, R: Rng>(rng: &mut R) -> Vector3<S> {
    Vector3::new(
        uniform::<S, _>(rng, -1.5, 1.5),
        uniform::<S, _>(rng, -1.0, 1.0),
        uniform::<S, _>(rng, 0.5, 6.0),
    )
}

/// Random evaluable factor instances for the Jacobian audit.
///
/// Instances are kept away from the parameterization's singular sets
/// (projection depth, azimuth/elevation poles, canonicalization sign
/// boundary, box-edge ties) so central differences are well defined.
pub mod factors {
    use super::*;
    use crate::factor_graph::{Factor, FactorWeights, WeightedFactor};
    use crate::geometry::{CameraIntrinsics, PixelBox, Plane};
    use nalgebra::{Unit, Vector2};

    fn safe_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
        let nz: f64 = rng.random_range(-0.8..0.8);
        let phi: f64 = rng.random_range(-3.0..3.0);
        let planar = (1.0 - nz * nz).sqrt();
        Vector3::new(planar * phi.cos(), planar * phi.sin(), nz)
    }

    fn perturb_direction<R: Rng>(n: &Vector3<f64>, rng: &mut R, max_angle: f64) -> Vector3<f64> {
        let axis = Unit::new_normalize(random_unit_vector::<f64, _>(rng));
        let angle = rng.random_range(-max_angle..max_angle);
        Rotation3::from_axis_angle(&axis, angle) * n
    }

    /// Camera-frame plane with healthy azimuth conditioning and an offset
    /// away from the sign-canon boundary.
    fn safe_camera_plane<R: Rng>(rng: &mut R) -> Plane<f64> {
        let n = safe_direction(rng);
        let d: f64 = rng.random_range(0.3..2.5);
        Plane::new(n, d).expect("unit normal")
    }

    fn rectangle_in_front<R: Rng>(
        rng: &mut R,
        k: &CameraIntrinsics<f64>,
    ) -> [Vector3<f64>; 4] {
        loop {
            let center = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.2..0.2),
                rng.random_range(1.5..3.5),
            );
            let normal = perturb_direction(&Vector3::z(), rng, 0.4);
            let (e1, e2) = crate::processing::plane_basis(&normal);
            let theta: f64 = rng.random_range(0.15..1.4);
            let a = e1 * theta.cos() + e2 * theta.sin();
            let b = -e1 * theta.sin() + e2 * theta.cos();
            let ha: f64 = rng.random_range(0.1..0.35);
            let hb: f64 = rng.random_range(0.1..0.35);
            let corners = [
                center + a * ha + b * hb,
                center - a * ha + b * hb,
                center - a * ha - b * hb,
                center + a * ha - b * hb,
            ];
            if corners.iter().any(|c| c.z < 0.4) {
                continue;
            }
            let pixels: Vec<Vector2<f64>> =
                corners.iter().map(|c| k.project(c).unwrap()).collect();
            // distinct coordinates so the active box vertex cannot switch
            // under the finite-difference step
            let mut ok = true;
            for i in 0..4 {
                for j in i + 1..4 {
                    if (pixels[i].x - pixels[j].x).abs() < 0.5
                        || (pixels[i].y - pixels[j].y).abs() < 0.5
                    {
                        ok = false;
                    }
                }
            }
            if ok {
                return corners;
            }
        }
    }

    /// Builds a random instance of the factor kind (0..6 in declaration
    /// order) together with the evaluation pose.
    pub fn random_factor<R: Rng>(
        kind: usize,
        rng: &mut R,
        k: &CameraIntrinsics<f64>,
    ) -> (WeightedFactor<f64>, RigidTransform<f64>) {
        let weights = FactorWeights::<f64>::default();
        let pose: RigidTransform<f64> = random_pose(rng, 1.0);
        let t_wc = pose.inverse();
        let (factor, weight, delta) = match kind {
            0 => {
                let p_c = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.7..0.7),
                    rng.random_range(0.6..4.0),
                );
                let u = k.project(&p_c).unwrap();
                let u_obs = Vector2::new(
                    u.x + rng.random_range(-2.0..2.0),
                    u.y + rng.random_range(-2.0..2.0),
                );
                (
                    Factor::PosePoint { u_obs, p_w: t_wc.transform_point(&p_c) },
                    weights.w_pose_point,
                    weights.huber_pose_point,
                )
            }
            1 => {
                let pred = safe_camera_plane(rng);
                let pi_w = pred.transformed(&t_wc);
                let obs_n = perturb_direction(&pred.normal(), rng, 0.04);
                let obs_d = pred.offset() + rng.random_range(-0.02..0.02);
                let pi_c = Plane::new(obs_n, obs_d).expect("unit normal");
                (
                    Factor::PosePlane { pi_c, pi_w },
                    weights.w_pose_plane,
                    weights.huber_pose_plane,
                )
            }
            2 => {
                let corners = rectangle_in_front(rng, k);
                let pixels: Vec<Vector2<f64>> =
                    corners.iter().map(|c| k.project(c).unwrap()).collect();
                let bx = PixelBox::from_pixels(&pixels).unwrap();
                let b_obs = PixelBox {
                    x_min: bx.x_min + rng.random_range(-2.0..2.0),
                    y_min: bx.y_min + rng.random_range(-2.0..2.0),
                    x_max: bx.x_max + rng.random_range(-2.0..2.0),
                    y_max: bx.y_max + rng.random_range(-2.0..2.0),
                };
                let vertices_w = [
                    t_wc.transform_point(&corners[0]),
                    t_wc.transform_point(&corners[1]),
                    t_wc.transform_point(&corners[2]),
                    t_wc.transform_point(&corners[3]),
                ];
                (
                    Factor::BoxPlane { b_obs, vertices_w },
                    weights.w_box_plane,
                    weights.huber_box_plane,
                )
            }
            3 => {
                let pi_c = safe_camera_plane(rng);
                let near = random_point_on_plane(rng, &pi_c, 0.6)
                    + pi_c.normal() * rng.random_range(-0.02..0.02);
                (
                    Factor::PointPlane { pi_c, p_w: t_wc.transform_point(&near) },
                    weights.w_point_plane,
                    weights.huber_point_plane,
                )
            }
            4 => {
                let pred = safe_direction(rng);
                let n_w = pose.rotation.inverse() * pred;
                let n_c = perturb_direction(&pred, rng, 0.04);
                (
                    Factor::PlaneParallel { n_c, n_w },
                    weights.w_parallel,
                    weights.huber_struct,
                )
            }
            _ => {
                let pred = safe_direction(rng);
                let n_w = pose.rotation.inverse() * pred;
                let rotated_n_c = perturb_direction(&pred, rng, 0.04);
                (
                    Factor::PlanePerpendicular { rotated_n_c, n_w },
                    weights.w_perpendicular,
                    weights.huber_struct,
                )
            }
        };
        (WeightedFactor { factor, weight, huber_delta: delta }, pose)
    }
}
