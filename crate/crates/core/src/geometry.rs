//! Rigid transforms, pinhole projection, and plane/line primitives.
//!
//! Planes are kept in Hessian form `n·p + d = 0` with a unit normal and a
//! canonical sign (`d >= 0`; lexicographically larger normal when `d == 0`),
//! so that offset comparisons between independently constructed planes are
//! meaningful. Rotations are stored as orthonormal matrices; file I/O converts
//! through unit quaternions.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Real;

/// Norm below which a direction or normal counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// `|d|` below which the plane sign is decided lexicographically.
pub const OFFSET_TIE: f64 = 1e-12;
/// Minimum camera-frame depth for projection.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("plane normal has near-zero norm")]
    DegeneratePlane,
    #[error("line direction has near-zero norm")]
    DegenerateDirection,
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("rotation matrix is not orthonormal")]
    InvalidRotation,
    #[error("pixel box has inverted extents")]
    InvalidBox,
    #[error("camera intrinsics out of range")]
    InvalidIntrinsics,
}

fn lex_less<S: Real>(a: &Vector3<S>, b: &Vector3<S>) -> bool {
    for k in 0..3 {
        if a[k] < b[k] {
            return true;
        }
        if a[k] > b[k] {
            return false;
        }
    }
    false
}

/// Infinite plane in Hessian form: a point `p` lies on the plane iff
/// `n·p + d = 0`, with `‖n‖ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane<S: Real> {
    normal: Vector3<S>,
    offset: S,
}

impl<S: Real> Plane<S> {
    /// Builds a plane from an unnormalized `(a, b, c, d)` coefficient vector
    /// describing `a·x + b·y + c·z + d = 0`.
    pub fn from_raw(coefficients: [S; 4]) -> Result<Self, GeometryError> {
        let n = Vector3::new(coefficients[0], coefficients[1], coefficients[2]);
        let norm = n.norm();
        if norm <= S::c(DEGENERATE_NORM) {
            return Err(GeometryError::DegeneratePlane);
        }
        Ok(Self::canonical(n / norm, coefficients[3] / norm))
    }

    /// Builds a plane from a (not necessarily unit) normal and offset.
    pub fn new(normal: Vector3<S>, offset: S) -> Result<Self, GeometryError> {
        Self::from_raw([normal.x, normal.y, normal.z, offset])
    }

    /// Plane through a point with the given normal direction.
    pub fn from_point_normal(
        point: &Vector3<S>,
        normal: &Vector3<S>,
    ) -> Result<Self, GeometryError> {
        let norm = normal.norm();
        if norm <= S::c(DEGENERATE_NORM) {
            return Err(GeometryError::DegeneratePlane);
        }
        let n = normal / norm;
        Ok(Self::canonical(n, -n.dot(point)))
    }

    /// Applies the sign canon to an already unit-normal pair.
    fn canonical(n: Vector3<S>, d: S) -> Self {
        let tie = S::c(OFFSET_TIE);
        let flip = if d.abs() > tie { d < S::zero() } else { lex_less(&n, &(-n)) };
        if flip {
            Self { normal: -n, offset: -d }
        } else {
            Self { normal: n, offset: d }
        }
    }

    pub fn normal(&self) -> Vector3<S> {
        self.normal
    }

    pub fn offset(&self) -> S {
        self.offset
    }

    /// Signed distance `n·p + d` from a point to the plane.
    pub fn signed_distance(&self, point: &Vector3<S>) -> S {
        self.normal.dot(point) + self.offset
    }

    /// Maps a world-frame plane into the camera frame of `t_cw`
    /// (`p_c = R·p_w + t`), re-canonicalized.
    pub fn transformed(&self, t_cw: &RigidTransform<S>) -> Plane<S> {
        let n_c = t_cw.rotation * self.normal;
        let d_c = self.offset - t_cw.translation.dot(&n_c);
        // Rotation keeps the normal unit up to rounding; renormalize anyway.
        let norm = n_c.norm();
        Self::canonical(n_c / norm, d_c / norm)
    }

    /// Minimal 3-DoF parameterization `(azimuth, elevation, offset)` with
    /// `azimuth = atan2(n_y, n_x) ∈ (−π, π]` (0 at the poles) and
    /// `elevation = asin(n_z) ∈ [−π/2, π/2]`.
    pub fn minimal_params(&self) -> (S, S, S) {
        let (phi, psi) = normal_angles(&self.normal);
        (phi, psi, self.offset)
    }
}

/// Azimuth/elevation angles of a unit direction, with the conventions of
/// [`Plane::minimal_params`].
pub fn normal_angles<S: Real>(n: &Vector3<S>) -> (S, S) {
    let phi = if n.x == S::zero() && n.y == S::zero() {
        S::zero()
    } else {
        let raw = n.y.atan2(n.x);
        if raw == -S::pi() {
            S::pi()
        } else {
            raw
        }
    };
    let one = S::one();
    let psi = n.z.clamp(-one, one).asin();
    (phi, psi)
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle<S: Real>(angle: S) -> S {
    let two_pi = S::two_pi();
    let mut a = angle;
    while a > S::pi() {
        a -= two_pi;
    }
    while a <= -S::pi() {
        a += two_pi;
    }
    a
}

/// 3D line through `point` with unit direction `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3D<S: Real> {
    pub point: Vector3<S>,
    direction: Vector3<S>,
}

impl<S: Real> Line3D<S> {
    pub fn new(point: Vector3<S>, direction: Vector3<S>) -> Result<Self, GeometryError> {
        let norm = direction.norm();
        if norm <= S::c(DEGENERATE_NORM) {
            return Err(GeometryError::DegenerateDirection);
        }
        Ok(Self { point, direction: direction / norm })
    }

    pub fn direction(&self) -> Vector3<S> {
        self.direction
    }

    /// Point at parameter `s`: `point + s·direction`.
    pub fn at(&self, s: S) -> Vector3<S> {
        self.point + self.direction * s
    }

    /// Orthogonal distance from a point to the line.
    pub fn distance_to_point(&self, p: &Vector3<S>) -> S {
        let rel = p - self.point;
        (rel - self.direction * rel.dot(&self.direction)).norm()
    }
}

/// Rigid transform `p ↦ R·p + t` with an orthonormal rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<S: Real> {
    pub rotation: Rotation3<S>,
    pub translation: Vector3<S>,
}

impl<S: Real> RigidTransform<S> {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<S>, translation: Vector3<S>) -> Self {
        Self { rotation, translation }
    }

    /// Validates orthonormality (`RᵀR = I`, `det R = +1` within `tol`).
    pub fn from_matrix(
        matrix: &Matrix3<S>,
        translation: Vector3<S>,
        tol: S,
    ) -> Result<Self, GeometryError> {
        let gram = matrix.transpose() * matrix;
        let ortho_err = (gram - Matrix3::identity()).norm();
        let det_err = (matrix.determinant() - S::one()).abs();
        if ortho_err > tol || det_err > tol {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation: Rotation3::from_matrix_unchecked(*matrix), translation })
    }

    pub fn from_quaternion(q: UnitQuaternion<S>, translation: Vector3<S>) -> Self {
        Self { rotation: q.to_rotation_matrix(), translation }
    }

    pub fn quaternion(&self) -> UnitQuaternion<S> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<S>) -> Vector3<S> {
        self.rotation * v
    }

    /// Composition: `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplicative increment by a 6-vector tangent
    /// `ξ = (ω, v)` (rotation first): `T ← (exp(ω), v) ∘ T`.
    ///
    /// The update runs through a quaternion so the stored matrix stays
    /// orthonormal after arbitrarily many increments.
    pub fn retract(&self, xi: &Vector6<S>) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let dq = UnitQuaternion::from_scaled_axis(omega);
        let q = dq * self.quaternion();
        Self {
            rotation: q.to_rotation_matrix(),
            translation: dq * self.translation + v,
        }
    }

    /// Rotation angle of `self.rotation`, in radians.
    pub fn rotation_angle(&self) -> S {
        self.quaternion().angle()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseDto<S> {
    t: [S; 3],
    /// Unit quaternion as `[x, y, z, w]` (TUM component order).
    q: [S; 4],
}

impl<S: Real + Serialize> Serialize for RigidTransform<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        let q = self.quaternion();
        PoseDto {
            t: [self.translation.x, self.translation.y, self.translation.z],
            q: [q.i, q.j, q.k, q.w],
        }
        .serialize(serializer)
    }
}

impl<'de, S: Real + Deserialize<'de>> Deserialize<'de> for RigidTransform<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let dto = PoseDto::<S>::deserialize(deserializer)?;
        let q = nalgebra::Quaternion::new(dto.q[3], dto.q[0], dto.q[1], dto.q[2]);
        if q.norm() <= S::c(DEGENERATE_NORM) {
            return Err(serde::de::Error::custom("zero quaternion"));
        }
        Ok(Self::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(dto.t[0], dto.t[1], dto.t[2]),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct PlaneDto<S> {
    n: [S; 3],
    d: S,
}

impl<S: Real + Serialize> Serialize for Plane<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        PlaneDto { n: [self.normal.x, self.normal.y, self.normal.z], d: self.offset }
            .serialize(serializer)
    }
}

impl<'de, S: Real + Deserialize<'de>> Deserialize<'de> for Plane<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let dto = PlaneDto::<S>::deserialize(deserializer)?;
        Plane::from_raw([dto.n[0], dto.n[1], dto.n[2], dto.d])
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct LineDto<S> {
    p: [S; 3],
    v: [S; 3],
}

impl<S: Real + Serialize> Serialize for Line3D<S> {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        LineDto {
            p: [self.point.x, self.point.y, self.point.z],
            v: [self.direction.x, self.direction.y, self.direction.z],
        }
        .serialize(serializer)
    }
}

impl<'de, S: Real + Deserialize<'de>> Deserialize<'de> for Line3D<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let dto = LineDto::<S>::deserialize(deserializer)?;
        Line3D::new(
            Vector3::new(dto.p[0], dto.p[1], dto.p[2]),
            Vector3::new(dto.v[0], dto.v[1], dto.v[2]),
        )
        .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// Pinhole camera intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics<S: Real> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: u32,
    pub height: u32,
}

impl<S: Real> CameraIntrinsics<S> {
    pub fn new(fx: S, fy: S, cx: S, cy: S, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let w = S::from_count(self.width as usize);
        let h = S::from_count(self.height as usize);
        if self.fx <= S::zero()
            || self.fy <= S::zero()
            || self.cx <= S::zero()
            || self.cx >= w
            || self.cy <= S::zero()
            || self.cy >= h
        {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixels: `u = fx·x/z + cx`,
    /// `v = fy·y/z + cy`. Fails when `z ≤ 1e-6`.
    pub fn project(&self, p_c: &Vector3<S>) -> Result<Vector2<S>, GeometryError> {
        if p_c.z <= S::c(MIN_DEPTH) {
            return Err(GeometryError::BehindCamera);
        }
        Ok(Vector2::new(
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        ))
    }

    pub fn contains_pixel(&self, u: &Vector2<S>) -> bool {
        u.x >= S::zero()
            && u.y >= S::zero()
            && u.x <= S::from_count(self.width as usize)
            && u.y <= S::from_count(self.height as usize)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelBox<S: Real> {
    pub x_min: S,
    pub y_min: S,
    pub x_max: S,
    pub y_max: S,
}

impl<S: Real> PixelBox<S> {
    pub fn new(x_min: S, y_min: S, x_max: S, y_max: S) -> Result<Self, GeometryError> {
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox);
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Bounding box of a non-empty pixel set.
    pub fn from_pixels<'a>(pixels: impl IntoIterator<Item = &'a Vector2<S>>) -> Option<Self>
    where
        S: 'a,
    {
        let mut iter = pixels.into_iter();
        let first = iter.next()?;
        let mut bx = Self { x_min: first.x, y_min: first.y, x_max: first.x, y_max: first.y };
        for p in iter {
            bx.x_min = bx.x_min.min(p.x);
            bx.y_min = bx.y_min.min(p.y);
            bx.x_max = bx.x_max.max(p.x);
            bx.y_max = bx.y_max.max(p.y);
        }
        Some(bx)
    }

    pub fn width(&self) -> S {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> S {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn contains(&self, p: &Vector2<S>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Clips to `[0, width] × [0, height]`; degenerates to a border-touching
    /// empty box rather than failing.
    pub fn clipped_to_image(&self, k: &CameraIntrinsics<S>) -> Self {
        let w = S::from_count(k.width as usize);
        let h = S::from_count(k.height as usize);
        let x_min = self.x_min.clamp(S::zero(), w);
        let x_max = self.x_max.clamp(S::zero(), w);
        let y_min = self.y_min.clamp(S::zero(), h);
        let y_max = self.y_max.clamp(S::zero(), h);
        Self { x_min, y_min, x_max: x_max.max(x_min), y_max: y_max.max(y_min) }
    }

    /// True when every edge is within `margin` of the corresponding image
    /// border or beyond it.
    pub fn near_image_border(&self, k: &CameraIntrinsics<S>, margin: S) -> bool {
        let w = S::from_count(k.width as usize);
        let h = S::from_count(k.height as usize);
        self.x_min < margin
            || self.y_min < margin
            || self.x_max > w - margin
            || self.y_max > h - margin
    }
}
