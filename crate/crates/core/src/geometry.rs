//! Rigid-body algebra: vectors, unit quaternions and SE(3) transforms.
//!
//! Quaternions are kept in canonical form (`w >= 0`) so that equality,
//! interpolation and serialization are deterministic across the double cover.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A point or direction in 3D. Components are meters unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction; the zero vector maps to itself.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn component_min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn lerp(self, o: Vec3, alpha: f64) -> Vec3 {
        self * (1.0 - alpha) + o * alpha
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Any unit vector orthogonal to `self` (which must be non-zero).
    pub fn any_orthogonal(self) -> Vec3 {
        let a = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        self.cross(a).normalized()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// A rotation stored as a unit quaternion with non-negative scalar part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = String;
    fn try_from(a: [f64; 4]) -> Result<Self, String> {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion {a:?} is not unit length"));
        }
        Ok(UnitQuaternion::from_wxyz(a[0], a[1], a[2], a[3]))
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> [f64; 4] {
        q.wxyz()
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and canonicalizes an arbitrary non-zero quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = if (n - 1.0).abs() < 1e-15 { (w, x, y, z) } else { (w / n, x / n, y / n, z / n) };
        Self { w, x, y, z }.canonical()
    }

    fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            // w == 0: pick the sign making the first non-zero vector component positive
            [self.x, self.y, self.z].into_iter().find(|c| *c != 0.0).is_some_and(|c| c < 0.0)
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector_part(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_wxyz(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::X, angle)
    }
    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::Y, angle)
    }
    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::Z, angle)
    }

    /// Smallest rotation taking direction `from` onto direction `to`.
    pub fn from_two_vectors(from: Vec3, to: Vec3) -> Self {
        let a = from.normalized();
        let b = to.normalized();
        let d = a.dot(b);
        if d < -1.0 + 1e-12 {
            return Self::from_axis_angle(a.any_orthogonal(), PI);
        }
        let c = a.cross(b);
        Self::from_wxyz(1.0 + d, c.x, c.y, c.z)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector_part().norm().atan2(self.w.abs())
    }

    /// Hamilton product: `self * o` rotates by `o` first, then by `self`.
    pub fn compose(&self, o: &UnitQuaternion) -> UnitQuaternion {
        let (a, b) = (self, o);
        Self::from_wxyz(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(&self) -> UnitQuaternion {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }.canonical()
    }

    pub fn dot(&self, o: &UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = self.vector_part();
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Quaternion of a row-major rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::from_wxyz(0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Self::from_wxyz((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Self::from_wxyz((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Self::from_wxyz((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Haar-uniform rotation via the subgroup algorithm (three uniform scalars).
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    UnitQuaternion::from_wxyz(b * c3, a * s2, a * c2, b * s3)
}

/// Constant angular velocity interpolation along the shorter arc.
///
/// When the two rotations are exactly a quarter turn apart in quaternion
/// space (dot product zero) `q1` is used with its canonical sign.
pub fn slerp(q0: &UnitQuaternion, q1: &UnitQuaternion, alpha: f64) -> UnitQuaternion {
    if alpha <= 0.0 {
        return *q0;
    }
    if alpha >= 1.0 {
        return *q1;
    }
    let mut d = q0.dot(q1);
    let mut b = q1.wxyz();
    if d < 0.0 {
        d = -d;
        b = b.map(|c| -c);
    }
    let a = q0.wxyz();
    if d > 1.0 - 1e-12 {
        let r: Vec<f64> = (0..4).map(|i| a[i] * (1.0 - alpha) + b[i] * alpha).collect();
        return UnitQuaternion::from_wxyz(r[0], r[1], r[2], r[3]);
    }
    // half-angle between the quaternions, computed stably
    let diff = [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]];
    let sum = [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]];
    let nd = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ns = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    let theta = 2.0 * nd.atan2(ns);
    let st = theta.sin();
    let ka = ((1.0 - alpha) * theta).sin() / st;
    let kb = (alpha * theta).sin() / st;
    UnitQuaternion::from_wxyz(
        ka * a[0] + kb * b[0],
        ka * a[1] + kb * b[1],
        ka * a[2] + kb * b[2],
        ka * a[3] + kb * b[3],
    )
}

/// Angle of the relative rotation, `2·arccos(|⟨q0,q1⟩|)`, in `[0, π]`.
///
/// Evaluated through `atan2` on the relative quaternion, which keeps full
/// precision for nearly identical rotations.
pub fn geodesic_distance(q0: &UnitQuaternion, q1: &UnitQuaternion) -> f64 {
    q0.inverse().compose(q1).angle()
}

/// Decomposes `q = swing ∘ twist` where `twist` rotates purely about `axis`.
pub fn swing_twist(q: &UnitQuaternion, axis: Vec3) -> (UnitQuaternion, UnitQuaternion) {
    let a = axis.normalized();
    let p = a * q.vector_part().dot(a);
    let n = (q.w() * q.w() + p.norm_squared()).sqrt();
    let twist = if n < 1e-12 { UnitQuaternion::IDENTITY } else { UnitQuaternion::from_wxyz(q.w(), p.x, p.y, p.z) };
    let swing = q.compose(&twist.inverse());
    (swing, twist)
}

/// Signed rotation angle of `q` about `axis`, in `(-π, π]`.
pub fn twist_angle(q: &UnitQuaternion, axis: Vec3) -> f64 {
    let (_, twist) = swing_twist(q, axis);
    let s = twist.vector_part().dot(axis.normalized());
    2.0 * s.atan2(twist.w())
}

/// A proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: UnitQuaternion::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_rotation(rotation: UnitQuaternion) -> Self {
        Self::new(rotation, Vec3::ZERO)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, translation)
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform { rotation: r, translation: -r.rotate(self.translation) }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.is_finite()
    }
}

/// Translation interpolated linearly, rotation by [`slerp`].
pub fn interpolate_transform(a: &RigidTransform, b: &RigidTransform, alpha: f64) -> RigidTransform {
    if alpha <= 0.0 {
        return *a;
    }
    if alpha >= 1.0 {
        return *b;
    }
    RigidTransform {
        rotation: slerp(&a.rotation, &b.rotation, alpha),
        translation: a.translation.lerp(b.translation, alpha),
    }
}

/// Rotation error and translation error between two transforms.
pub fn transform_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    (geodesic_distance(&a.rotation, &b.rotation), a.translation.distance(b.translation))
}
