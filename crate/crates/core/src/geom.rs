//! Rotation and rigid-pose algebra.
//!
//! Poses are world-to-camera extrinsics: `x_cam = R * x_world + t`, so the
//! camera center is `c = -Rᵀ t`. `compose(a, b)` applies `b` first and then
//! `a`, and `relative_pose(a, b) = b ∘ a⁻¹` is the pose of camera `b`
//! expressed with camera `a` as the world frame, which gives
//! `compose(relative_pose(a, b), a) == b`.
//!
//! Quaternions are stored as `(w, x, y, z)` and kept on the `w ≥ 0`
//! hemisphere so that component-wise comparisons are meaningful.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on `‖q‖ − 1` accepted by [`Quaternion::to_rotation_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Tolerance on orthonormality / determinant accepted by [`Quaternion::from_rotation_matrix`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;
/// Translations shorter than this carry no direction.
pub const DIRECTION_EPS: f64 = 1e-9;
/// Mean center distance below which [`normalize_poses`] leaves poses untouched.
pub const SCALE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Scales to unit norm. Fails on zero or non-finite input.
    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n < f64::MIN_POSITIVE {
            return Err(Error::precondition(format!(
                "cannot normalize quaternion with norm {n}"
            )));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Flips sign so that `w > 0`, or for `w == 0` the first nonzero of `x, y, z` is positive.
    pub fn canonical(self) -> Self {
        let lead = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|v| *v != 0.0)
            .unwrap_or(0.0);
        if lead < 0.0 {
            self.neg()
        } else {
            self
        }
    }

    /// Hamilton product `self ⊗ o`, i.e. rotation `o` followed by `self`.
    pub fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < f64::MIN_POSITIVE || !n.is_finite() {
            return Err(Error::precondition("axis must be nonzero and finite"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Quaternion::new(c, s * a.x, s * a.y, s * a.z).canonical())
    }

    /// Exponential map of a rotation vector (axis · angle in radians).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        let angle = v.norm();
        if angle < 1e-300 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = v / angle;
        Quaternion::new(c, s * a.x, s * a.y, s * a.z).canonical()
    }

    /// Uniformly distributed rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q = Quaternion::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            if q.norm() > 1e-6 {
                return q.normalize().expect("nonzero").canonical();
            }
        }
    }

    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>> {
        quat_to_rot(self)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Result<Self> {
        rot_to_quat(r)
    }

    /// Geodesic angle to `o` in degrees, `2·acos(|⟨a,b⟩|)` evaluated stably.
    pub fn angle_to_deg(&self, o: &Quaternion) -> f64 {
        let rel = self.conjugate().mul(o);
        let v = (rel.x * rel.x + rel.y * rel.y + rel.z * rel.z).sqrt();
        (2.0 * v.atan2(rel.w.abs())).to_degrees()
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rot(q: &Quaternion) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::precondition(format!(
            "quaternion norm {n} is not unit"
        )));
    }
    let Quaternion { w, x, y, z } = *q;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::precondition("rotation has non-finite entries"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::precondition(format!(
            "matrix is not a rotation (‖RᵀR − I‖∞ = {ortho:e}, det = {det})"
        )));
    }
    Ok(())
}

/// Canonical-hemisphere quaternion of a rotation matrix (Shepperd's method).
pub fn rot_to_quat(r: &Matrix3<f64>) -> Result<Quaternion> {
    check_rotation(r)?;
    let m = |i: usize, j: usize| r[(i, j)];
    let trace = m(0, 0) + m(1, 1) + m(2, 2);
    let q = if trace > 0.0 {
        let s = 2.0 * (trace + 1.0).sqrt();
        Quaternion::new(
            0.25 * s,
            (m(2, 1) - m(1, 2)) / s,
            (m(0, 2) - m(2, 0)) / s,
            (m(1, 0) - m(0, 1)) / s,
        )
    } else if m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2) {
        let s = 2.0 * (1.0 + m(0, 0) - m(1, 1) - m(2, 2)).sqrt();
        Quaternion::new(
            (m(2, 1) - m(1, 2)) / s,
            0.25 * s,
            (m(0, 1) + m(1, 0)) / s,
            (m(0, 2) + m(2, 0)) / s,
        )
    } else if m(1, 1) > m(2, 2) {
        let s = 2.0 * (1.0 + m(1, 1) - m(0, 0) - m(2, 2)).sqrt();
        Quaternion::new(
            (m(0, 2) - m(2, 0)) / s,
            (m(0, 1) + m(1, 0)) / s,
            0.25 * s,
            (m(1, 2) + m(2, 1)) / s,
        )
    } else {
        let s = 2.0 * (1.0 + m(2, 2) - m(0, 0) - m(1, 1)).sqrt();
        Quaternion::new(
            (m(1, 0) - m(0, 1)) / s,
            (m(0, 2) + m(2, 0)) / s,
            (m(1, 2) + m(2, 1)) / s,
            0.25 * s,
        )
    };
    Ok(q.normalize()?.canonical())
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, normalizing and canonicalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(Self {
            rotation: rotation.normalize()?.canonical(),
            translation,
        })
    }

    pub fn from_rt(r: &Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        Self::new(rot_to_quat(r)?, t)
    }

    /// Pose of a camera at world position `center` with world-to-camera rotation `r`.
    pub fn from_center(r: &Matrix3<f64>, center: &Vector3<f64>) -> Result<Self> {
        Self::from_rt(r, -(r * center))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rot(&self.rotation).expect("pose rotation is unit by construction")
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }
}

/// `a ∘ b`: applies `b`, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let rotation = a
        .rotation
        .mul(&b.rotation)
        .normalize()
        .expect("product of unit quaternions")
        .canonical();
    Pose {
        rotation,
        translation: a.rotation_matrix() * b.translation + a.translation,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let r_inv = p.rotation.conjugate().canonical();
    let rt = p.rotation_matrix().transpose();
    Pose {
        rotation: r_inv,
        translation: -(rt * p.translation),
    }
}

/// Pose of camera `b` expressed in camera `a`'s frame: `b ∘ a⁻¹`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    compose(b, &inverse(a))
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
///
/// Evaluates `arccos((tr(RaᵀRb) − 1) / 2)` through `atan2` of the sine and
/// cosine parts, which stays accurate near 0° and 180°.
pub fn rotation_angle_error(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let m = ra.transpose() * rb;
    let cos2 = m.trace() - 1.0;
    let sin2 = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm();
    sin2.atan2(cos2).to_degrees().clamp(0.0, 180.0)
}

/// Angle between two translation directions in degrees.
///
/// Both shorter than [`DIRECTION_EPS`] gives 0°; exactly one gives 180°.
pub fn translation_angle_error(ta: &Vector3<f64>, tb: &Vector3<f64>) -> f64 {
    let (na, nb) = (ta.norm(), tb.norm());
    match (na < DIRECTION_EPS, nb < DIRECTION_EPS) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 180.0,
        (false, false) => {
            let cos = ta.dot(tb);
            let sin = ta.cross(tb).norm();
            sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
        }
    }
}

/// Row-major `[R | t]`: nine rotation entries followed by the translation.
pub fn flatten_pose(p: &Pose) -> [f64; 12] {
    let r = p.rotation_matrix();
    let mut out = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
        out[9 + i] = p.translation[i];
    }
    out
}

pub fn unflatten_pose(v: &[f64; 12]) -> Result<Pose> {
    let r = Matrix3::from_row_slice(&v[..9]);
    Pose::from_rt(&r, Vector3::new(v[9], v[10], v[11]))
}

/// Divides every translation by the mean camera-center distance `s`.
///
/// Poses are expected relative to the first frame. When `s` falls below
/// [`SCALE_EPS`] the poses are returned unchanged with `s = 1`.
pub fn normalize_poses(poses: &[Pose]) -> Result<(Vec<Pose>, f64)> {
    if poses.is_empty() {
        return Err(Error::precondition("normalize_poses needs at least one pose"));
    }
    let s = poses.iter().map(|p| p.center().norm()).sum::<f64>() / poses.len() as f64;
    if !s.is_finite() {
        return Err(Error::NonFinite("pose scale".into()));
    }
    if s < SCALE_EPS {
        return Ok((poses.to_vec(), 1.0));
    }
    Ok((scale_poses(poses, 1.0 / s), s))
}

/// Multiplies every translation by `factor`.
pub fn scale_poses(poses: &[Pose], factor: f64) -> Vec<Pose> {
    poses
        .iter()
        .map(|p| p.with_translation(p.translation * factor))
        .collect()
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn new(scale: f64, rotation: Quaternion, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::precondition(format!("Sim3 scale must be positive, got {scale}")));
        }
        Ok(Self {
            scale,
            rotation: rotation.normalize()?.canonical(),
            translation,
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rot(&self.rotation).expect("unit by construction")
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation_matrix() * p) + self.translation
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            q: self.rotation.to_array(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        let q = Quaternion::from_array(r.q);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(serde::de::Error::custom(format!(
                "pose quaternion has norm {n}"
            )));
        }
        let t = Vector3::from(r.t);
        if !t.iter().all(|v| v.is_finite()) {
            return Err(serde::de::Error::custom("pose translation is not finite"));
        }
        // Stored values are kept verbatim so that files round-trip bit-exactly.
        Ok(Pose {
            rotation: q,
            translation: t,
        })
    }
}
