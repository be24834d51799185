//! Rigid transforms, camera models and time-parameterized pose interpolation.
//!
//! Conventions:
//! - A [`Pose`] is `T_wc` (camera-to-world) unless a name says otherwise.
//! - Quaternions are stored scalar-last `(x, y, z, w)` and canonicalized to `w >= 0`.
//! - The push-broom sensor line lies along the camera x axis and the boresight
//!   is +z. A scanline therefore observes the `y = 0` plane of its camera frame.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("NonPositiveDepth: point depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("ColumnOutOfRange: column {column} outside sensor width {width}")]
    ColumnOutOfRange { column: f64, width: u32 },
    #[error("OutOfRange: t = {t} outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("InvalidIntrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("NonMonotonicTime: sample {0} is not strictly after its predecessor")]
    NonMonotonicTime(usize),
    #[error("TooFewSamples: a trajectory needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("InvalidQuaternion: zero or non-finite quaternion")]
    InvalidQuaternion,
}

/// Rigid transform: rotation as a unit quaternion plus a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        // already-unit inputs are kept bit-exact so text round trips are lossless
        let q = rotation.into_inner();
        let n2 = q.norm_squared();
        let q = if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON { q } else { q / n2.sqrt() };
        let rotation = canonical(UnitQuaternion::new_unchecked(q));
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Builds a pose from a scalar-last quaternion and a translation. The
    /// quaternion is normalized.
    pub fn from_xyzw(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeomError> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 || t.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::InvalidQuaternion);
        }
        Ok(Self::new(UnitQuaternion::new_unchecked(quat), Vector3::from(t)))
    }

    /// Rotation about the world z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Scalar-last quaternion components.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let c = self.rotation.coords;
        [c[0], c[1], c[2], c[3]]
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// `R * p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (radians) of `self⁻¹ · other`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Parameter-block layout used by the optimizer: `[qx, qy, qz, qw, tx, ty, tz]`.
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.quaternion_xyzw();
        let t = self.translation;
        [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64]) -> Pose {
        let quat = Quaternion::new(p[3], p[0], p[1], p[2]);
        Pose::new(
            UnitQuaternion::new_normalize(quat),
            Vector3::new(p[4], p[5], p[6]),
        )
    }
}

/// Cross-product (skew-symmetric) matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Shortest-arc spherical linear interpolation.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 0.9995 {
        let q = qa * (1.0 - s) + qb * s;
        return UnitQuaternion::new_normalize(q);
    }
    let theta = dot.min(1.0).acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - s) * theta).sin() / sin_theta;
    let wb = (s * theta).sin() / sin_theta;
    UnitQuaternion::new_normalize(qa * wa + qb * wb)
}

/// Pinhole camera with Brown–Conrady radial-tangential distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeIntrinsics {
    /// Distortion-free camera.
    pub fn ideal(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeomError::InvalidIntrinsics(
                "principal point outside the sensor".into(),
            ));
        }
        Ok(())
    }

    fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    /// Applies distortion to normalized image coordinates, returning the
    /// distorted coordinates and their Jacobian.
    pub fn distort(&self, n: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let (a, b) = (n.x, n.y);
        let r2 = a * a + b * b;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let d_radial = self.k1 + 2.0 * self.k2 * r2; // d radial / d r2
        let xd = a * radial + 2.0 * self.p1 * a * b + self.p2 * (r2 + 2.0 * a * a);
        let yd = b * radial + self.p1 * (r2 + 2.0 * b * b) + 2.0 * self.p2 * a * b;
        let dra = d_radial * 2.0 * a;
        let drb = d_radial * 2.0 * b;
        let j = Matrix2::new(
            radial + a * dra + 2.0 * self.p1 * b + 6.0 * self.p2 * a,
            a * drb + 2.0 * self.p1 * a + 2.0 * self.p2 * b,
            b * dra + 2.0 * self.p1 * a + 2.0 * self.p2 * b,
            radial + b * drb + 6.0 * self.p1 * b + 2.0 * self.p2 * a,
        );
        (Vector2::new(xd, yd), j)
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
        if p.z <= 1e-12 {
            return Err(GeomError::NonPositiveDepth(p.z));
        }
        let n = Vector2::new(p.x / p.z, p.y / p.z);
        let d = if self.has_distortion() { self.distort(&n).0 } else { n };
        Ok(Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy))
    }

    /// Projection together with its 2×3 Jacobian with respect to the camera-frame point.
    pub fn project_with_jacobian(
        &self,
        p: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeomError> {
        if p.z <= 1e-12 {
            return Err(GeomError::NonPositiveDepth(p.z));
        }
        let iz = 1.0 / p.z;
        let n = Vector2::new(p.x * iz, p.y * iz);
        let dn = Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz);
        let (d, jd) = self.distort(&n);
        let f = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let px = Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy);
        Ok((px, f * jd * dn))
    }

    /// Back-projects a pixel to the camera-frame point at depth 1, undoing
    /// distortion by fixed-point iteration.
    pub fn backproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let d = Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy);
        let mut n = d;
        if self.has_distortion() {
            for _ in 0..50 {
                let (dd, _) = self.distort(&n);
                n += d - dd;
            }
        }
        Vector3::new(n.x, n.y, 1.0)
    }
}

/// Line-scan camera: one row of `width` pixels, `band_count` spectral channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushBroomIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal offset along the line, pixels.
    pub principal: f64,
    pub width: u32,
    pub band_count: u32,
}

impl PushBroomIntrinsics {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !self.focal.is_finite() || self.focal <= 0.0 {
            return Err(GeomError::InvalidIntrinsics("focal length must be positive".into()));
        }
        if self.width < 1 || self.band_count < 1 {
            return Err(GeomError::InvalidIntrinsics(
                "width and band count must be at least 1".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.principal) {
            return Err(GeomError::InvalidIntrinsics(
                "principal offset outside the line".into(),
            ));
        }
        Ok(())
    }

    /// Unit viewing ray of column `u` in the camera frame.
    pub fn ray(&self, u: f64) -> Result<Vector3<f64>, GeomError> {
        if !(0.0..self.width as f64).contains(&u) {
            return Err(GeomError::ColumnOutOfRange {
                column: u,
                width: self.width,
            });
        }
        Ok(Vector3::new((u - self.principal) / self.focal, 0.0, 1.0).normalize())
    }

    /// Projects a camera-frame point onto the line: returns the (fractional)
    /// column and the normalized off-line coordinate `y / z`.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), GeomError> {
        if p.z <= 1e-12 {
            return Err(GeomError::NonPositiveDepth(p.z));
        }
        Ok((self.focal * p.x / p.z + self.principal, p.y / p.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose,
}

/// Time-sorted pose samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    samples: Vec<TimedPose>,
}

impl Trajectory {
    /// Validates strictly increasing, finite timestamps. An empty or
    /// single-sample trajectory is allowed but cannot be interpolated.
    pub fn new(samples: Vec<TimedPose>) -> Result<Self, GeomError> {
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() {
                return Err(GeomError::NonMonotonicTime(i));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(GeomError::NonMonotonicTime(i));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TimedPose] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.t, self.samples.last()?.t))
    }

    /// Lerp of translation and shortest-arc slerp of rotation between the
    /// bracketing samples. Sample timestamps return the sample exactly.
    pub fn interpolate(&self, t: f64) -> Result<Pose, GeomError> {
        if self.samples.len() < 2 {
            return Err(GeomError::TooFewSamples(self.samples.len()));
        }
        let (start, end) = self.span().unwrap();
        if !(t >= start && t <= end) {
            return Err(GeomError::OutOfRange { t, start, end });
        }
        let i = self.samples.partition_point(|s| s.t <= t);
        // samples[i - 1].t <= t < samples[i].t, or i == len when t == end
        let lo = &self.samples[i - 1];
        if lo.t == t || i == self.samples.len() {
            return Ok(lo.pose);
        }
        let hi = &self.samples[i];
        let s = (t - lo.t) / (hi.t - lo.t);
        let tr = lo.pose.translation * (1.0 - s) + hi.pose.translation * s;
        Ok(Pose::new(slerp(&lo.pose.rotation, &hi.pose.rotation, s), tr))
    }

    /// Largest gap between consecutive samples bracketing `t`.
    pub fn bracket_gap(&self, t: f64) -> Option<f64> {
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == 0 || i >= self.samples.len() {
            return None;
        }
        Some(self.samples[i].t - self.samples[i - 1].t)
    }
}
