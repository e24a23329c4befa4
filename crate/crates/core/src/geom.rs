//! Rigid-body and pinhole-camera geometry.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`. Camera frames are
//! right-handed with X right, Y down, Z forward.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
const DRIFT_TOL: f64 = 1e-12;

/// A proper rotation stored as a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("rotation", "non-finite entry"));
        }
        let drift = orthonormality_drift(&m);
        if drift > ORTHONORMAL_TOL {
            return Err(Error::validation(
                "rotation",
                format!("not orthonormal (max |RtR - I| = {drift:e})"),
            ));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::validation(
                "rotation",
                format!("determinant {det} != 1"),
            ));
        }
        Ok(RotationMatrix(m))
    }

    /// Closest rotation to `m` in the Frobenius sense.
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd with u");
        let v_t = svd.v_t.expect("svd with v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        RotationMatrix(u * d * v_t)
    }

    /// Rotation by `|axis_angle|` radians about `axis_angle / |axis_angle|`.
    pub fn from_axis_angle(axis_angle: &Vec3) -> Self {
        RotationMatrix(Rotation3::new(*axis_angle).into_inner())
    }

    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        RotationMatrix(Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner())
    }

    pub fn about_z(angle: f64) -> Self {
        Self::about_axis(&Vec3::z(), angle)
    }

    pub fn to_axis_angle(&self) -> Vec3 {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        // acos is ill-conditioned near 0; use the skew part for small angles.
        let skew = Vec3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        );
        let sin = 0.5 * skew.norm();
        let cos = 0.5 * (rel.trace() - 1.0);
        sin.atan2(cos)
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = nalgebra::UnitQuaternion::from_matrix(&self.0);
        let c = q.coords; // (x, y, z, w)
        let s = if c.w < 0.0 { -1.0 } else { 1.0 };
        [s * c.w, s * c.x, s * c.y, s * c.z]
    }

    pub fn from_quaternion(wxyz: [f64; 4]) -> Self {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        ));
        RotationMatrix(q.to_rotation_matrix().into_inner())
    }

    fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        let m = self.0 * rhs.0;
        if orthonormality_drift(&m) > DRIFT_TOL {
            RotationMatrix::nearest(&m)
        } else {
            RotationMatrix(m)
        }
    }
}

impl std::ops::Mul<Vec3> for RotationMatrix {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

fn orthonormality_drift(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

impl Serialize for RotationMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RotationMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(deserializer)?;
        RotationMatrix::from_matrix(Matrix3::from_row_slice(&v)).map_err(serde::de::Error::custom)
    }
}

/// Rigid transform. Used world-to-camera throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: RotationMatrix,
    #[serde(with = "vec3_serde")]
    pub translation: Vec3,
}

impl PoseSE3 {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(RotationMatrix::identity(), t)
    }

    /// `self ∘ other`: maps `x` to `self(other(x))`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.0 * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation.0 * p + self.translation
    }

    /// Camera centre in world coordinates for a world-to-camera pose.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.0.transpose() * self.translation)
    }

    /// World-to-camera pose of a camera at `center` whose camera-to-world
    /// rotation is `cam_to_world`.
    pub fn from_camera_center(cam_to_world: RotationMatrix, center: Vec3) -> PoseSE3 {
        let r = cam_to_world.transpose();
        PoseSE3::new(r, -(r.0 * center))
    }

    /// Relative motion taking camera `a` coordinates to camera `b` coordinates,
    /// `b ∘ a⁻¹`.
    pub fn relative(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
        b.compose(&a.inverse())
    }
}

pub(crate) mod vec3_serde {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}

pub(crate) mod vec2_serde {
    use super::Vec2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec2, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec2, D::Error> {
        let a = <[f64; 2]>::deserialize(d)?;
        Ok(Vec2::new(a[0], a[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return Err(Error::validation("fx", "must be finite and > 0"));
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::validation("fy", "must be finite and > 0"));
        }
        if !(self.cx > 0.0 && self.cx < f64::from(self.width)) {
            return Err(Error::validation(
                "cx",
                "must lie strictly inside (0, width)",
            ));
        }
        if !(self.cy > 0.0 && self.cy < f64::from(self.height)) {
            return Err(Error::validation(
                "cy",
                "must lie strictly inside (0, height)",
            ));
        }
        Ok(())
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, xy: &Vec2) -> Vec2 {
        Vec2::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y < f64::from(self.height)
    }

    /// Camera-frame point at `depth` (its Z coordinate) seen at `pixel`.
    pub fn backproject(&self, pixel: &Vec2, depth: f64) -> Vec3 {
        let n = self.normalize(pixel);
        Vec3::new(n.x * depth, n.y * depth, depth)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates (possibly outside the image) and camera-frame depth.
    InFront {
        pixel: Vec2,
        depth: f64,
    },
    BehindCamera,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vec2> {
        match self {
            Projection::InFront { pixel, .. } => Some(*pixel),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project(
    intr: &CameraIntrinsics,
    pose_world_to_cam: &PoseSE3,
    point_world: &Vec3,
) -> Projection {
    project_camera_point(intr, &pose_world_to_cam.transform(point_world))
}

pub fn project_camera_point(intr: &CameraIntrinsics, p: &Vec3) -> Projection {
    if p.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::InFront {
        pixel: Vec2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy),
        depth: p.z,
    }
}

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
