//! Rigid-body transforms, the se(3) exponential and logarithm, and pinhole
//! cameras.
//!
//! Conventions used throughout the crate:
//!
//! * The canonical frame is z-up; spherical camera placement measures azimuth
//!   from +x towards +y.
//! * Camera frames follow the computer-vision convention: x right, y down,
//!   z along the optical axis.
//! * Image coordinates are `(column, row)` with the origin at the top-left
//!   image corner, so pixel `(j, i)` has its center at `(j + 0.5, i + 0.5)`.
//! * The field of view is vertical; focal length in pixels is
//!   `(height / 2) / tan(fov / 2)` and pixels are square.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle the exponential switches to its Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

/// A proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking that `rotation` is orthonormal with
    /// determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= 1e-9 && (det - 1.0).abs() <= 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!(
                "not a rotation: |RRᵀ - I| = {orth:e}, det = {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 16-element layout used by the JSON pose files.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Invalid(format!(
                "expected 16 matrix entries, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid("last matrix row must be 0 0 0 1".into()));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        RigidTransform::new(re_orthonormalize(&rotation), translation)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

/// Projects a nearly orthonormal matrix onto SO(3). Used when reading
/// matrices that went through decimal text.
pub fn re_orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Angle of a rotation matrix, robust near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee(&(r - r.transpose())).norm() / 2.0;
    let c = (r.trace() - 1.0) / 2.0;
    s.atan2(c)
}

/// Geodesic distance between two rotations, radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of se(3): rotation part `omega` (radians) and translation part `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }
}

/// Closed-form se(3) exponential (Rodrigues rotation plus the left Jacobian
/// applied to `v`).
pub fn exp_map(t: &Twist) -> RigidTransform {
    let theta = t.omega.norm();
    let w = hat(&t.omega);
    let w2 = w * w;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        let half = 0.5 * theta;
        let s = half.sin();
        (
            theta.sin() / theta,
            2.0 * s * s / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let jac = Matrix3::identity() + w * b + w2 * c;
    RigidTransform {
        rotation,
        translation: jac * t.v,
    }
}

/// Inverse of [`exp_map`] for rotation angles below π.
pub fn log_map(g: &RigidTransform) -> Result<Twist> {
    let r = &g.rotation;
    if r.trace() <= -1.0 + 1e-6 {
        return Err(Error::AngleNearPi);
    }
    let axis_sin = vee(&(r - r.transpose())) / 2.0;
    let theta = axis_sin.norm().atan2((r.trace() - 1.0) / 2.0);
    let omega = if theta < SMALL_ANGLE {
        axis_sin
    } else {
        axis_sin * (theta / theta.sin())
    };
    let w = hat(&omega);
    // Coefficient of ŵ² in the inverse left Jacobian: (1 - (θ/2)cot(θ/2)) / θ².
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let jac_inv = Matrix3::identity() - w * 0.5 + w * w * c;
    Ok(Twist {
        omega,
        v: jac_inv * g.translation,
    })
}

/// Pinhole intrinsics with a vertical field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) || width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "intrinsics out of range: fov {fov_deg}, {width}x{height}"
            )));
        }
        Ok(Self {
            fov_deg,
            width,
            height,
        })
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }
}

/// Extrinsics (world → camera) together with intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub extrinsics: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl CameraPose {
    pub fn camera_to_world(&self) -> RigidTransform {
        self.extrinsics.inverse()
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.extrinsics.rotation.transpose() * self.extrinsics.translation)
    }

    /// Optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.extrinsics.rotation.row(2).transpose()
    }

    pub fn with_size(mut self, width: usize, height: usize) -> Self {
        self.intrinsics.width = width;
        self.intrinsics.height = height;
        self
    }

    /// Projects a world point to continuous pixel coordinates; `None` when
    /// the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let pc = self.extrinsics.transform_point(p);
        if pc.z <= 1e-12 {
            return None;
        }
        let f = self.intrinsics.focal();
        let (cx, cy) = self.intrinsics.principal_point();
        Some([f * pc.x / pc.z + cx, f * pc.y / pc.z + cy])
    }

    /// Ray through continuous pixel coordinate `u = (column, row)`.
    pub fn ray_for_pixel(&self, u: [f64; 2]) -> Ray {
        let f = self.intrinsics.focal();
        let (cx, cy) = self.intrinsics.principal_point();
        let d_cam = Vector3::new((u[0] - cx) / f, (u[1] - cy) / f, 1.0);
        let rt = self.extrinsics.rotation.transpose();
        Ray {
            origin: self.center(),
            direction: (rt * d_cam).normalize(),
        }
    }
}

/// Free-function form of [`CameraPose::ray_for_pixel`].
pub fn ray_for_pixel(pose: &CameraPose, u: [f64; 2]) -> Ray {
    pose.ray_for_pixel(u)
}

/// Camera on a sphere around the origin, looking at the origin with +z up.
///
/// At the poles (|elevation| = 90°) the up vector falls back to +x.
pub fn camera_from_spherical(
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    fov_deg: f64,
    width: usize,
    height: usize,
) -> CameraPose {
    debug_assert!(radius > 0.0 && elevation_deg.abs() <= 90.0);
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let center = Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin()) * radius;
    let forward = -center / radius;
    let up = if elevation_deg.abs() >= 90.0 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let mut right = forward.cross(&up);
    if right.norm() < 1e-12 {
        right = forward.cross(&Vector3::x());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    CameraPose {
        extrinsics: RigidTransform {
            rotation,
            translation: -(rotation * center),
        },
        intrinsics: CameraIntrinsics {
            fov_deg,
            width,
            height,
        },
    }
}

/// JSON form: `{"world_to_camera": [16 row-major], "fov_deg", "width", "height"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPoseJson {
    pub world_to_camera: Vec<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraPose> for CameraPoseJson {
    fn from(p: &CameraPose) -> Self {
        Self {
            world_to_camera: p.extrinsics.to_row_major().to_vec(),
            fov_deg: p.intrinsics.fov_deg,
            width: p.intrinsics.width,
            height: p.intrinsics.height,
        }
    }
}

impl TryFrom<CameraPoseJson> for CameraPose {
    type Error = Error;

    fn try_from(j: CameraPoseJson) -> Result<Self> {
        Ok(CameraPose {
            extrinsics: RigidTransform::from_row_major(&j.world_to_camera)?,
            intrinsics: CameraIntrinsics::new(j.fov_deg, j.width, j.height)?,
        })
    }
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraPoseJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = CameraPoseJson::deserialize(d)?;
        CameraPose::try_from(j).map_err(serde::de::Error::custom)
    }
}
