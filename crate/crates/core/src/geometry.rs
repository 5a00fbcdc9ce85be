//! Pinhole projection, rigid transforms and ground-plane ray intersection.
//!
//! All coordinates live in the rectified camera frame: x right, y down,
//! z forward. "Distance" everywhere in this crate is the z coordinate.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Smallest homogeneous scale accepted by [`project_point`].
pub const MIN_HOMOGENEOUS_SCALE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate projection: homogeneous scale {0:e} is too close to zero")]
    DegenerateProjection(f64),
    #[error("pixel ray does not hit the ground plane (at or above the horizon)")]
    AboveHorizon,
    #[error("rotation is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("intrinsic matrix is not invertible")]
    SingularIntrinsics,
    #[error("image dimensions must be positive, got {0}x{1}")]
    BadImageSize(u32, u32),
}

/// Image-plane position in pixels. Projections may land outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance_to(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_inside(&self, width: u32, height: u32) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u < width as f64 && self.v < height as f64
    }
}

/// 3×4 camera matrix together with the image size it maps into.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub entries: Matrix3x4<f64>,
    pub image_width: u32,
    pub image_height: u32,
}

impl ProjectionMatrix {
    pub fn new(
        entries: Matrix3x4<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self, GeometryError> {
        if image_width == 0 || image_height == 0 {
            return Err(GeometryError::BadImageSize(image_width, image_height));
        }
        Ok(Self {
            entries,
            image_width,
            image_height,
        })
    }

    /// `[K | 0]`.
    pub fn from_intrinsics(
        k: &Matrix3<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self, GeometryError> {
        let mut entries = Matrix3x4::zeros();
        entries.fixed_view_mut::<3, 3>(0, 0).copy_from(k);
        Self::new(entries, image_width, image_height)
    }

    /// Left 3×3 block. Equals the intrinsics when the fourth column is a
    /// pure translation offset (KITTI's P2).
    pub fn intrinsics(&self) -> Matrix3<f64> {
        self.entries.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.entries[(r, c)];
            }
        }
        out
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !deviation.is_finite() || deviation > Self::ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotOrthonormal(deviation));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Result<Self, GeometryError> {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Transform that applies `self` first, then `next`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// 3×4 `[R | t]`, the layout used by calibration files.
    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Rotation by `angle` about the camera y axis (KITTI `rotation_y` convention).
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation by `angle` about the camera x axis. Positive pitch tilts the
/// optical axis towards the ground.
pub fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Projects a camera-frame point to pixels. The perspective divide is always
/// applied.
pub fn project_point(p: &ProjectionMatrix, x: &Point3) -> Result<Pixel, GeometryError> {
    project_homogeneous(p, &x.to_homogeneous())
}

/// Projects an arbitrary homogeneous 4-vector.
pub fn project_homogeneous(p: &ProjectionMatrix, x: &Vector4<f64>) -> Result<Pixel, GeometryError> {
    let h = p.entries * x;
    if h.z.abs() <= MIN_HOMOGENEOUS_SCALE {
        return Err(GeometryError::DegenerateProjection(h.z));
    }
    Ok(Pixel::new(h.x / h.z, h.y / h.z))
}

/// Projection together with its 2×3 Jacobian with respect to the point.
pub fn project_point_with_jacobian(
    p: &ProjectionMatrix,
    x: &Point3,
) -> Result<(Pixel, [[f64; 3]; 2]), GeometryError> {
    let h = p.entries * x.to_homogeneous();
    let w = h.z;
    if w.abs() <= MIN_HOMOGENEOUS_SCALE {
        return Err(GeometryError::DegenerateProjection(w));
    }
    let (u, v) = (h.x / w, h.y / w);
    let m = &p.entries;
    let mut jac = [[0.0; 3]; 2];
    for c in 0..3 {
        jac[0][c] = (m[(0, c)] - u * m[(2, c)]) / w;
        jac[1][c] = (m[(1, c)] - v * m[(2, c)]) / w;
    }
    Ok((Pixel::new(u, v), jac))
}

pub fn apply_transform(t: &RigidTransform, pts: &[Point3]) -> Vec<Point3> {
    pts.iter().map(|p| t.apply(p)).collect()
}

/// Intersects the camera ray through `px` with the ground plane lying
/// `cam_height` meters below the camera.
///
/// The camera is pitched by `pitch` about its x axis relative to a level
/// frame whose y axis is perpendicular to the ground. The returned point is
/// expressed in that level frame, so its y component equals `cam_height` and
/// its z component is the forward ground distance.
pub fn intersect_ray_ground(
    k: &Matrix3<f64>,
    cam_height: f64,
    pitch: f64,
    px: Pixel,
) -> Result<Point3, GeometryError> {
    let k_inv = k.try_inverse().ok_or(GeometryError::SingularIntrinsics)?;
    let ray_cam = k_inv * Vector3::new(px.u, px.v, 1.0);
    let ray_level = rotation_x(pitch).transpose() * ray_cam;
    if ray_level.y <= 1e-9 {
        return Err(GeometryError::AboveHorizon);
    }
    let t = cam_height / ray_level.y;
    Ok(Point3::from(ray_level * t))
}

/// Maps a level-frame point into the pitched camera frame; inverse of the
/// rotation used by [`intersect_ray_ground`].
pub fn level_to_camera(pitch: f64, p: &Point3) -> Point3 {
    Point3::from(rotation_x(pitch) * p.coords)
}

pub fn mirror_x(p: &Point3) -> Point3 {
    Point3::new(-p.x, p.y, p.z)
}

/// Camera matrix for the horizontally flipped image.
///
/// The flipped image is treated as a view of the x-mirrored scene, so the
/// result is `M·P·S` with `M` reflecting `u ↦ W − 1 − u` and
/// `S = diag(−1, 1, 1, 1)` mirroring the input point. Focal lengths keep their
/// sign and `project(flip(P), mirror_x(X)) = mirror_u(project(P, X))` for
/// every `P`.
pub fn flip_projection(p: &ProjectionMatrix) -> ProjectionMatrix {
    let w1 = p.image_width as f64 - 1.0;
    let m = &p.entries;
    let mut out = *m;
    for c in 0..4 {
        let sign = if c == 0 { -1.0 } else { 1.0 };
        out[(0, c)] = sign * (w1 * m[(2, c)] - m[(0, c)]);
        out[(1, c)] = sign * m[(1, c)];
        out[(2, c)] = sign * m[(2, c)];
    }
    ProjectionMatrix {
        entries: out,
        image_width: p.image_width,
        image_height: p.image_height,
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}
