//! Rigid transforms, pinhole projection, the continuous 6D rotation
//! representation and the cross-ratio of collinear points.
//!
//! Everything in here is a pure function of its inputs. Rotations map model
//! coordinates into the camera frame: `x_cam = R * x_model + t`.

use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Point2 = nalgebra::Point2<f64>;

/// Tolerance used when validating orthonormality and the determinant.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Points closer to the image plane than this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Relative collinearity tolerance for [`cross_ratio`].
pub const COLLINEARITY_TOLERANCE: f64 = 1e-6;

/// A proper rotation in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` within [`ROTATION_TOLERANCE`].
    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite rotation entry"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(Error::DegenerateInput("matrix is not orthonormal"));
        }
        if (m.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::DegenerateInput("matrix is a reflection"));
        }
        Ok(RotationMatrix(m))
    }

    /// Wraps a matrix the caller already knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    /// Builds a rotation from 9 row-major entries, validating it.
    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::try_from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
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

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        RotationMatrix(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// Normalizes `(w, x, y, z)` and converts it to a matrix.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        RotationMatrix(*q.to_rotation_matrix().matrix())
    }

    /// Samples uniformly on SO(3) by normalizing a 4D Gaussian quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                return Self::from_quaternion(q[0], q[1], q[2], q[3]);
            }
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

/// The first two columns of a rotation matrix, `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (
            Vector3::new(r[0], r[1], r[2]),
            Vector3::new(r[3], r[4], r[5]),
        )
    }
}

/// Gram–Schmidt decode: normalize the first column, orthogonalize the second
/// against it, and complete the frame with their cross product.
pub fn rot_from_6d(r: &Rot6D) -> Result<RotationMatrix> {
    let (a1, a2) = r.columns();
    if !r.0.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite 6D rotation"));
    }
    let n1 = a1.norm();
    let n2 = a2.norm();
    if n1 <= 1e-12 || n2 <= 1e-12 {
        return Err(Error::DegenerateInput("6D rotation column is near zero"));
    }
    if a1.cross(&a2).norm() / (n1 * n2) <= 1e-12 {
        return Err(Error::DegenerateInput("6D rotation columns are parallel"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Reverse-mode derivative of [`rot_from_6d`]: maps `dL/dR` to `dL/dr`.
pub fn rot_from_6d_backward(r: &Rot6D, grad_rotation: &Matrix3<f64>) -> Result<[f64; 6]> {
    let decoded = rot_from_6d(r)?;
    let (a1, a2) = r.columns();
    let m = decoded.matrix();
    let b1: Vector3<f64> = m.column(0).into();
    let b2: Vector3<f64> = m.column(1).into();
    let n1 = a1.norm();
    let u2 = a2 - b1 * b1.dot(&a2);
    let nu = u2.norm();

    let g3: Vector3<f64> = grad_rotation.column(2).into();
    let mut gb1: Vector3<f64> = grad_rotation.column(0).into();
    let mut gb2: Vector3<f64> = grad_rotation.column(1).into();

    // b3 = b1 x b2
    gb1 += b2.cross(&g3);
    gb2 += g3.cross(&b1);

    // b2 = u2 / |u2|
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / nu;

    // u2 = a2 - (b1.a2) b1
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(&a2) + a2 * b1.dot(&gu2);

    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;

    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

pub fn rot_to_6d(r: &RotationMatrix) -> Rot6D {
    let m = r.matrix();
    Rot6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Object-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    /// Meters.
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(RotationMatrix::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.matrix() * p.coords + self.translation)
    }

    /// `other ∘ self`: apply `self`, then `other`.
    pub fn then(&self, other: &Pose) -> Pose {
        Pose::new(
            other.rotation.compose(&self.rotation),
            other.rotation.rotate(&self.translation) + other.translation,
        )
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        let cam = CameraIntrinsics { fx, fy, px, py };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal length", "fx and fy must be positive"));
        }
        if !self.px.is_finite() || !self.py.is_finite() {
            return Err(Error::invalid("principal point", "must be finite"));
        }
        Ok(())
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, p: &Point3) -> Result<Point2> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera {
                index: None,
                depth: p.z,
            });
        }
        Ok(Point2::new(
            self.fx * p.x / p.z + self.px,
            self.fy * p.y / p.z + self.py,
        ))
    }
}

impl Default for CameraIntrinsics {
    /// A VGA camera with a roughly 56 degree horizontal field of view.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 600.0,
            fy: 600.0,
            px: 320.0,
            py: 240.0,
        }
    }
}

pub fn project_point(p: &Point3, pose: &Pose, cam: &CameraIntrinsics) -> Result<Point2> {
    cam.project_camera_point(&pose.transform_point(p))
}

/// Completes a translation from the projected object origin and its depth.
pub fn recover_translation(
    cx: f64,
    cy: f64,
    tz: f64,
    cam: &CameraIntrinsics,
) -> Result<Vector3<f64>> {
    if !(tz > 0.0) || !tz.is_finite() {
        return Err(Error::InvalidDepth(tz));
    }
    Ok(Vector3::new(
        (cx - cam.px) * tz / cam.fx,
        (cy - cam.py) * tz / cam.fy,
        tz,
    ))
}

/// Angle of the relative rotation `R1ᵀ R2`, in radians within `[0, π]`.
pub fn geodesic_distance(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let rel = r1.matrix().transpose() * r2.matrix();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Cross-ratio `(|C−A| |D−B|) / (|C−B| |D−A|)` of four collinear points.
///
/// Collinearity is measured against the line through the two mutually
/// farthest points, relative to their separation.
pub fn cross_ratio<const D: usize>(
    a: &SVector<f64, D>,
    b: &SVector<f64, D>,
    c: &SVector<f64, D>,
    d: &SVector<f64, D>,
) -> Result<f64> {
    let pts = [a, b, c, d];
    let mut span = 0.0_f64;
    let mut ends = (0, 1);
    let mut closest = f64::INFINITY;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let dist = (pts[i] - pts[j]).norm();
            if dist > span {
                span = dist;
                ends = (i, j);
            }
            closest = closest.min(dist);
        }
    }
    if !(span > 0.0) || closest <= 1e-12 * span {
        return Err(Error::DuplicatePoints);
    }
    let origin = pts[ends.0];
    let dir = (pts[ends.1] - origin) / span;
    let residual = pts
        .iter()
        .map(|p| {
            let v = *p - origin;
            (v - dir * v.dot(&dir)).norm() / span
        })
        .fold(0.0, f64::max);
    if residual > COLLINEARITY_TOLERANCE {
        return Err(Error::NotCollinear { residual });
    }
    Ok(((c - a).norm() * (d - b).norm()) / ((c - b).norm() * (d - a).norm()))
}
