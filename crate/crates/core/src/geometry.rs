//! Point arithmetic on keypoint sets: rigid motions, pinhole projection and
//! left/right mirroring.
//!
//! All coordinates are millimetres in the camera frame with +Z pointing away
//! from the camera. Pixel coordinates follow the usual `u` right, `v` down.

use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{AcaeError, Result};

pub type Point3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

/// Nearest depth accepted by [`project`], in millimetres.
pub const Z_MIN: f64 = 100.0;

/// `J` landmark positions with a validity mask. Masked rows carry whatever
/// value they were constructed with and are skipped by every loss and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMatrix {
    pub joints: Vec<Point3>,
    pub valid: Vec<bool>,
}

impl PoseMatrix {
    /// A pose with every joint valid.
    pub fn complete(joints: Vec<Point3>) -> Self {
        let valid = vec![true; joints.len()];
        Self { joints, valid }
    }

    pub fn with_mask(joints: Vec<Point3>, valid: Vec<bool>) -> Result<Self> {
        if joints.len() != valid.len() {
            return Err(AcaeError::ShapeMismatch(format!(
                "{} joints but {} mask entries",
                joints.len(),
                valid.len()
            )));
        }
        Ok(Self { joints, valid })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid joints as `(index, point)` pairs.
    pub fn valid_joints(&self) -> impl Iterator<Item = (usize, &Point3)> {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.valid[*i])
    }

    /// Mean of the valid joints, `None` when nothing is valid.
    pub fn valid_mean(&self) -> Option<Point3> {
        let n = self.valid_count();
        if n == 0 {
            return None;
        }
        let sum = self
            .valid_joints()
            .fold(Point3::zeros(), |acc, (_, p)| acc + p);
        Some(sum / n as f64)
    }

    /// Row-per-joint `J×3` matrix view (masked rows included as stored).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 3, |r, c| self.joints[r][c])
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), 3, "pose matrices have three columns");
        let joints = (0..m.nrows())
            .map(|r| Point3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)]))
            .collect();
        Self::complete(joints)
    }

    pub fn map_valid(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        let joints = self
            .joints
            .iter()
            .zip(&self.valid)
            .map(|(p, &v)| if v { f(p) } else { *p })
            .collect();
        Self {
            joints,
            valid: self.valid.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map_valid(|p| p * factor)
    }

    pub fn translated(&self, offset: &Point3) -> Self {
        self.map_valid(|p| p + offset)
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    const TOLERANCE: f64 = 1e-10;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let orth_err = (gram - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if orth_err > Self::TOLERANCE || det_err > Self::TOLERANCE {
            return Err(AcaeError::ShapeMismatch(format!(
                "rotation is not proper orthonormal (orthogonality error {orth_err:e}, det error {det_err:e})"
            )));
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

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(AcaeError::ConfigInvalid(format!(
                "camera focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn project_point(&self, p: &Point3) -> Pixel {
        Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Jacobian rows `∂u/∂p` and `∂v/∂p` at `p`.
    pub fn projection_jacobian(&self, p: &Point3) -> (Vector3<f64>, Vector3<f64>) {
        let iz = 1.0 / p.z;
        let du = Vector3::new(self.fx * iz, 0.0, -self.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, self.fy * iz, -self.fy * p.y * iz * iz);
        (du, dv)
    }
}

/// Projected pixels with the mask carried over from the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pixels: Vec<Pixel>,
    pub valid: Vec<bool>,
}

pub fn check_depths(pose: &PoseMatrix) -> Result<()> {
    for (j, p) in pose.valid_joints() {
        if !(p.z >= Z_MIN) {
            return Err(AcaeError::DepthTooSmall {
                joint: j,
                z: p.z,
                min: Z_MIN,
            });
        }
    }
    Ok(())
}

pub fn project(pose: &PoseMatrix, cam: &CameraModel) -> Result<Projection> {
    check_depths(pose)?;
    let pixels = pose
        .joints
        .iter()
        .zip(&pose.valid)
        .map(|(p, &v)| {
            if v {
                cam.project_point(p)
            } else {
                Pixel::new(f64::NAN, f64::NAN)
            }
        })
        .collect();
    Ok(Projection {
        pixels,
        valid: pose.valid.clone(),
    })
}

pub fn apply_rigid(pose: &PoseMatrix, t: &RigidTransform) -> PoseMatrix {
    pose.map_valid(|p| t.apply_point(p))
}

/// Sizes of the left, right and center joint blocks of a grouped ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideBlocks {
    pub left: usize,
    pub right: usize,
    pub center: usize,
}

impl SideBlocks {
    pub fn total(&self) -> usize {
        self.left + self.right + self.center
    }

    pub fn check_symmetric(&self) -> Result<()> {
        if self.left != self.right {
            return Err(AcaeError::PartitionMismatch {
                left: self.left,
                right: self.right,
            });
        }
        Ok(())
    }

    /// Index of the mirror partner of row `i` (center rows map to themselves).
    pub fn mirror_index(&self, i: usize) -> usize {
        if i < self.left {
            i + self.left
        } else if i < self.left + self.right {
            i - self.left
        } else {
            i
        }
    }
}

/// Mirror a pose left↔right: negate X and swap the left and right blocks.
pub fn chirality_flip(pose: &PoseMatrix, sides: &SideBlocks) -> Result<PoseMatrix> {
    sides.check_symmetric()?;
    if sides.total() != pose.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "pose has {} joints, partition covers {}",
            pose.len(),
            sides.total()
        )));
    }
    let mut joints = Vec::with_capacity(pose.len());
    let mut valid = Vec::with_capacity(pose.len());
    for i in 0..pose.len() {
        let src = sides.mirror_index(i);
        let p = pose.joints[src];
        joints.push(Point3::new(-p.x, p.y, p.z));
        valid.push(pose.valid[src]);
    }
    Ok(PoseMatrix { joints, valid })
}
