//! Pinhole camera geometry: intrinsics, rigid poses, projection, and the
//! two solvers everything else is built on.
//!
//! Conventions used throughout the crate:
//!
//! - Pixels are `(x, y)` in image coordinates, 3D points are millimeters.
//! - A [`Pose`] maps world (or prior-camera-frame) points into the camera
//!   frame: `p = R * X + t`. Depth is the camera-frame `z`.
//! - Intrinsics carry no skew; the projection is
//!   `x = fx * px/pz + cx`, `y = fy * py/pz + cy`.
//! - Local pose parameterization is a 6-vector `(w, u)`: rotation update
//!   `R <- exp([w]x) * R` composed on the left, translation `t <- t + u`.
//!   Jacobian columns follow the same order everywhere.
//! - Residual weighting uses a shared 2x2 pixel covariance; errors are
//!   Mahalanobis norms under that covariance.

mod lm;
mod pnp;
mod refine;

pub use pnp::{solve_pnp, PnpSolution};
pub use refine::{mle_refine_intrinsics, MleSolution};

use nalgebra::{Matrix2, Matrix2x3, Matrix2x4, Matrix3, UnitQuaternion, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera-frame depths at or below this (millimeters) abort projection.
pub const MIN_DEPTH_MM: f64 = 1e-6;

#[derive(Debug, Clone, Error)]
pub enum GeometryError {
    #[error("point {index} has camera-frame depth {depth:.3e} mm, below the {MIN_DEPTH_MM:.0e} mm guard")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no convergence after {iterations} iterations (last step norm {step_norm:.3e})")]
    NotConverged {
        /// Best estimate at abort; usable as a warm start.
        pose: Box<Pose>,
        /// Present when intrinsics were part of the refined state.
        intrinsics: Option<Intrinsics>,
        iterations: usize,
        step_norm: f64,
    },
    #[error("pixel covariance must be symmetric positive definite")]
    InvalidCovariance,
    #[error("intrinsics need positive focal lengths, got fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
}

/// 4-DoF pinhole intrinsics (no skew).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Focal lengths must stay positive and all fields finite.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite =
            self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite();
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics { fx: self.fx, fy: self.fy });
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Field order `(fx, fy, cx, cy)`, matching every 4-vector delta in the crate.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.fx, self.fy, self.cx, self.cy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Applies an additive correction, rejecting non-positive focal lengths.
    pub fn shifted(&self, delta: &Vector4<f64>) -> Result<Self, GeometryError> {
        Self::new(self.fx + delta[0], self.fy + delta[1], self.cx + delta[2], self.cy + delta[3])
    }
}

/// Rigid transform into the camera frame: `p = R * X + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Serialized form: unit quaternion `(w, x, y, z)` plus translation.
#[derive(Serialize, Deserialize, Clone)]
struct PoseRepr {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.rotation;
        // Coordinates were written from a unit quaternion; renormalizing here
        // would break bit-exact round trips.
        let q = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z));
        Pose { rotation: q, translation: Vector3::from(r.translation) }
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.into_inner();
        PoseRepr { rotation: [q.w, q.i, q.j, q.k], translation: p.translation.into() }
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    /// Applies the local step `(w, u)`: `R <- exp([w]x) R`, `t <- t + u`.
    pub fn perturbed(&self, step: &Vector6<f64>) -> Pose {
        let w = Vector3::new(step[0], step[1], step[2]);
        let u = Vector3::new(step[3], step[4], step[5]);
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(w) * self.rotation,
            translation: self.translation + u,
        }
    }

    /// Geodesic rotation distance in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// One observed pixel with its 3D point (prior camera frame, millimeters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

impl Correspondence {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>) -> Self {
        Correspondence { pixel, point }
    }
}

/// Settings shared by the pose and joint refinement solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    /// 2x2 pixel covariance for Mahalanobis weighting. Identity by default.
    pub pixel_covariance: Matrix2<f64>,
    pub max_iterations: usize,
    /// Convergence threshold on both the parameter step norm and the
    /// gradient norm of the squared-residual objective.
    pub convergence_tol: f64,
    /// Initial Levenberg damping; scaled by 10 on rejected steps, by 1/10 on
    /// accepted ones.
    pub damping_init: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig {
            pixel_covariance: Matrix2::identity(),
            max_iterations: 100,
            convergence_tol: 1e-10,
            damping_init: 1e-3,
        }
    }
}

/// Whitening transform for a pixel covariance: residuals are multiplied by
/// `A = L^-1` where `cov = L L^T`, so `|A d| = sqrt(d^T cov^-1 d)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Whitener {
    a: Matrix2<f64>,
}

impl Whitener {
    pub fn new(cov: &Matrix2<f64>) -> Result<Self, GeometryError> {
        if cov.m12 != cov.m21 || !cov.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCovariance);
        }
        let chol = cov.cholesky().ok_or(GeometryError::InvalidCovariance)?;
        let l_inv = chol
            .l()
            .try_inverse()
            .ok_or(GeometryError::InvalidCovariance)?;
        Ok(Whitener { a: l_inv })
    }

    pub fn whiten(&self, d: &Vector2<f64>) -> Vector2<f64> {
        self.a * d
    }

    /// Applies the whitening to a per-point Jacobian block.
    pub fn whiten2x4(&self, j: &Matrix2x4<f64>) -> Matrix2x4<f64> {
        self.a * j
    }

    pub fn norm(&self, d: &Vector2<f64>) -> f64 {
        (self.a * d).norm()
    }
}

/// Projects a 3D point to a pixel. The homogeneous scale (reciprocal depth)
/// is consumed internally and never exposed.
pub fn project(
    k: &Intrinsics,
    pose: &Pose,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let p = pose.transform(point);
    if p.z <= MIN_DEPTH_MM {
        return Err(GeometryError::NonPositiveDepth { index: 0, depth: p.z });
    }
    Ok(Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Per-point Mahalanobis reprojection errors plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionErrors {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// Evaluates `|proj(k, pose, X_i) - x_i|` under the given pixel covariance
/// for every correspondence.
pub fn reprojection_errors(
    k: &Intrinsics,
    pose: &Pose,
    corrs: &[Correspondence],
    pixel_covariance: &Matrix2<f64>,
) -> Result<ReprojectionErrors, GeometryError> {
    if corrs.is_empty() {
        return Err(GeometryError::DegenerateConfiguration(
            "reprojection errors need at least one correspondence".into(),
        ));
    }
    let w = Whitener::new(pixel_covariance)?;
    let mut per_point = Vec::with_capacity(corrs.len());
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let reproj = project(k, pose, &c.point).map_err(|e| match e {
            GeometryError::NonPositiveDepth { depth, .. } => {
                GeometryError::NonPositiveDepth { index: i, depth }
            }
            other => other,
        })?;
        let e = w.norm(&(reproj - c.pixel));
        per_point.push(e);
        sum += e;
    }
    let mean = sum / corrs.len() as f64;
    Ok(ReprojectionErrors { per_point, mean })
}

/// Projection of one correspondence together with the first-order pieces the
/// solvers need. `q = R * X` is kept for rotation Jacobians and curvature
/// terms; all blocks are unwhitened.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectionJet {
    /// Camera-frame point.
    pub p: Vector3<f64>,
    /// Rotated point before translation, `p - t`.
    pub q: Vector3<f64>,
    pub pixel: Vector2<f64>,
    /// d pixel / d p.
    pub d_point: Matrix2x3<f64>,
    /// d pixel / d (fx, fy, cx, cy).
    pub d_k: Matrix2x4<f64>,
}

impl ProjectionJet {
    pub fn compute(
        k: &Intrinsics,
        pose: &Pose,
        point: &Vector3<f64>,
        index: usize,
    ) -> Result<Self, GeometryError> {
        let q = pose.rotation * point;
        let p = q + pose.translation;
        if p.z <= MIN_DEPTH_MM {
            return Err(GeometryError::NonPositiveDepth { index, depth: p.z });
        }
        let iz = 1.0 / p.z;
        let xn = p.x * iz;
        let yn = p.y * iz;
        let pixel = Vector2::new(k.fx * xn + k.cx, k.fy * yn + k.cy);
        let d_point = Matrix2x3::new(
            k.fx * iz, 0.0, -k.fx * xn * iz,
            0.0, k.fy * iz, -k.fy * yn * iz,
        );
        let d_k = Matrix2x4::new(
            xn, 0.0, 1.0, 0.0,
            0.0, yn, 0.0, 1.0,
        );
        Ok(ProjectionJet { p, q, pixel, d_point, d_k })
    }

    /// d pixel / d (w, u) for the left-composed local pose step.
    pub fn d_pose(&self) -> nalgebra::Matrix2x6<f64> {
        // dp/dw = -[q]x, dp/du = I.
        let dq = self.d_point * (-skew(&self.q));
        let mut j = nalgebra::Matrix2x6::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dq);
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&self.d_point);
        j
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
