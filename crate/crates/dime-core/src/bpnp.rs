//! Differentiable pose estimation: gradients of a pose-dependent loss with
//! respect to the intrinsics that produced the pose.
//!
//! The pose solver is an argmin, not a closed-form map, so its derivative
//! comes from the implicit function theorem. At a stationary pose the
//! gradient of the solver objective vanishes; differentiating that identity
//! with respect to the intrinsics gives
//!
//! ```text
//! d(pose*)/dK = -H^-1 C,      grad_K = -C^T H^-1 grad_pose
//! ```
//!
//! where `H` is the objective Hessian in the local pose coordinates and `C`
//! the mixed pose/intrinsics second derivative, both evaluated at the
//! solution. The Gauss-Newton approximation keeps only first-order Jacobian
//! products; the exact mode adds the residual-weighted curvature of the
//! projection, which matters when residuals are large.

use nalgebra::{Matrix2, Matrix3, Matrix3x6, Matrix6, Matrix6x4, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    skew, Correspondence, GeometryError, Intrinsics, PnpConfig, PnpSolution, Pose, ProjectionJet,
    Whitener,
};

/// A pose passed to [`bpnp_backward`] must be stationary to this tolerance,
/// measured as the Newton step `|H^-1 g|` the solver would still take (the
/// raw gradient norm scales with focal length squared, so it cannot carry a
/// fixed threshold). Anything looser means the implicit derivative is
/// meaningless.
pub const STATIONARITY_TOL: f64 = 1e-6;

/// Condition number above which the pose Hessian is treated as singular.
pub const MAX_HESSIAN_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum BpnpError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("pose is not a stationary point of the solver objective (residual Newton step {newton_step:.3e})")]
    NotStationary { newton_step: f64 },
    #[error("pose Hessian is numerically singular (condition {condition:.3e})")]
    SingularHessian { condition: f64 },
}

/// How the pose Hessian and the mixed derivative are assembled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// First-order Jacobian products only. Exact at zero residual and a good
    /// approximation near it; this is the default.
    #[default]
    GaussNewton,
    /// Adds the second-order projection curvature weighted by the whitened
    /// residuals.
    Exact,
}

/// Value and first derivatives of the mean Mahalanobis reprojection error.
#[derive(Debug, Clone)]
pub struct ReprojectionLoss {
    pub value: f64,
    /// Derivative in (fx, fy, cx, cy).
    pub grad_k: Vector4<f64>,
    /// Derivative in the local pose coordinates (w, u) at the given pose.
    pub grad_pose: Vector6<f64>,
}

/// Mean of the per-point whitened reprojection norms, with gradients. Points
/// that reproject exactly contribute zero to the mean and a zero subgradient.
pub fn loss_reprojection(
    k: &Intrinsics,
    pose: &Pose,
    corrs: &[Correspondence],
    pixel_covariance: &Matrix2<f64>,
) -> Result<ReprojectionLoss, GeometryError> {
    if corrs.is_empty() {
        return Err(GeometryError::DegenerateConfiguration(
            "loss needs at least one correspondence".into(),
        ));
    }
    k.validate()?;
    let whitener = Whitener::new(pixel_covariance)?;

    let inv_n = 1.0 / corrs.len() as f64;
    let mut value = 0.0;
    let mut grad_k = Vector4::zeros();
    let mut grad_pose = Vector6::zeros();
    for (i, c) in corrs.iter().enumerate() {
        let jet = ProjectionJet::compute(k, pose, &c.point, i)?;
        let r = whitener.whiten(&(jet.pixel - c.pixel));
        let norm = r.norm();
        value += norm * inv_n;
        if norm < 1e-12 {
            continue;
        }
        let jp = whiten_pose_jacobian(&whitener, &jet);
        let jk = whitener.whiten2x4(&jet.d_k);
        grad_pose += jp.transpose() * r * (inv_n / norm);
        grad_k += jk.transpose() * r * (inv_n / norm);
    }
    Ok(ReprojectionLoss { value, grad_k, grad_pose })
}

/// The forward half of the differentiable solver: a plain pose solve.
pub fn bpnp_forward(
    k: &Intrinsics,
    corrs: &[Correspondence],
    cfg: &PnpConfig,
    init: Option<&Pose>,
) -> Result<PnpSolution, BpnpError> {
    Ok(crate::geometry::solve_pnp(k, corrs, cfg, init)?)
}

/// Pulls a gradient with respect to the solved pose back to the intrinsics
/// that the solve was run with. `pose` must be the solver output for `k` and
/// `corrs` under the same configuration; stationarity is verified.
pub fn bpnp_backward(
    k: &Intrinsics,
    corrs: &[Correspondence],
    pose: &Pose,
    grad_pose: &Vector6<f64>,
    cfg: &PnpConfig,
    mode: HessianMode,
) -> Result<Vector4<f64>, BpnpError> {
    if corrs.is_empty() {
        return Err(GeometryError::DegenerateConfiguration(
            "backward pass needs at least one correspondence".into(),
        )
        .into());
    }
    k.validate().map_err(BpnpError::Geometry)?;
    let whitener = Whitener::new(&cfg.pixel_covariance)?;
    // w = cov^-1 d reweights the curvature terms; the Cholesky inverse keeps
    // it symmetric.
    let sigma_inv = cfg
        .pixel_covariance
        .cholesky()
        .ok_or(GeometryError::InvalidCovariance)?
        .inverse();

    let mut grad = Vector6::zeros();
    let mut h = Matrix6::zeros();
    let mut c = Matrix6x4::zeros();
    for (i, corr) in corrs.iter().enumerate() {
        let jet = ProjectionJet::compute(k, pose, &corr.point, i)?;
        let d = jet.pixel - corr.pixel;
        let r = whitener.whiten(&d);
        let jp = whiten_pose_jacobian(&whitener, &jet);
        let jk = whitener.whiten2x4(&jet.d_k);

        grad += 2.0 * jp.transpose() * r;
        h += 2.0 * jp.transpose() * jp;
        c += 2.0 * jp.transpose() * jk;

        if mode == HessianMode::Exact {
            let w = sigma_inv * d;
            accumulate_curvature(k, &jet, &w, &mut h, &mut c);
        }
    }

    // Symmetric eigendecomposition doubles as the conditioning check and the
    // solve; H is only 6x6.
    let eig = h.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min_ev = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    let condition = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if !condition.is_finite() || condition > MAX_HESSIAN_CONDITION {
        return Err(BpnpError::SingularHessian { condition });
    }
    let solve_h = |rhs: &Vector6<f64>| -> Vector6<f64> {
        let mut coeffs = eig.eigenvectors.transpose() * rhs;
        for (ci, lambda) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
            *ci /= lambda;
        }
        eig.eigenvectors * coeffs
    };

    let newton_step = solve_h(&grad).norm();
    if newton_step >= STATIONARITY_TOL {
        return Err(BpnpError::NotStationary { newton_step });
    }

    Ok(-c.transpose() * solve_h(grad_pose))
}

/// Whitened 2x6 pose Jacobian, assembled column-wise like the solver does.
fn whiten_pose_jacobian(whitener: &Whitener, jet: &ProjectionJet) -> nalgebra::Matrix2x6<f64> {
    let jp = jet.d_pose();
    let mut out = nalgebra::Matrix2x6::zeros();
    for col in 0..6 {
        let wcol = whitener.whiten(&Vector2::new(jp[(0, col)], jp[(1, col)]));
        out[(0, col)] = wcol.x;
        out[(1, col)] = wcol.y;
    }
    out
}

/// Second-order terms for one point: residual-weighted projection curvature.
///
/// With `p` the camera-frame point and `q = R X`, the map from a local pose
/// step to `p` is `p(w, u) = exp([w]x) q + t + u`, so `dp/d(w,u) = [-[q]x I]`
/// and the only second derivative of `p` is the rotation block
/// `d2p/dw_a dw_b = (e_b q_a + e_a q_b) / 2 - q delta_ab`. The pixel map
/// contributes its own Hessian in `p` plus mixed `p`/focal terms; principal
/// point columns are affine and drop out.
fn accumulate_curvature(
    k: &Intrinsics,
    jet: &ProjectionJet,
    w: &Vector2<f64>,
    h: &mut Matrix6<f64>,
    c: &mut Matrix6x4<f64>,
) {
    let p = jet.p;
    let q = jet.q;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // dp/d(w, u), 3x6.
    let mut e = Matrix3x6::zeros();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
    e.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());

    // Hessians of the two pixel channels in p, combined with weights.
    let m_u = Matrix3::new(
        0.0, 0.0, -k.fx * iz2,
        0.0, 0.0, 0.0,
        -k.fx * iz2, 0.0, 2.0 * k.fx * p.x * iz3,
    );
    let m_v = Matrix3::new(
        0.0, 0.0, 0.0,
        0.0, 0.0, -k.fy * iz2,
        0.0, -k.fy * iz2, 2.0 * k.fy * p.y * iz3,
    );
    let m = w.x * m_u + w.y * m_v;
    *h += 2.0 * e.transpose() * m * e;

    // Rotation-only curvature of p itself, contracted with b = G^T w where G
    // is the pixel-by-point Jacobian: (q b^T + b q^T) / 2 - (b . q) I.
    let b = jet.d_point.transpose() * w;
    let t = 0.5 * (q * b.transpose() + b * q.transpose()) - b.dot(&q) * Matrix3::identity();
    let mut h_rot = h.fixed_view_mut::<3, 3>(0, 0);
    h_rot += 2.0 * t;

    // Mixed pose/intrinsics terms: only the focal columns survive since the
    // normalized coordinates (px/pz, py/pz) depend on the pose.
    let n_u = Vector3::new(iz, 0.0, -p.x * iz2);
    let n_v = Vector3::new(0.0, iz, -p.y * iz2);
    let mut c_fx = c.fixed_view_mut::<6, 1>(0, 0);
    c_fx += 2.0 * w.x * e.transpose() * n_u;
    let mut c_fy = c.fixed_view_mut::<6, 1>(0, 1);
    c_fy += 2.0 * w.y * e.transpose() * n_v;
}
