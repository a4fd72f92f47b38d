//! Pose from 2D-3D correspondences with known intrinsics.
//!
//! The solve runs in two stages: a closed-form initialization in the style of
//! EPnP (four control points, a 2n x 12 null-space problem, absolute
//! orientation), then Levenberg-Marquardt on the 6-DoF pose minimizing the
//! squared Mahalanobis reprojection error. Callers may pass their own
//! initialization to skip the closed form, which also lowers the minimum
//! point count from 6 to 4.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use super::lm::{minimize, LmProblem, LmSettings};
use super::{
    Correspondence, GeometryError, Intrinsics, PnpConfig, Pose, ProjectionJet, Whitener,
};

/// Pose estimate with its converged error statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    /// Mean Mahalanobis reprojection error over the input set.
    pub mean_error: f64,
    /// Squared-residual objective at the solution.
    pub objective: f64,
    pub iterations: usize,
}

/// Minimum correspondences for the closed-form initialization.
pub const MIN_POINTS_CLOSED_FORM: usize = 6;
/// Minimum correspondences when an initial pose is supplied.
pub const MIN_POINTS_WITH_INIT: usize = 4;

pub(crate) struct PoseProblem<'a> {
    pub k: &'a Intrinsics,
    pub corrs: &'a [Correspondence],
    pub whitener: Whitener,
}

impl LmProblem for PoseProblem<'_> {
    type State = Pose;

    fn eval(&self, state: &Pose) -> Result<(DVector<f64>, DMatrix<f64>), GeometryError> {
        let n = self.corrs.len();
        let mut r = DVector::zeros(2 * n);
        let mut j = DMatrix::zeros(2 * n, 6);
        for (i, c) in self.corrs.iter().enumerate() {
            let jet = ProjectionJet::compute(self.k, state, &c.point, i)?;
            let d = self.whitener.whiten(&(jet.pixel - c.pixel));
            r[2 * i] = d.x;
            r[2 * i + 1] = d.y;
            let jp = jet.d_pose();
            for col in 0..6 {
                let wcol = self.whitener.whiten(&Vector2::new(jp[(0, col)], jp[(1, col)]));
                j[(2 * i, col)] = wcol.x;
                j[(2 * i + 1, col)] = wcol.y;
            }
        }
        Ok((r, j))
    }

    fn residuals(&self, state: &Pose) -> Result<DVector<f64>, GeometryError> {
        let n = self.corrs.len();
        let mut r = DVector::zeros(2 * n);
        for (i, c) in self.corrs.iter().enumerate() {
            let jet = ProjectionJet::compute(self.k, state, &c.point, i)?;
            let d = self.whitener.whiten(&(jet.pixel - c.pixel));
            r[2 * i] = d.x;
            r[2 * i + 1] = d.y;
        }
        Ok(r)
    }

    fn apply_step(&self, state: &Pose, step: &DVector<f64>) -> Pose {
        state.perturbed(&nalgebra::Vector6::from_column_slice(step.as_slice()))
    }
}

/// Solves for the camera pose under fixed intrinsics.
///
/// Returns the refined pose with its mean Mahalanobis reprojection error.
/// Fails with `NotConverged` (carrying the best pose found) when the
/// iteration budget runs out, and `DegenerateConfiguration` for too few or
/// geometrically deficient correspondences.
pub fn solve_pnp(
    k: &Intrinsics,
    corrs: &[Correspondence],
    cfg: &PnpConfig,
    init: Option<&Pose>,
) -> Result<PnpSolution, GeometryError> {
    k.validate()?;
    let min_points = if init.is_some() { MIN_POINTS_WITH_INIT } else { MIN_POINTS_CLOSED_FORM };
    if corrs.len() < min_points {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least {min_points} correspondences, got {}",
            corrs.len()
        )));
    }

    let whitener = Whitener::new(&cfg.pixel_covariance)?;
    let initial = match init {
        Some(pose) => *pose,
        None => closed_form_init(k, corrs)?,
    };

    let problem = PoseProblem { k, corrs, whitener };
    let settings = LmSettings {
        max_iterations: cfg.max_iterations,
        tol: cfg.convergence_tol,
        damping_init: cfg.damping_init,
        max_condition: Some(1e14),
    };
    let out = minimize(&problem, initial, &settings)?;
    if !out.converged {
        return Err(GeometryError::NotConverged {
            pose: Box::new(out.state),
            intrinsics: None,
            iterations: out.iterations,
            step_norm: out.last_step_norm,
        });
    }

    let mean_error = mean_whitened_error(k, &out.state, corrs, &whitener)?;
    Ok(PnpSolution { pose: out.state, mean_error, objective: out.objective, iterations: out.iterations })
}

pub(crate) fn mean_whitened_error(
    k: &Intrinsics,
    pose: &Pose,
    corrs: &[Correspondence],
    whitener: &Whitener,
) -> Result<f64, GeometryError> {
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let jet = ProjectionJet::compute(k, pose, &c.point, i)?;
        sum += whitener.norm(&(jet.pixel - c.pixel));
    }
    Ok(sum / corrs.len() as f64)
}

// ── Closed-form initialization ──────────────────────────────────────────────

fn closed_form_init(k: &Intrinsics, corrs: &[Correspondence]) -> Result<Pose, GeometryError> {
    let n = corrs.len();

    // Control points: centroid plus principal axes of the 3D cloud, scaled
    // by the standard deviation along each axis.
    let centroid: Vector3<f64> =
        corrs.iter().map(|c| c.point).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for c in corrs {
        let d = c.point - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let lambda_max = eigen.eigenvalues[order[0]];
    let lambda_min = eigen.eigenvalues[order[2]];
    if lambda_max <= 0.0 || lambda_max.is_nan() || lambda_min <= 1e-10 * lambda_max {
        return Err(GeometryError::DegenerateConfiguration(
            "3D points are collinear or near-coplanar; closed-form initialization needs a full-rank cloud"
                .into(),
        ));
    }

    let mut control_w = [centroid; 4];
    for (slot, &idx) in order.iter().enumerate() {
        let axis = eigen.eigenvectors.column(idx).into_owned();
        control_w[slot + 1] = centroid + axis * eigen.eigenvalues[idx].sqrt();
    }

    // Barycentric coordinates of every point in the control basis.
    let basis = Matrix3::from_columns(&[
        control_w[1] - control_w[0],
        control_w[2] - control_w[0],
        control_w[3] - control_w[0],
    ]);
    let basis_inv = basis.try_inverse().ok_or_else(|| {
        GeometryError::DegenerateConfiguration("control point basis is singular".into())
    })?;

    let mut alphas = Vec::with_capacity(n);
    for c in corrs {
        let b = basis_inv * (c.point - control_w[0]);
        alphas.push([1.0 - b.x - b.y - b.z, b.x, b.y, b.z]);
    }

    // Null-space problem on normalized image coordinates.
    let mut m = DMatrix::zeros(2 * n, 12);
    for (i, c) in corrs.iter().enumerate() {
        let u = (c.pixel.x - k.cx) / k.fx;
        let v = (c.pixel.y - k.cy) / k.fy;
        for j in 0..4 {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a;
            m[(2 * i, 3 * j + 2)] = -u * a;
            m[(2 * i + 1, 3 * j + 1)] = a;
            m[(2 * i + 1, 3 * j + 2)] = -v * a;
        }
    }

    let svd = m.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| {
        GeometryError::DegenerateConfiguration("SVD of the control point system failed".into())
    })?;
    let mut min_idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let null = v_t.row(min_idx);

    let mut control_c = [Vector3::zeros(); 4];
    for j in 0..4 {
        control_c[j] = Vector3::new(null[3 * j], null[3 * j + 1], null[3 * j + 2]);
    }

    // Recover the scale from pairwise control point distances, then fix the
    // sign so point depths come out positive.
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            num += (control_w[a] - control_w[b]).norm_squared();
            den += (control_c[a] - control_c[b]).norm_squared();
        }
    }
    if den <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration(
            "null-space control points collapsed to a single point".into(),
        ));
    }
    let scale = (num / den).sqrt();
    for c in control_c.iter_mut() {
        *c *= scale;
    }

    let mut cam_points: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| {
            control_c[0] * a[0] + control_c[1] * a[1] + control_c[2] * a[2] + control_c[3] * a[3]
        })
        .collect();
    let mean_depth: f64 = cam_points.iter().map(|p| p.z).sum::<f64>() / n as f64;
    if mean_depth < 0.0 {
        for p in cam_points.iter_mut() {
            *p = -*p;
        }
    }

    absolute_orientation(corrs, &cam_points)
}

/// Least-squares rigid transform taking world points onto camera points.
fn absolute_orientation(
    corrs: &[Correspondence],
    cam_points: &[Vector3<f64>],
) -> Result<Pose, GeometryError> {
    let n = corrs.len() as f64;
    let cw: Vector3<f64> = corrs.iter().map(|c| c.point).sum::<Vector3<f64>>() / n;
    let cc: Vector3<f64> = cam_points.iter().sum::<Vector3<f64>>() / n;

    let mut h = Matrix3::zeros();
    for (c, p) in corrs.iter().zip(cam_points) {
        h += (p - cc) * (c.point - cw).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(GeometryError::DegenerateConfiguration(
            "absolute orientation SVD failed".into(),
        ));
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    let rotation = nalgebra::UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(r),
    );
    let translation = cc - r * cw;
    Ok(Pose::new(rotation, translation))
}
