//! Synthetic data: a fixed rig of checkerboard targets observed by a camera
//! whose intrinsics wander on a lens-state manifold.
//!
//! A stabilized lens tilts about the sensor axes and shifts along the optical
//! axis. Tilt swings the principal point through the projection gain, axial
//! shift scales the focal lengths:
//!
//! ```text
//! fx = fx0 (1 + dz / z_ref)          cx = cx0 + gain fx0 tan(theta_y)
//! fy = fy0 (1 + dz / z_ref)          cy = cy0 + gain fy0 tan(theta_x)
//! ```
//!
//! The prior intrinsics are the manifold mean, mimicking a bench calibration
//! that averaged over lens states. Each generated frame carries pixels
//! rendered with the true per-frame intrinsics and 3D points expressed in the
//! prior camera frame, i.e. the frame a consumer believing the prior
//! intrinsics would reconstruct. Solving that frame with the prior leaves the
//! baseline reprojection error; solving with the true intrinsics cancels it.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{solve_pnp, Correspondence, GeometryError, Intrinsics, PnpConfig, Pose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no camera pose kept all targets visible after {draws} draws")]
    NoValidPose { draws: usize },
    #[error("cannot keep {keep} of {available} points")]
    InvalidKeep { keep: usize, available: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Checkerboard geometry: inner vertex grid and cell pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub vertex_rows: usize,
    pub vertex_cols: usize,
    pub cell_mm: f64,
}

impl Default for BoardSpec {
    fn default() -> Self {
        BoardSpec { vertex_rows: 8, vertex_cols: 10, cell_mm: 22.0 }
    }
}

/// One board's placement in the rig frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardPlacement {
    pub center_mm: [f64; 3],
    pub tilt_x_deg: f64,
    pub tilt_y_deg: f64,
}

/// The full target rig. The default is four boards fanned out in depth and
/// tilt so the point cloud is far from planar; planar rigs leave the joint
/// intrinsics-pose problem unobservable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub board: BoardSpec,
    pub placements: Vec<BoardPlacement>,
}

impl Default for RigSpec {
    fn default() -> Self {
        let p = |c: [f64; 3], tx: f64, ty: f64| BoardPlacement {
            center_mm: c,
            tilt_x_deg: tx,
            tilt_y_deg: ty,
        };
        RigSpec {
            board: BoardSpec::default(),
            placements: vec![
                p([-100.0, -75.0, 0.0], 15.0, -12.0),
                p([100.0, -75.0, 30.0], -18.0, 15.0),
                p([-100.0, 75.0, 60.0], 12.0, 20.0),
                p([100.0, 75.0, 90.0], -15.0, -18.0),
            ],
        }
    }
}

impl RigSpec {
    pub fn point_count(&self) -> usize {
        self.placements.len() * self.board.vertex_rows * self.board.vertex_cols
    }

    /// All vertex positions in the rig frame, board by board, row major
    /// within a board.
    pub fn vertices(&self) -> Vec<Vector3<f64>> {
        let rows = self.board.vertex_rows;
        let cols = self.board.vertex_cols;
        let cell = self.board.cell_mm;
        let mut out = Vec::with_capacity(self.point_count());
        for place in &self.placements {
            let rot = Rotation3::from_euler_angles(
                place.tilt_x_deg.to_radians(),
                place.tilt_y_deg.to_radians(),
                0.0,
            );
            let center = Vector3::from(place.center_mm);
            for i in 0..rows {
                for j in 0..cols {
                    let local = Vector3::new(
                        (j as f64 - (cols as f64 - 1.0) / 2.0) * cell,
                        (i as f64 - (rows as f64 - 1.0) / 2.0) * cell,
                        0.0,
                    );
                    out.push(rot * local + center);
                }
            }
        }
        out
    }

    /// FNV-1a over the exact bit patterns of the layout, so datasets can
    /// verify they were generated for the same rig.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.board.vertex_rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.board.vertex_cols as u64).to_le_bytes());
        bytes.extend_from_slice(&self.board.cell_mm.to_bits().to_le_bytes());
        for p in &self.placements {
            for v in p.center_mm {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&p.tilt_x_deg.to_bits().to_le_bytes());
            bytes.extend_from_slice(&p.tilt_y_deg.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Instantaneous stabilizer state: tilts about the sensor axes (radians) and
/// axial shift (millimeters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LensState {
    pub theta_x: f64,
    pub theta_y: f64,
    pub shift_z: f64,
}

/// Generator settings. The defaults model a phone-class module: a 4032x3024
/// sensor, focals near 3100 px, stabilizer tilts up to 3.5 degrees, and no
/// axial shift (tilt-only stabilization). The tilt range is tuned so that
/// trusting the prior intrinsics costs a handful of pixels per frame. The
/// pose ranges describe a controlled capture sweep (moderate cone, small
/// look-at jitter and roll), not handheld motion; widening them mostly adds
/// viewpoint variance that a fixed-size training set has to average out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nominal: Intrinsics,
    pub image_width: f64,
    pub image_height: f64,
    /// Principal point pixels per unit tangent of lens tilt, as a fraction
    /// of the focal length.
    pub gain: f64,
    /// Effective lens-sensor distance (mm) against which axial shift scales
    /// the focals.
    pub z_ref_mm: f64,
    pub tilt_max_deg: f64,
    pub shift_max_mm: f64,
    /// Camera distance range from the rig center (mm).
    pub distance_mm: [f64; 2],
    /// Camera positions are drawn inside this cone about the rig's rear axis.
    pub cone_max_deg: f64,
    /// Look-at target jitter around the rig center (mm).
    pub target_jitter_mm: f64,
    pub roll_max_deg: f64,
    /// Pose draws to attempt before giving up on full target visibility.
    pub max_pose_draws: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nominal: Intrinsics::new(3100.0, 3100.0, 2016.0, 1512.0).unwrap(),
            image_width: 4032.0,
            image_height: 3024.0,
            gain: 1.0,
            z_ref_mm: 4.3,
            tilt_max_deg: 3.5,
            shift_max_mm: 0.0,
            distance_mm: [500.0, 750.0],
            cone_max_deg: 15.0,
            target_jitter_mm: 20.0,
            roll_max_deg: 10.0,
            max_pose_draws: 200,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.z_ref_mm <= 0.0 {
            return Err(SimError::InvalidConfig("z_ref_mm must be positive".into()));
        }
        if self.distance_mm[0] <= 0.0 || self.distance_mm[1] < self.distance_mm[0] {
            return Err(SimError::InvalidConfig("distance_mm must be a positive range".into()));
        }
        if self.tilt_max_deg < 0.0 || self.shift_max_mm < 0.0 {
            return Err(SimError::InvalidConfig("lens ranges must be nonnegative".into()));
        }
        if self.shift_max_mm >= self.z_ref_mm {
            return Err(SimError::InvalidConfig("shift_max_mm would zero out the focals".into()));
        }
        if self.max_pose_draws == 0 {
            return Err(SimError::InvalidConfig("max_pose_draws must be at least 1".into()));
        }
        self.nominal.validate().map_err(SimError::Geometry)
    }
}

/// Instantaneous intrinsics for a lens state.
pub fn k_manifold(cfg: &SimConfig, lens: &LensState) -> Intrinsics {
    let k0 = &cfg.nominal;
    let scale = 1.0 + lens.shift_z / cfg.z_ref_mm;
    Intrinsics {
        fx: k0.fx * scale,
        fy: k0.fy * scale,
        cx: k0.cx + cfg.gain * k0.fx * lens.theta_y.tan(),
        cy: k0.cy + cfg.gain * k0.fy * lens.theta_x.tan(),
    }
}

fn sample_lens(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> LensState {
    let tilt = cfg.tilt_max_deg.to_radians();
    LensState {
        theta_x: uniform_pm(rng, tilt),
        theta_y: uniform_pm(rng, tilt),
        shift_z: uniform_pm(rng, cfg.shift_max_mm),
    }
}

fn uniform_pm(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..bound)
    } else {
        0.0
    }
}

const MANIFOLD_MEAN_SAMPLES: usize = 1000;
// Dedicated stream so the prior depends only on the config, never on which
// dataset is being generated.
const MANIFOLD_MEAN_SEED: u64 = 0x1c59_a3b2_744d_90e1;

/// The prior intrinsics: empirical mean of the manifold over 1000 lens-state
/// draws. This is what a calibration routine oblivious to the stabilizer
/// would return.
pub fn average_manifold_k(cfg: &SimConfig) -> Result<Intrinsics, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(MANIFOLD_MEAN_SEED);
    let mut sum = nalgebra::Vector4::zeros();
    for _ in 0..MANIFOLD_MEAN_SAMPLES {
        let lens = sample_lens(cfg, &mut rng);
        sum += k_manifold(cfg, &lens).to_vector();
    }
    Ok(Intrinsics::from_vector(&(sum / MANIFOLD_MEAN_SAMPLES as f64))?)
}

/// One generated observation of the rig.
#[derive(Debug, Clone)]
pub struct SimFrame {
    /// Pixels rendered with `k_true`; 3D points in the prior camera frame.
    pub correspondences: Vec<Correspondence>,
    pub k_true: Intrinsics,
    /// The prior the frame was reconstructed with (manifold mean).
    pub k_prior: Intrinsics,
    pub lens: LensState,
    /// Ground-truth rig-to-camera pose.
    pub camera_pose: Pose,
    /// Pose estimated with the prior intrinsics; the frame's 3D points are
    /// expressed in this camera frame.
    pub prior_pose: Pose,
}

/// Draws a camera on a spherical shell behind the rig's -z side, aimed at a
/// jittered rig point, with a bounded roll about the optical axis.
fn sample_camera_pose(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Pose {
    let r = rng.random_range(cfg.distance_mm[0]..cfg.distance_mm[1]);
    let phi = rng.random_range(0.0..cfg.cone_max_deg.to_radians());
    let psi = rng.random_range(0.0..std::f64::consts::TAU);
    let center = Vector3::new(
        r * phi.sin() * psi.cos(),
        r * phi.sin() * psi.sin(),
        -r * phi.cos(),
    );
    let target = Vector3::new(
        uniform_pm(rng, cfg.target_jitter_mm),
        uniform_pm(rng, cfg.target_jitter_mm),
        uniform_pm(rng, cfg.target_jitter_mm),
    );

    let z_axis = (target - center).normalize();
    let x_axis = Vector3::y().cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    // Rows of R are the camera axes, so p = R X + t lands in camera coords.
    let base = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let roll = UnitQuaternion::from_axis_angle(
        &Vector3::z_axis(),
        uniform_pm(rng, cfg.roll_max_deg.to_radians()),
    );
    let rotation = roll * UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(base));
    let translation = -(rotation * center);
    Pose::new(rotation, translation)
}

/// Generates one frame: lens state, visible camera pose, rendered pixels,
/// and the prior-frame reconstruction of the 3D points.
pub fn sample_frame(
    cfg: &SimConfig,
    rig: &RigSpec,
    k_prior: &Intrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<SimFrame, SimError> {
    cfg.validate()?;
    let points = rig.vertices();
    let lens = sample_lens(cfg, rng);
    let k_true = k_manifold(cfg, &lens);
    k_true.validate().map_err(SimError::Geometry)?;

    for _ in 0..cfg.max_pose_draws {
        let camera_pose = sample_camera_pose(cfg, rng);
        let mut pixels = Vec::with_capacity(points.len());
        let mut visible = true;
        for point in &points {
            match crate::geometry::project(&k_true, &camera_pose, point) {
                Ok(px)
                    if px.x >= 0.0
                        && px.x < cfg.image_width
                        && px.y >= 0.0
                        && px.y < cfg.image_height =>
                {
                    pixels.push(px)
                }
                _ => {
                    visible = false;
                    break;
                }
            }
        }
        if !visible {
            continue;
        }

        let rig_corrs: Vec<Correspondence> = pixels
            .iter()
            .zip(&points)
            .map(|(px, pt)| Correspondence::new(*px, *pt))
            .collect();
        // The pose a consumer trusting the prior intrinsics would estimate.
        // A failed solve means a freak geometry; redraw the pose.
        let Ok(prior_solution) = solve_pnp(k_prior, &rig_corrs, &PnpConfig::default(), None) else {
            continue;
        };
        let prior_pose = prior_solution.pose;
        let correspondences = rig_corrs
            .iter()
            .map(|c| Correspondence::new(c.pixel, prior_pose.transform(&c.point)))
            .collect();
        return Ok(SimFrame {
            correspondences,
            k_true,
            k_prior: *k_prior,
            lens,
            camera_pose,
            prior_pose,
        });
    }
    Err(SimError::NoValidPose { draws: cfg.max_pose_draws })
}

/// Generates a seeded batch of frames against a fixed prior.
pub fn generate_frames(
    cfg: &SimConfig,
    rig: &RigSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<SimFrame>, SimError> {
    let k_prior = average_manifold_k(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_frame(cfg, rig, &k_prior, &mut rng)).collect()
}

/// Adds isotropic Gaussian noise: `sigma_2d` (pixels) on observations,
/// `sigma_3d` (mm) on points. Zero sigmas return the input bit for bit.
pub fn inject_noise(
    corrs: &[Correspondence],
    sigma_2d: f64,
    sigma_3d: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Correspondence>, SimError> {
    if sigma_2d < 0.0 || sigma_2d.is_nan() || sigma_3d < 0.0 || sigma_3d.is_nan() {
        return Err(SimError::InvalidConfig("noise sigmas must be nonnegative".into()));
    }
    let n2 = Normal::new(0.0, sigma_2d)
        .map_err(|e| SimError::InvalidConfig(format!("pixel noise: {e}")))?;
    let n3 = Normal::new(0.0, sigma_3d)
        .map_err(|e| SimError::InvalidConfig(format!("point noise: {e}")))?;
    Ok(corrs
        .iter()
        .map(|c| {
            let mut pixel = c.pixel;
            if sigma_2d > 0.0 {
                pixel += Vector2::new(n2.sample(rng), n2.sample(rng));
            }
            let mut point = c.point;
            if sigma_3d > 0.0 {
                point += Vector3::new(n3.sample(rng), n3.sample(rng), n3.sample(rng));
            }
            Correspondence::new(pixel, point)
        })
        .collect())
}

/// Keeps a uniform random subset of `keep` correspondences, preserving the
/// original order.
pub fn drop_points(
    corrs: &[Correspondence],
    keep: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Correspondence>, SimError> {
    if keep == 0 || keep > corrs.len() {
        return Err(SimError::InvalidKeep { keep, available: corrs.len() });
    }
    let mut indices = rand::seq::index::sample(rng, corrs.len(), keep).into_vec();
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| corrs[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_point_features;
    use crate::geometry::{mle_refine_intrinsics, reprojection_errors};
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;

    #[test]
    fn single_flat_board_spans_its_cell_grid() {
        let rig = RigSpec {
            board: BoardSpec::default(),
            placements: vec![BoardPlacement { center_mm: [0.0; 3], tilt_x_deg: 0.0, tilt_y_deg: 0.0 }],
        };
        let verts = rig.vertices();
        assert_eq!(verts.len(), 80);
        let xs: Vec<f64> = verts.iter().map(|v| v.x).collect();
        let ys: Vec<f64> = verts.iter().map(|v| v.y).collect();
        let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        assert_relative_eq!(span(&xs), 198.0, max_relative = 1e-12);
        assert_relative_eq!(span(&ys), 154.0, max_relative = 1e-12);
        assert!(verts.iter().all(|v| v.z == 0.0));
    }

    #[test]
    fn default_rig_has_320_spread_points() {
        let rig = RigSpec::default();
        let verts = rig.vertices();
        assert_eq!(verts.len(), 320);
        let zs: Vec<f64> = verts.iter().map(|v| v.z).collect();
        let depth_span = zs.iter().cloned().fold(f64::MIN, f64::max) - zs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(depth_span > 80.0, "rig should be strongly non planar, depth span {depth_span}");
    }

    #[test]
    fn fingerprint_tracks_layout_changes() {
        let rig = RigSpec::default();
        assert_eq!(rig.fingerprint(), RigSpec::default().fingerprint());
        let mut moved = rig.clone();
        moved.placements[2].center_mm[0] += 1.0;
        assert_ne!(rig.fingerprint(), moved.fingerprint());
        let mut resized = rig.clone();
        resized.board.cell_mm = 21.0;
        assert_ne!(rig.fingerprint(), resized.fingerprint());
    }

    #[test]
    fn manifold_at_rest_is_nominal() {
        let cfg = SimConfig::default();
        let k = k_manifold(&cfg, &LensState::default());
        assert_eq!(k.to_vector(), cfg.nominal.to_vector());
    }

    #[test]
    fn manifold_tilt_moves_principal_point_only() {
        let cfg = SimConfig::default();
        let theta = 0.02f64;
        let k = k_manifold(&cfg, &LensState { theta_x: 0.0, theta_y: theta, shift_z: 0.0 });
        assert_relative_eq!(k.cx - cfg.nominal.cx, cfg.gain * cfg.nominal.fx * theta.tan(), max_relative = 1e-12);
        assert_eq!(k.cy, cfg.nominal.cy);
        assert_eq!(k.fx, cfg.nominal.fx);

        let k = k_manifold(&cfg, &LensState { theta_x: theta, theta_y: 0.0, shift_z: 0.0 });
        assert_relative_eq!(k.cy - cfg.nominal.cy, cfg.gain * cfg.nominal.fy * theta.tan(), max_relative = 1e-12);
        assert_eq!(k.cx, cfg.nominal.cx);
    }

    #[test]
    fn manifold_axial_shift_scales_focals() {
        let cfg = SimConfig { shift_max_mm: 0.2, ..SimConfig::default() };
        let k = k_manifold(&cfg, &LensState { theta_x: 0.0, theta_y: 0.0, shift_z: cfg.z_ref_mm * 0.5 });
        assert_relative_eq!(k.fx, cfg.nominal.fx * 1.5, max_relative = 1e-12);
        assert_relative_eq!(k.fy, cfg.nominal.fy * 1.5, max_relative = 1e-12);
        assert_eq!(k.cx, cfg.nominal.cx);
    }

    #[test]
    fn prior_is_near_nominal_for_symmetric_tilts() {
        let cfg = SimConfig::default();
        let kc = average_manifold_k(&cfg).unwrap();
        // Tilt-only default: focals are untouched, the principal point mean
        // wanders by the Monte Carlo error of ~1000 uniform draws.
        assert_eq!(kc.fx, cfg.nominal.fx);
        assert_eq!(kc.fy, cfg.nominal.fy);
        let sigma = cfg.gain * cfg.nominal.fx * cfg.tilt_max_deg.to_radians()
            / (3.0f64.sqrt() * (MANIFOLD_MEAN_SAMPLES as f64).sqrt());
        assert!((kc.cx - cfg.nominal.cx).abs() < 4.0 * sigma, "cx drift {}", kc.cx - cfg.nominal.cx);
        assert!((kc.cy - cfg.nominal.cy).abs() < 4.0 * sigma, "cy drift {}", kc.cy - cfg.nominal.cy);
        // And it is a pure function of the config.
        assert_eq!(kc.to_vector(), average_manifold_k(&cfg).unwrap().to_vector());
    }

    #[test]
    fn frames_are_consistent_with_their_own_labels() {
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frames = generate_frames(&cfg, &rig, 3, 42).unwrap();
        let world = rig.vertices();
        for frame in &frames {
            assert_eq!(frame.correspondences.len(), 320);

            // Solving with the true intrinsics against rig coordinates must
            // recover the true camera pose and a near-zero residual.
            let rig_corrs: Vec<Correspondence> = frame
                .correspondences
                .iter()
                .zip(&world)
                .map(|(c, w)| Correspondence::new(c.pixel, *w))
                .collect();
            let sol = solve_pnp(&frame.k_true, &rig_corrs, &PnpConfig::default(), None).unwrap();
            assert!(sol.pose.rotation_angle_to(&frame.camera_pose) < 1e-6);
            assert!(sol.pose.translation_distance_to(&frame.camera_pose) < 1e-3);
            assert!(sol.mean_error < 1e-6, "true-K residual {}", sol.mean_error);

            // Solving with the prior against the stored (prior-frame) points
            // must land on the identity: that is how the points were built.
            let sol_prior =
                solve_pnp(&frame.k_prior, &frame.correspondences, &PnpConfig::default(), None)
                    .unwrap();
            assert!(sol_prior.pose.rotation_angle_to(&Pose::identity()) < 1e-6);
            assert!(sol_prior.pose.translation_distance_to(&Pose::identity()) < 1e-3);
        }
    }

    #[test]
    fn prior_residual_sits_in_the_calibrated_band() {
        // The stabilizer gain and tilt range are tuned so that trusting the
        // prior intrinsics costs a few pixels of reprojection error, while
        // the per-frame truth explains the pixels almost exactly.
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frames = generate_frames(&cfg, &rig, 30, 7).unwrap();
        let mut prior_sum = 0.0;
        let mut true_sum = 0.0;
        for frame in &frames {
            let sol =
                solve_pnp(&frame.k_prior, &frame.correspondences, &PnpConfig::default(), None)
                    .unwrap();
            prior_sum += sol.mean_error;
            let sol_true =
                solve_pnp(&frame.k_true, &frame.correspondences, &PnpConfig::default(), None)
                    .unwrap();
            true_sum += sol_true.mean_error;
        }
        let prior_avg = prior_sum / frames.len() as f64;
        let true_avg = true_sum / frames.len() as f64;
        assert!(
            (2.0..=5.0).contains(&prior_avg),
            "prior residual {prior_avg:.3} px outside the 2..5 px design band"
        );
        assert!(true_avg < 0.02 * prior_avg, "true-K residual {true_avg:.3e} should be negligible");
    }

    #[test]
    fn resting_lens_produces_zero_discrepancies() {
        let cfg = SimConfig { tilt_max_deg: 0.0, shift_max_mm: 0.0, ..SimConfig::default() };
        let rig = RigSpec::default();
        let frames = generate_frames(&cfg, &rig, 2, 11).unwrap();
        for frame in &frames {
            assert_eq!(frame.k_true.to_vector(), frame.k_prior.to_vector());
            let feats = build_point_features(&frame.k_prior, &frame.correspondences).unwrap();
            for f in feats {
                assert!(f.pmd.norm() < 1e-6, "discrepancy {} for a resting lens", f.pmd.norm());
            }
        }
    }

    #[test]
    fn joint_refinement_recovers_the_true_intrinsics() {
        // The frame's points were rebuilt in the prior camera frame, which
        // reparameterizes but does not destroy the intrinsics signal.
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frames = generate_frames(&cfg, &rig, 4, 99).unwrap();
        for frame in &frames {
            let refined =
                mle_refine_intrinsics(&frame.k_prior, &frame.correspondences, &PnpConfig::default())
                    .unwrap();
            let err = (refined.intrinsics.to_vector() - frame.k_true.to_vector()).abs();
            let scale = frame.k_true.to_vector().abs();
            for i in 0..4 {
                assert!(
                    err[i] / scale[i] < 1e-3,
                    "component {i}: refined {} vs true {}",
                    refined.intrinsics.to_vector()[i],
                    frame.k_true.to_vector()[i]
                );
            }
            assert!(refined.mean_error < 0.05, "joint residual {}", refined.mean_error);
        }
    }

    #[test]
    fn noise_injection_matches_requested_spread() {
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frame = &generate_frames(&cfg, &rig, 1, 5).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let noisy = inject_noise(&frame.correspondences, 3.0, 0.2, &mut rng).unwrap();

        let d2: Vec<f64> = noisy
            .iter()
            .zip(&frame.correspondences)
            .flat_map(|(n, c)| [n.pixel.x - c.pixel.x, n.pixel.y - c.pixel.y])
            .collect();
        let d3: Vec<f64> = noisy
            .iter()
            .zip(&frame.correspondences)
            .flat_map(|(n, c)| {
                let d = n.point - c.point;
                [d.x, d.y, d.z]
            })
            .collect();
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        // 640 and 960 samples: the sample deviation lands within ~10%.
        assert_relative_eq!(std(&d2), 3.0, max_relative = 0.1);
        assert_relative_eq!(std(&d3), 0.2, max_relative = 0.1);

        let clean = inject_noise(&frame.correspondences, 0.0, 0.0, &mut rng).unwrap();
        for (a, b) in clean.iter().zip(&frame.correspondences) {
            assert_eq!(a.pixel.x.to_bits(), b.pixel.x.to_bits());
            assert_eq!(a.pixel.y.to_bits(), b.pixel.y.to_bits());
            assert_eq!(a.point, b.point);
        }
    }

    #[test]
    fn reprojection_error_doubles_with_pixel_noise_scale() {
        // Structural check on the noise path: doubling sigma roughly doubles
        // the clean-pose reprojection error against noisy observations.
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frame = &generate_frames(&cfg, &rig, 1, 6).unwrap()[0];
        let cov = Matrix2::identity();
        let mut err = [0.0f64; 2];
        for (slot, sigma) in [(0usize, 1.0f64), (1usize, 2.0f64)] {
            let mut rng = ChaCha8Rng::seed_from_u64(777);
            let noisy = inject_noise(&frame.correspondences, sigma, 0.0, &mut rng).unwrap();
            let sol = solve_pnp(&frame.k_true, &noisy, &PnpConfig::default(), None).unwrap();
            err[slot] = reprojection_errors(&frame.k_true, &sol.pose, &noisy, &cov).unwrap().mean;
        }
        assert_relative_eq!(err[1] / err[0], 2.0, max_relative = 0.15);
    }

    #[test]
    fn drop_points_keeps_order_and_rejects_bad_counts() {
        let cfg = SimConfig::default();
        let rig = RigSpec::default();
        let frame = &generate_frames(&cfg, &rig, 1, 8).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kept = drop_points(&frame.correspondences, 64, &mut rng).unwrap();
        assert_eq!(kept.len(), 64);

        // Order preservation: kept pixels appear in the same relative order
        // as in the source list.
        let mut cursor = 0usize;
        for k in &kept {
            let pos = frame.correspondences[cursor..]
                .iter()
                .position(|c| c.pixel == k.pixel && c.point == k.point)
                .expect("kept point must come from the source, in order");
            cursor += pos + 1;
        }

        assert!(matches!(
            drop_points(&frame.correspondences, 0, &mut rng),
            Err(SimError::InvalidKeep { .. })
        ));
        assert!(matches!(
            drop_points(&frame.correspondences, 321, &mut rng),
            Err(SimError::InvalidKeep { keep: 321, available: 320 })
        ));
    }
}
