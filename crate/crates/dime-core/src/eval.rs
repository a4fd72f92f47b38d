//! Evaluation protocol: error reduction metrics, point-dropping and
//! noise-injection stress tests, and ablation sweeps.
//!
//! Each frame is scored by three reprojection errors, all measured on the
//! same (possibly subsampled, possibly noisy) correspondence set:
//!
//! * `Avg(e_c)`: pose solved under the prior intrinsics. What a pipeline
//!   that ignores the stabilizer would see.
//! * `Avg(e)`: pose re-solved under the network-corrected intrinsics.
//! * `Avg(e*)`: joint pose-plus-intrinsics refinement, the best any
//!   correction could reach on this frame without overfitting noise.
//!
//! The reduction ratio `rho = (Avg(e_c) - Avg(e)) / (Avg(e_c) - Avg(e*))`
//! reads as "fraction of the recoverable error actually recovered". It is
//! deliberately not clamped; values outside [0, 1] are evidence, not bugs.
//!
//! Frame transforms are applied in a fixed order: uniform point dropping
//! first, then coordinate noise, then feature-cell emptying. Dropping and
//! noise alter the frame itself (every solve sees them); cell emptying and
//! out-of-bounds noisy pixels only thin the feature path, because a pixel
//! the camera never recorded still constrains the pose, it just has no grid
//! cell to live in.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    build_point_features, flatten, gridify, FeatureError, FeatureMask, GridConfig, PointFeature,
};
use crate::geometry::{
    mle_refine_intrinsics, solve_pnp, Correspondence, GeometryError, PnpConfig, MIN_DEPTH_MM,
};
use crate::mlp::{mlp_forward, MlpError, MlpModel};
use crate::sim::{drop_points, inject_noise, SimError};
use crate::train::{train, TrainConfig, TrainSample};

/// Treat the baseline and the refined optimum as coincident below this gap.
pub const RHO_DEGENERACY_MARGIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(
        "prior error {avg_ec} does not exceed the refined optimum {avg_estar}; \
         the reduction ratio is undefined"
    )]
    DegenerateBaseline { avg_ec: f64, avg_estar: f64 },
    #[error("invalid evaluation protocol: {0}")]
    InvalidProtocol(String),
    #[error("model expects {model} inputs but the grid produces {grid}")]
    ModelGridMismatch { model: usize, grid: usize },
    #[error("no frame survived evaluation ({skipped} skipped)")]
    NoUsableFrames { skipped: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Reprojection error reduction ratio. Not clamped: a correction worse than
/// the prior goes negative, one beyond the refined optimum exceeds 1.
pub fn rho(avg_ec: f64, avg_e: f64, avg_estar: f64) -> Result<f64, EvalError> {
    if avg_ec <= avg_estar + RHO_DEGENERACY_MARGIN {
        return Err(EvalError::DegenerateBaseline { avg_ec, avg_estar });
    }
    Ok((avg_ec - avg_e) / (avg_ec - avg_estar))
}

/// How to stress the frames before scoring them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub grid: GridConfig,
    pub mask: FeatureMask,
    /// Uniformly subsample each frame to this many correspondences first.
    /// Frames that already have fewer are left whole.
    pub keep_points: Option<usize>,
    /// Fraction of occupied feature cells to empty, drawn uniformly per
    /// frame. Affects the feature path only.
    pub drop_eta: f64,
    /// Gaussian pixel noise added to every 2D observation.
    pub sigma_2d_px: f64,
    /// Gaussian noise added to every 3D coordinate.
    pub sigma_3d_mm: f64,
    pub seed: u64,
    pub pnp: PnpConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            grid: GridConfig::new(8, 6, 4032.0, 3024.0).expect("default grid is valid"),
            mask: FeatureMask::All,
            keep_points: None,
            drop_eta: 0.0,
            sigma_2d_px: 0.0,
            sigma_3d_mm: 0.0,
            seed: 0,
            pnp: PnpConfig::default(),
        }
    }
}

impl EvalProtocol {
    fn validate(&self) -> Result<(), EvalError> {
        if let Some(keep) = self.keep_points {
            if keep == 0 {
                return Err(EvalError::InvalidProtocol("keep_points must be at least 1".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.drop_eta) {
            return Err(EvalError::InvalidProtocol(format!(
                "drop_eta {} must lie in [0, 1]",
                self.drop_eta
            )));
        }
        if self.sigma_2d_px < 0.0 || self.sigma_3d_mm < 0.0 {
            return Err(EvalError::InvalidProtocol("noise sigmas must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    /// Index of the frame in the input dataset.
    pub frame: usize,
    /// Correspondences every solve ran on (after dropping and noise).
    pub points_used: usize,
    /// Points that reached the final feature map.
    pub feature_points: usize,
    pub avg_ec: f64,
    pub avg_e: f64,
    pub avg_estar: f64,
    /// Per-frame reduction ratio; absent when the frame is degenerate.
    pub rho: Option<f64>,
    /// Occupancy of the feature map actually fed to the network.
    pub gamma: f64,
    /// Measured fraction of occupied cells that were emptied.
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub frames_evaluated: usize,
    pub frames_skipped: usize,
    pub avg_ec: f64,
    pub avg_e: f64,
    pub avg_estar: f64,
    /// Reduction ratio of the aggregate averages; absent when degenerate.
    pub rho: Option<f64>,
    pub mean_gamma: f64,
    pub mean_eta: f64,
}

/// Full result of one evaluation run. Contains no clocks or hostnames, so
/// identical inputs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub aggregate: EvalAggregate,
    pub frames: Vec<FrameEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization is total");
        s.push('\n');
        s
    }

    /// Per-frame rows; the aggregate lives in the JSON and console forms.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("frame,points_used,feature_points,avg_ec,avg_e,avg_estar,rho,gamma,eta\n");
        for f in &self.frames {
            let rho = f.rho.map(|r| r.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                f.frame,
                f.points_used,
                f.feature_points,
                f.avg_ec,
                f.avg_e,
                f.avg_estar,
                rho,
                f.gamma,
                f.eta
            )
            .expect("writing to a string cannot fail");
        }
        out
    }

    pub fn format_console(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        writeln!(out, "frames evaluated: {} (skipped {})", a.frames_evaluated, a.frames_skipped)
            .unwrap();
        writeln!(
            out,
            "mean occupancy gamma: {:.3}   mean emptied fraction eta: {:.3}",
            a.mean_gamma, a.mean_eta
        )
        .unwrap();
        writeln!(out, "Avg(e_c) = {:.4} px   prior intrinsics", a.avg_ec).unwrap();
        writeln!(out, "Avg(e)   = {:.4} px   corrected intrinsics", a.avg_e).unwrap();
        writeln!(out, "Avg(e*)  = {:.4} px   jointly refined optimum", a.avg_estar).unwrap();
        match a.rho {
            Some(r) => writeln!(out, "rho      = {:.4} ({:.1}% of recoverable error)", r, 100.0 * r)
                .unwrap(),
            None => writeln!(out, "rho      = undefined (prior already optimal)").unwrap(),
        }
        out
    }
}

/// Scores a dataset. `model: None` evaluates the uncorrected prior, which
/// pins `Avg(e) = Avg(e_c)` and `rho = 0` exactly.
pub fn evaluate(
    model: Option<&MlpModel>,
    samples: &[TrainSample],
    protocol: &EvalProtocol,
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    if let Some(m) = model {
        if m.input_dim() != protocol.grid.feature_len() {
            return Err(EvalError::ModelGridMismatch {
                model: m.input_dim(),
                grid: protocol.grid.feature_len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut frames = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;

    for (index, sample) in samples.iter().enumerate() {
        match evaluate_frame(model, sample, index, protocol, &mut rng) {
            Ok(f) => frames.push(f),
            // Per-frame numerical failures skip the frame; the report
            // carries the count so silent attrition is visible.
            Err(
                EvalError::Feature(_)
                | EvalError::Geometry(_)
                | EvalError::Mlp(_)
                | EvalError::Sim(_),
            ) => skipped += 1,
            Err(fatal) => return Err(fatal),
        }
    }

    if frames.is_empty() {
        return Err(EvalError::NoUsableFrames { skipped });
    }

    let n = frames.len() as f64;
    let avg_ec = frames.iter().map(|f| f.avg_ec).sum::<f64>() / n;
    let avg_e = frames.iter().map(|f| f.avg_e).sum::<f64>() / n;
    let avg_estar = frames.iter().map(|f| f.avg_estar).sum::<f64>() / n;
    let aggregate = EvalAggregate {
        frames_evaluated: frames.len(),
        frames_skipped: skipped,
        avg_ec,
        avg_e,
        avg_estar,
        rho: rho(avg_ec, avg_e, avg_estar).ok(),
        mean_gamma: frames.iter().map(|f| f.gamma).sum::<f64>() / n,
        mean_eta: frames.iter().map(|f| f.eta).sum::<f64>() / n,
    };

    Ok(EvalReport { protocol: protocol.clone(), aggregate, frames })
}

fn evaluate_frame(
    model: Option<&MlpModel>,
    sample: &TrainSample,
    index: usize,
    protocol: &EvalProtocol,
    rng: &mut ChaCha8Rng,
) -> Result<FrameEval, EvalError> {
    let kc = &sample.k_prior;

    // Frame transforms. All rng draws happen before anything can fail
    // numerically, so a skipped frame never shifts its successors' draws.
    let mut corrs = sample.correspondences.clone();
    if let Some(keep) = protocol.keep_points {
        if keep < corrs.len() {
            corrs = drop_points(&corrs, keep, rng)?;
        }
    }
    if protocol.sigma_2d_px > 0.0 || protocol.sigma_3d_mm > 0.0 {
        corrs = inject_noise(&corrs, protocol.sigma_2d_px, protocol.sigma_3d_mm, rng)?;
    }

    // Feature path: only points that still land on the sensor with positive
    // depth can occupy a cell.
    let feature_corrs: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| c.point.z > MIN_DEPTH_MM && protocol.grid.cell_of(&c.pixel).is_some())
        .cloned()
        .collect();
    let points = build_point_features(kc, &feature_corrs)?;
    let map_full = gridify(&points, &protocol.grid)?;
    let m_p = map_full.occupied_cells();

    let (final_points, eta_measured) = if m_p == 0 {
        (points, 0.0)
    } else {
        let n_drop = (protocol.drop_eta * m_p as f64).round() as usize;
        let occupied: Vec<(usize, usize)> = (0..protocol.grid.rows)
            .flat_map(|r| (0..protocol.grid.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| map_full.count(r, c) > 0)
            .collect();
        let emptied: HashSet<(usize, usize)> = rand::seq::index::sample(rng, m_p, n_drop)
            .into_iter()
            .map(|i| occupied[i])
            .collect();
        let kept: Vec<PointFeature> = points
            .into_iter()
            .filter(|p| {
                let cell = protocol.grid.cell_of(&p.pixel).expect("feature pixels are in bounds");
                !emptied.contains(&cell)
            })
            .collect();
        (kept, n_drop as f64 / m_p as f64)
    };

    let map_final = gridify(&final_points, &protocol.grid)?;
    let gamma = map_final.occupied_cells() as f64 / protocol.grid.cell_count() as f64;
    let mut flat = flatten(&map_final);
    protocol.mask.apply(&mut flat);

    let k_hat = match model {
        Some(m) => kc.shifted(&mlp_forward(m, &flat.values)?)?,
        None => *kc,
    };

    let prior = solve_pnp(kc, &corrs, &protocol.pnp, None)?;
    let corrected = solve_pnp(&k_hat, &corrs, &protocol.pnp, None)?;
    let refined = mle_refine_intrinsics(kc, &corrs, &protocol.pnp)?;

    Ok(FrameEval {
        frame: index,
        points_used: corrs.len(),
        feature_points: final_points.len(),
        avg_ec: prior.mean_error,
        avg_e: corrected.mean_error,
        avg_estar: refined.mean_error,
        rho: rho(prior.mean_error, corrected.mean_error, refined.mean_error).ok(),
        gamma,
        eta: eta_measured,
    })
}

/// One row of the feature-ablation table. `None` marks a configuration
/// whose training or evaluation failed; the gap is data too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAblationRow {
    pub mask: FeatureMask,
    pub avg_e: Option<f64>,
    pub rho: Option<f64>,
}

/// Trains one model per feature mask (masking is applied before training)
/// and scores each on the held-out frames.
pub fn ablate_feature_masks(
    train_samples: &[TrainSample],
    eval_samples: &[TrainSample],
    base_train: &TrainConfig,
    base_protocol: &EvalProtocol,
    masks: &[FeatureMask],
) -> Vec<MaskAblationRow> {
    masks
        .iter()
        .map(|&mask| {
            let tcfg = TrainConfig { mask, ..base_train.clone() };
            let protocol = EvalProtocol { mask, ..base_protocol.clone() };
            let outcome = train(train_samples, &tcfg)
                .map_err(|_| ())
                .and_then(|r| evaluate(Some(&r.model), eval_samples, &protocol).map_err(|_| ()));
            match outcome {
                Ok(report) => MaskAblationRow {
                    mask,
                    avg_e: Some(report.aggregate.avg_e),
                    rho: report.aggregate.rho,
                },
                Err(()) => MaskAblationRow { mask, avg_e: None, rho: None },
            }
        })
        .collect()
}

/// One cell of the resolution-by-occupancy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEtaRow {
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub requested_eta: f64,
    pub mean_gamma: Option<f64>,
    pub mean_eta: Option<f64>,
    pub avg_e: Option<f64>,
}

/// Trains one model per grid resolution, then sweeps the cell-emptying
/// fraction at evaluation time. Row order: grids outer, etas inner.
pub fn ablate_grid_occupancy(
    train_samples: &[TrainSample],
    eval_samples: &[TrainSample],
    base_train: &TrainConfig,
    base_protocol: &EvalProtocol,
    grids: &[GridConfig],
    etas: &[f64],
) -> Vec<GridEtaRow> {
    let mut rows = Vec::with_capacity(grids.len() * etas.len());
    for grid in grids {
        let tcfg = TrainConfig { grid: *grid, ..base_train.clone() };
        let model = train(train_samples, &tcfg).ok().map(|r| r.model);
        for &eta in etas {
            let row = model
                .as_ref()
                .and_then(|m| {
                    let protocol =
                        EvalProtocol { grid: *grid, drop_eta: eta, ..base_protocol.clone() };
                    evaluate(Some(m), eval_samples, &protocol).ok()
                })
                .map(|report| GridEtaRow {
                    grid_cols: grid.cols,
                    grid_rows: grid.rows,
                    requested_eta: eta,
                    mean_gamma: Some(report.aggregate.mean_gamma),
                    mean_eta: Some(report.aggregate.mean_eta),
                    avg_e: Some(report.aggregate.avg_e),
                });
            rows.push(row.unwrap_or(GridEtaRow {
                grid_cols: grid.cols,
                grid_rows: grid.rows,
                requested_eta: eta,
                mean_gamma: None,
                mean_eta: None,
                avg_e: None,
            }));
        }
    }
    rows
}
