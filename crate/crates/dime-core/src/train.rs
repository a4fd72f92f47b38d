//! Training loop: correction network, grid features, and the differentiable
//! pose solver wired end to end.
//!
//! The loss is self supervised. For a frame with prior intrinsics `kc`, the
//! network predicts a correction from the frame's grid features, the solver
//! estimates a pose under the corrected intrinsics, and the loss is the mean
//! Mahalanobis reprojection error at that pose. Its gradient with respect to
//! the correction has two parts: the direct dependence of the reprojection on
//! the intrinsics, and the implicit dependence through the argmin pose. Both
//! flow back through the network.
//!
//! Feature vectors do not depend on the network, so they are computed once
//! per sample up front. Per-channel input scaling (RMS over the training
//! split) is fitted by default: raw channels mix pixels, millimeters, and
//! reciprocal millimeters, and unscaled they push the first hidden layer
//! into tanh saturation.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpnp::{bpnp_backward, loss_reprojection, BpnpError, HessianMode};
use crate::features::{
    build_point_features, flatten, gridify, FeatureError, FeatureMask, GridConfig,
    FEATURE_CHANNELS,
};
use crate::geometry::{solve_pnp, Correspondence, GeometryError, Intrinsics, PnpConfig, Pose};
use crate::mlp::{
    mlp_backward, mlp_forward, mlp_forward_cached, mlp_init_with, Activation, MlpError, MlpModel,
    OUTPUT_DIM,
};
use crate::sim::SimFrame;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one sample")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NanLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

/// First-order update rule. Adam is the default; plain SGD is kept for
/// experiments where the adaptive scaling is unwanted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub grid: GridConfig,
    pub mask: FeatureMask,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of samples held out for validation (rounded, at least one
    /// sample when positive).
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: Optimizer,
    /// Fit per-channel RMS input scaling on the training split.
    pub fit_input_scale: bool,
    /// Reuse each sample's previous pose as the solver starting point.
    pub warm_start: bool,
    /// Hessian assembly for the implicit gradient.
    pub hessian: HessianMode,
    pub pnp: PnpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grid: GridConfig::new(8, 6, 4032.0, 3024.0).expect("default grid is valid"),
            mask: FeatureMask::All,
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            val_fraction: 0.2,
            patience: None,
            hidden: vec![256, 64],
            activation: Activation::Tanh,
            optimizer: Optimizer::default(),
            fit_input_scale: true,
            warm_start: false,
            hessian: HessianMode::GaussNewton,
            pnp: PnpConfig::default(),
        }
    }
}

/// One training frame: a prior and the correspondences observed under it.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub k_prior: Intrinsics,
    pub correspondences: Vec<Correspondence>,
    /// Ground truth when the sample is synthetic; ignored by the loss.
    pub k_true: Option<Intrinsics>,
}

impl From<&SimFrame> for TrainSample {
    fn from(frame: &SimFrame) -> Self {
        TrainSample {
            k_prior: frame.k_prior,
            correspondences: frame.correspondences.clone(),
            k_true: Some(frame.k_true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the processed training samples.
    pub train_loss: f64,
    /// Mean held-out loss; absent when the validation split is empty.
    pub val_loss: Option<f64>,
    /// Samples dropped this epoch (failed solves, non-stationary poses,
    /// singular Hessians, corrections pushing a focal nonpositive).
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Best model by validation loss (training loss when no split).
    pub model: MlpModel,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Grid features for one frame under its prior, masked and flattened.
pub fn frame_features(
    kc: &Intrinsics,
    corrs: &[Correspondence],
    grid: &GridConfig,
    mask: FeatureMask,
) -> Result<DVector<f64>, TrainError> {
    let points = build_point_features(kc, corrs)?;
    let map = gridify(&points, grid)?;
    let mut flat = flatten(&map);
    mask.apply(&mut flat);
    Ok(flat.values)
}

/// Applies a trained model to one frame: features under the prior, a
/// predicted correction, and the corrected intrinsics.
pub fn infer_k(
    model: &MlpModel,
    kc: &Intrinsics,
    corrs: &[Correspondence],
    grid: &GridConfig,
    mask: FeatureMask,
) -> Result<Intrinsics, TrainError> {
    let features = frame_features(kc, corrs, grid, mask)?;
    let delta = mlp_forward(model, &features)?;
    Ok(kc.shifted(&delta)?)
}

pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(TrainError::InvalidConfig("val_fraction must be in [0, 1)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Features are model independent; compute them once.
    let features: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| frame_features(&s.k_prior, &s.correspondences, &cfg.grid, cfg.mask))
        .collect::<Result<_, _>>()?;

    // Seeded split. Validation size is rounded but forced into [1, n-1]
    // whenever a split is requested at all.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if cfg.val_fraction == 0.0 || samples.len() < 2 {
        0
    } else {
        ((samples.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, samples.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut dims = Vec::with_capacity(cfg.hidden.len() + 2);
    dims.push(cfg.grid.feature_len());
    dims.extend_from_slice(&cfg.hidden);
    dims.push(OUTPUT_DIM);
    let mut model = mlp_init_with(&dims, cfg.activation, false, cfg.seed)?;
    if cfg.fit_input_scale {
        model.input_scale = Some(fit_rms_scale(&features, &train_idx));
    }

    let mut optimizer = OptimizerState::new(&model);
    let mut warm_poses: Vec<Option<Pose>> = vec![None; samples.len()];

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut skipped = 0usize;

        for batch in train_idx.chunks(cfg.batch_size) {
            let mut grads: Option<crate::mlp::MlpGradients> = None;
            let mut batch_count = 0usize;
            for &i in batch {
                let sample = &samples[i];
                match sample_gradient(&model, sample, &features[i], cfg, &mut warm_poses[i]) {
                    Ok(Some((loss, sample_grads))) => {
                        if !loss.is_finite() {
                            return Err(TrainError::NanLoss { epoch });
                        }
                        epoch_loss += loss;
                        epoch_count += 1;
                        batch_count += 1;
                        grads = Some(match grads.take() {
                            None => sample_grads,
                            Some(mut acc) => {
                                for (a, g) in acc.weights.iter_mut().zip(&sample_grads.weights) {
                                    *a += g;
                                }
                                for (a, g) in acc.biases.iter_mut().zip(&sample_grads.biases) {
                                    *a += g;
                                }
                                acc
                            }
                        });
                    }
                    Ok(None) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let Some(mut grads) = grads else { continue };
            let scale = 1.0 / batch_count as f64;
            for g in grads.weights.iter_mut() {
                *g *= scale;
            }
            for g in grads.biases.iter_mut() {
                *g *= scale;
            }
            if grads.weights.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NanLoss { epoch });
            }
            optimizer.step(&mut model, &grads, cfg);
        }

        let train_loss = if epoch_count > 0 { epoch_loss / epoch_count as f64 } else { f64::NAN };
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(validation_loss(&model, samples, &features, &val_idx, cfg))
        };
        curve.push(EpochStats { epoch, train_loss, val_loss, skipped });

        let tracked = val_loss.unwrap_or(train_loss);
        if tracked.is_finite() && tracked < best_loss {
            best_loss = tracked;
            best_epoch = epoch;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if let Some(patience) = cfg.patience {
                if stale > patience {
                    break;
                }
            }
        }
    }

    Ok(TrainReport { model: best_model, curve, best_epoch, best_loss })
}

/// Loss and parameter gradients for one sample, or `None` when the sample
/// cannot contribute this step (failed solve, non-stationary pose, singular
/// Hessian, correction driving a focal nonpositive).
fn sample_gradient(
    model: &MlpModel,
    sample: &TrainSample,
    features: &DVector<f64>,
    cfg: &TrainConfig,
    warm: &mut Option<Pose>,
) -> Result<Option<(f64, crate::mlp::MlpGradients)>, TrainError> {
    let cache = mlp_forward_cached(model, features)?;
    let Ok(k_hat) = sample.k_prior.shifted(&cache.output()) else {
        return Ok(None);
    };

    let init = if cfg.warm_start { warm.as_ref() } else { None };
    let solution = match solve_pnp(&k_hat, &sample.correspondences, &cfg.pnp, init) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };
    if cfg.warm_start {
        *warm = Some(solution.pose);
    }

    let loss = loss_reprojection(
        &k_hat,
        &solution.pose,
        &sample.correspondences,
        &cfg.pnp.pixel_covariance,
    )?;
    let implicit = match bpnp_backward(
        &k_hat,
        &sample.correspondences,
        &solution.pose,
        &loss.grad_pose,
        &cfg.pnp,
        cfg.hessian,
    ) {
        Ok(g) => g,
        Err(BpnpError::NotStationary { .. } | BpnpError::SingularHessian { .. }) => {
            return Ok(None)
        }
        Err(BpnpError::Geometry(e)) => return Err(e.into()),
    };
    let grad_k: Vector4<f64> = loss.grad_k + implicit;
    Ok(Some((loss.value, mlp_backward(model, &cache, &grad_k))))
}

/// Mean held-out loss: fresh solves under the corrected intrinsics. Samples
/// whose solve or correction fails count as the prior's own error, so a
/// model that breaks frames cannot look good by dropping them.
fn validation_loss(
    model: &MlpModel,
    samples: &[TrainSample],
    features: &[DVector<f64>],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> f64 {
    let mut sum = 0.0;
    for &i in val_idx {
        let sample = &samples[i];
        let fallback = || -> f64 {
            solve_pnp(&sample.k_prior, &sample.correspondences, &cfg.pnp, None)
                .map(|s| s.mean_error)
                .unwrap_or(f64::INFINITY)
        };
        let value = match mlp_forward(model, &features[i]) {
            Ok(delta) => match sample.k_prior.shifted(&delta) {
                Ok(k_hat) => solve_pnp(&k_hat, &sample.correspondences, &cfg.pnp, None)
                    .map(|s| s.mean_error)
                    .unwrap_or_else(|_| fallback()),
                Err(_) => fallback(),
            },
            Err(_) => fallback(),
        };
        sum += value;
    }
    sum / val_idx.len() as f64
}

/// Per-channel reciprocal RMS over the training features, zeros included.
/// A silent channel keeps scale 1 so masked variants stay well defined.
fn fit_rms_scale(features: &[DVector<f64>], train_idx: &[usize]) -> [f64; FEATURE_CHANNELS] {
    let mut sum_sq = [0.0f64; FEATURE_CHANNELS];
    let mut count = [0usize; FEATURE_CHANNELS];
    for &i in train_idx {
        for (j, v) in features[i].iter().enumerate() {
            sum_sq[j % FEATURE_CHANNELS] += v * v;
            count[j % FEATURE_CHANNELS] += 1;
        }
    }
    let mut scale = [1.0f64; FEATURE_CHANNELS];
    for c in 0..FEATURE_CHANNELS {
        if count[c] > 0 {
            let rms = (sum_sq[c] / count[c] as f64).sqrt();
            if rms > 0.0 {
                scale[c] = 1.0 / rms;
            }
        }
    }
    scale
}

/// Adam moments (or nothing, for SGD): one slot per weight matrix. Biases
/// are only tracked when the model trains them.
struct OptimizerState {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    step: u64,
}

impl OptimizerState {
    fn new(model: &MlpModel) -> Self {
        OptimizerState {
            m_w: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            v_w: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            m_b: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            v_b: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            step: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &crate::mlp::MlpGradients, cfg: &TrainConfig) {
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, g) in model.weights.iter_mut().zip(&grads.weights) {
                    *w -= lr * g;
                }
                if model.biases_enabled {
                    for (b, g) in model.biases.iter_mut().zip(&grads.biases) {
                        *b -= lr * g;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                self.step += 1;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for l in 0..model.weights.len() {
                    adam_update(
                        model.weights[l].as_mut_slice(),
                        grads.weights[l].as_slice(),
                        self.m_w[l].as_mut_slice(),
                        self.v_w[l].as_mut_slice(),
                        lr, beta1, beta2, epsilon, bc1, bc2,
                    );
                }
                if model.biases_enabled {
                    for l in 0..model.biases.len() {
                        adam_update(
                            model.biases[l].as_mut_slice(),
                            grads.biases[l].as_slice(),
                            self.m_b[l].as_mut_slice(),
                            self.v_b[l].as_mut_slice(),
                            lr, beta1, beta2, epsilon, bc1, bc2,
                        );
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bias_corr1: f64,
    bias_corr2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bias_corr1;
        let v_hat = v[i] / bias_corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}
