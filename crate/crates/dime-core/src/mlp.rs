//! The correction network: a small fully connected net mapping a flat grid
//! feature vector to the four intrinsic corrections.
//!
//! Structure is fixed to what the correction problem needs: odd hidden
//! activations, a linear output layer, and biases pinned at zero by default.
//! Those three choices make the zero-feature vector map to exactly zero
//! correction, so frames with no usable discrepancy information leave the
//! prior intrinsics untouched. An optional per-channel input scaling (a pure
//! multiplier, fitted on training data) absorbs the unit mismatch between
//! pixel discrepancies, millimeter positions, and inverse depths without
//! breaking that property.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::features::FEATURE_CHANNELS;

pub const OUTPUT_DIM: usize = 4;
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("input length {got} does not match the network input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("model file format version {found} is not the supported {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Odd activation functions; oddness is what keeps `f(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// `x / (1 + |x|)`; cheaper tails than tanh.
    Softsign,
}

impl Activation {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softsign => x / (1.0 + x.abs()),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn grad(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
        }
    }
}

/// Fully connected correction network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// Layer widths, input first, output (always 4) last.
    pub dims: Vec<usize>,
    /// `weights[l]` has shape `dims[l + 1] x dims[l]`.
    pub weights: Vec<DMatrix<f64>>,
    /// Zero vectors unless `biases_enabled`.
    pub biases: Vec<DVector<f64>>,
    pub biases_enabled: bool,
    pub activation: Activation,
    /// Per-channel input multipliers (length 5), applied cyclically over the
    /// flattened feature vector. `None` means raw features.
    pub input_scale: Option<[f64; FEATURE_CHANNELS]>,
}

/// Intermediate values of one forward pass, consumed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input after channel scaling.
    scaled: DVector<f64>,
    /// Pre-activations per weight layer.
    pre: Vec<DVector<f64>>,
    /// Activations per hidden layer (post nonlinearity).
    post: Vec<DVector<f64>>,
    output: Vector4<f64>,
}

impl MlpCache {
    pub fn output(&self) -> Vector4<f64> {
        self.output
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input: DVector<f64>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + if self.biases_enabled { self.biases.iter().map(|b| b.len()).sum() } else { 0 }
    }
}

/// Initializes a default-shaped network (hidden widths 256 and 64, tanh,
/// no biases) for the given input length.
pub fn mlp_init(input_dim: usize, seed: u64) -> Result<MlpModel, MlpError> {
    let dims = [input_dim, DEFAULT_HIDDEN[0], DEFAULT_HIDDEN[1], OUTPUT_DIM];
    mlp_init_with(&dims, Activation::Tanh, false, seed)
}

/// Initializes a network with explicit layer widths. Weights draw from the
/// fan-in scaled uniform `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, which has
/// variance exactly `1 / fan_in`; biases start at zero.
pub fn mlp_init_with(
    dims: &[usize],
    activation: Activation,
    biases_enabled: bool,
    seed: u64,
) -> Result<MlpModel, MlpError> {
    if dims.len() < 2 {
        return Err(MlpError::InvalidShape("need at least input and output layers".into()));
    }
    if dims.contains(&0) {
        return Err(MlpError::InvalidShape("zero-width layer".into()));
    }
    if *dims.last().unwrap() != OUTPUT_DIM {
        return Err(MlpError::InvalidShape(format!(
            "output layer must have width {OUTPUT_DIM}, got {}",
            dims.last().unwrap()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let fan_in = dims[l] as f64;
        let bound = (3.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| MlpError::InvalidShape(format!("init distribution: {e}")))?;
        weights.push(DMatrix::from_fn(dims[l + 1], dims[l], |_, _| dist.sample(&mut rng)));
        biases.push(DVector::zeros(dims[l + 1]));
    }

    Ok(MlpModel {
        dims: dims.to_vec(),
        weights,
        biases,
        biases_enabled,
        activation,
        input_scale: None,
    })
}

fn scaled_input(model: &MlpModel, input: &DVector<f64>) -> DVector<f64> {
    match &model.input_scale {
        None => input.clone(),
        Some(scale) => DVector::from_iterator(
            input.len(),
            input.iter().enumerate().map(|(i, v)| v * scale[i % FEATURE_CHANNELS]),
        ),
    }
}

/// Forward pass returning the four intrinsic corrections `(dfx, dfy, dcx, dcy)`.
pub fn mlp_forward(model: &MlpModel, input: &DVector<f64>) -> Result<Vector4<f64>, MlpError> {
    Ok(mlp_forward_cached(model, input)?.output)
}

/// Forward pass that retains the per-layer values needed for gradients.
pub fn mlp_forward_cached(model: &MlpModel, input: &DVector<f64>) -> Result<MlpCache, MlpError> {
    if input.len() != model.input_dim() {
        return Err(MlpError::DimensionMismatch { expected: model.input_dim(), got: input.len() });
    }
    if let Some(scale) = &model.input_scale {
        debug_assert_eq!(model.input_dim() % FEATURE_CHANNELS, 0);
        let _ = scale;
    }

    let scaled = scaled_input(model, input);
    let layers = model.layer_count();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers.saturating_sub(1));
    let mut a = scaled.clone();
    for (l, w) in model.weights.iter().enumerate() {
        let mut z = w * &a;
        if model.biases_enabled {
            z += &model.biases[l];
        }
        pre.push(z.clone());
        if l + 1 < layers {
            a = z.map(|x| model.activation.eval(x));
            post.push(a.clone());
        } else {
            a = z;
        }
    }
    let output = Vector4::from_column_slice(a.as_slice());
    Ok(MlpCache { scaled, pre, post, output })
}

/// Backpropagates an output gradient through the cached forward pass.
/// Returns gradients for every weight layer, every bias (zeros when biases
/// are pinned), and the raw input vector.
pub fn mlp_backward(model: &MlpModel, cache: &MlpCache, grad_output: &Vector4<f64>) -> MlpGradients {
    let layers = model.layer_count();
    let mut w_grads: Vec<DMatrix<f64>> = model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut b_grads: Vec<DVector<f64>> = model.biases.iter().map(|b| DVector::zeros(b.len())).collect();

    // Output layer is linear, so its delta is the upstream gradient itself.
    let mut delta = DVector::from_column_slice(grad_output.as_slice());
    for l in (0..layers).rev() {
        let below = if l == 0 { &cache.scaled } else { &cache.post[l - 1] };
        w_grads[l] = &delta * below.transpose();
        if model.biases_enabled {
            b_grads[l] = delta.clone();
        }
        let back = model.weights[l].transpose() * &delta;
        if l > 0 {
            delta = back.zip_map(&cache.pre[l - 1], |g, z| g * model.activation.grad(z));
        } else {
            delta = back;
        }
    }

    // Undo the channel scaling to express the gradient in raw input units.
    let input_grad = match &model.input_scale {
        None => delta,
        Some(scale) => DVector::from_iterator(
            delta.len(),
            delta.iter().enumerate().map(|(i, v)| v * scale[i % FEATURE_CHANNELS]),
        ),
    };

    MlpGradients { weights: w_grads, biases: b_grads, input: input_grad }
}

// ── Model files ─────────────────────────────────────────────────────────────

/// On-disk form: versioned JSON with row-major weight blocks.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    dims: Vec<usize>,
    activation: Activation,
    biases_enabled: bool,
    input_scale: Option<[f64; FEATURE_CHANNELS]>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<(), MlpError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        dims: model.dims.clone(),
        activation: model.activation,
        biases_enabled: model.biases_enabled,
        input_scale: model.input_scale,
        weights: model
            .weights
            .iter()
            .map(|w| w.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()).collect())
            .collect(),
        biases: model.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, MlpError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(MlpError::VersionMismatch { found: file.format_version, expected: MODEL_FORMAT_VERSION });
    }
    if file.dims.len() < 2 || file.dims.last() != Some(&OUTPUT_DIM) {
        return Err(MlpError::InvalidShape("stored dims are not a valid network shape".into()));
    }
    let mut weights = Vec::with_capacity(file.dims.len() - 1);
    let mut biases = Vec::with_capacity(file.dims.len() - 1);
    for l in 0..file.dims.len() - 1 {
        let (rows, cols) = (file.dims[l + 1], file.dims[l]);
        let flat = &file.weights.get(l).ok_or_else(|| MlpError::InvalidShape("missing weight block".into()))?;
        if flat.len() != rows * cols {
            return Err(MlpError::InvalidShape(format!(
                "weight block {l} has {} values, expected {}",
                flat.len(),
                rows * cols
            )));
        }
        weights.push(DMatrix::from_row_slice(rows, cols, flat));
        let b = file.biases.get(l).ok_or_else(|| MlpError::InvalidShape("missing bias block".into()))?;
        if b.len() != rows {
            return Err(MlpError::InvalidShape(format!("bias block {l} has wrong length")));
        }
        biases.push(DVector::from_column_slice(b));
    }
    Ok(MlpModel {
        dims: file.dims,
        weights,
        biases,
        biases_enabled: file.biases_enabled,
        activation: file.activation,
        input_scale: file.input_scale,
    })
}
