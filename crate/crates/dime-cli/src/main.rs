//! Command line harness for the intrinsics rectification pipeline.
//!
//! Five subcommands cover the full loop: `simulate` writes labeled datasets,
//! `train` fits a correction model, `infer` applies it to frames, `eval`
//! scores it under point dropping and noise, and `ablate` sweeps feature
//! masks or grid occupancy.
//!
//! Exit codes: 0 on success, 2 for configuration and input validation
//! problems, 3 for numerical failures (diverged training, degenerate
//! solves).
//!
//! Commands that accept `--config <json>` load the corresponding config
//! struct from the file first; explicit flags override individual fields.
//! Grid shapes on the command line are written `COLSxROWS` (so `8x6` is 8
//! columns by 6 rows); the image size always comes from the dataset header.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dime_core::dataset::{read_dataset, write_dataset, DataError, DatasetFile};
use dime_core::eval::{
    ablate_feature_masks, ablate_grid_occupancy, evaluate, EvalError, EvalProtocol, GridEtaRow,
    MaskAblationRow,
};
use dime_core::features::{FeatureMask, GridConfig};
use dime_core::geometry::{GeometryError, Intrinsics};
use dime_core::mlp::{load_model, mlp_forward, save_model, MlpError, MlpModel};
use dime_core::sim::{generate_frames, RigSpec, SimConfig, SimError};
use dime_core::train::{frame_features, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "dime",
    version,
    about = "Dynamic intrinsics rectification: simulate, train, infer, eval, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset of rig observations.
    Simulate(SimulateArgs),
    /// Train a correction model on a dataset.
    Train(TrainArgs),
    /// Predict corrected intrinsics for dataset frames.
    Infer(InferArgs),
    /// Score a model (or the bare prior) on a dataset.
    Eval(EvalArgs),
    /// Sweep feature masks or grid occupancy, training per configuration.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Destination dataset file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulator config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum lens tilt magnitude in degrees.
    #[arg(long)]
    tilt_deg: Option<f64>,
    /// Maximum axial lens shift in millimeters (enables focal variation).
    #[arg(long)]
    shift_mm: Option<f64>,
    /// Bake Gaussian pixel noise into the stored frames.
    #[arg(long, default_value_t = 0.0)]
    noise_2d: f64,
    /// Bake Gaussian 3D noise (millimeters) into the stored frames.
    #[arg(long, default_value_t = 0.0)]
    noise_3d: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Destination model file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional training-curve CSV (epoch, train loss, val loss, skipped).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature grid as COLSxROWS, e.g. 8x6.
    #[arg(long)]
    grid: Option<String>,
    /// Channel subset: all, pmd, pmd-invdepth, pmd-xy, spatial (or a-e).
    #[arg(long)]
    feature_mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of samples held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Hidden layer widths, comma separated, e.g. 256,64.
    #[arg(long)]
    hidden: Option<String>,
    /// Reuse each sample's previous pose as the solver starting point.
    #[arg(long)]
    warm_start: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset with frames to correct (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Only this frame index (default: every frame).
    #[arg(long)]
    frame: Option<usize>,
    /// Write predictions as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature grid as COLSxROWS; must match training.
    #[arg(long)]
    grid: Option<String>,
    /// Channel subset; must match training.
    #[arg(long)]
    feature_mask: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Trained model file; omit to score the uncorrected prior.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-frame rows as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Evaluation protocol JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature grid as COLSxROWS; must match training.
    #[arg(long)]
    grid: Option<String>,
    /// Channel subset; must match training.
    #[arg(long)]
    feature_mask: Option<String>,
    /// Uniformly subsample each frame to this many correspondences.
    #[arg(long)]
    keep: Option<usize>,
    /// Fraction of occupied feature cells to empty per frame.
    #[arg(long)]
    drop_eta: Option<f64>,
    /// Gaussian pixel noise injected at evaluation time.
    #[arg(long)]
    noise_2d: Option<f64>,
    /// Gaussian 3D noise (millimeters) injected at evaluation time.
    #[arg(long)]
    noise_3d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblationAxis {
    /// Train one model per feature mask.
    Masks,
    /// Train one model per grid resolution, sweep cell emptying.
    Occupancy,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset (JSON).
    #[arg(long)]
    train_data: PathBuf,
    /// Held-out evaluation dataset (JSON).
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, value_enum, default_value_t = AblationAxis::Masks)]
    axis: AblationAxis,
    /// Write the sweep table as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failures split by exit code: bad input versus bad numerics.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Sim(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::InvalidKeep { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset | TrainError::InvalidConfig(_) | TrainError::Feature(_) => {
                CliError::Validation(e.to_string())
            }
            TrainError::Mlp(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidProtocol(_)
            | EvalError::ModelGridMismatch { .. }
            | EvalError::Feature(_) => CliError::Validation(e.to_string()),
            EvalError::Mlp(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MlpError> for CliError {
    fn from(e: MlpError) -> Self {
        match e {
            // Model files are inputs; everything wrong with one is the
            // caller's data, not a numerical breakdown.
            MlpError::Io(_)
            | MlpError::Parse(_)
            | MlpError::VersionMismatch { .. }
            | MlpError::InvalidShape(_)
            | MlpError::DimensionMismatch { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Loads a serde-default-backed config from JSON, or the default when no
/// path was given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        }
    }
}

/// Parses COLSxROWS, e.g. "8x6" is 8 columns by 6 rows.
fn parse_grid_shape(text: &str) -> Result<(usize, usize), CliError> {
    let lower = text.to_ascii_lowercase();
    let (cols, rows) = lower
        .split_once('x')
        .ok_or_else(|| CliError::Validation(format!("grid '{text}' must look like 8x6")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Validation(format!("grid '{text}' must look like 8x6")))
    };
    Ok((parse(cols)?, parse(rows)?))
}

fn parse_mask(text: &str) -> Result<FeatureMask, CliError> {
    FeatureMask::parse(text).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown feature mask '{text}'; use all, pmd, pmd-invdepth, pmd-xy, or spatial"
        ))
    })
}

/// Rebuilds a grid against the dataset's image size, preserving the shape
/// unless a flag overrides it.
fn resolve_grid(
    current: &GridConfig,
    flag: Option<&str>,
    data: &DatasetFile,
) -> Result<GridConfig, CliError> {
    let (cols, rows) = match flag {
        Some(text) => parse_grid_shape(text)?,
        None => (current.cols, current.rows),
    };
    GridConfig::new(cols, rows, data.header.image_width, data.header.image_height)
        .map_err(|e| CliError::Validation(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = load_config(args.config.as_deref())?;
    if let Some(t) = args.tilt_deg {
        cfg.tilt_max_deg = t;
    }
    if let Some(s) = args.shift_mm {
        cfg.shift_max_mm = s;
    }
    let rig = RigSpec::default();
    let frames = generate_frames(&cfg, &rig, args.frames, args.seed)?;
    let mut data = DatasetFile::from_sim_run(&cfg, &rig, &frames)?;
    if args.noise_2d > 0.0 || args.noise_3d > 0.0 {
        data.bake_noise(args.noise_2d, args.noise_3d, args.seed)?;
    }
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} frames ({} points each) to {}",
        data.frames.len(),
        data.frames.first().map_or(0, |f| f.correspondences.len()),
        args.out.display()
    );
    println!(
        "prior intrinsics: fx {:.2} fy {:.2} cx {:.2} cy {:.2}",
        data.header.k_prior.fx, data.header.k_prior.fy, data.header.k_prior.cx,
        data.header.k_prior.cy
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    cfg.grid = resolve_grid(&cfg.grid, args.grid.as_deref(), &data)?;
    if let Some(mask) = args.feature_mask.as_deref() {
        cfg.mask = parse_mask(mask)?;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = Some(v);
    }
    if let Some(text) = args.hidden.as_deref() {
        cfg.hidden = text
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    CliError::Validation(format!("hidden '{text}' must be widths like 256,64"))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if args.warm_start {
        cfg.warm_start = true;
    }

    let samples = data.train_samples();
    let report = train(&samples, &cfg)?;
    save_model(&args.out, &report.model)?;

    let last = report.curve.last().expect("training ran at least one epoch");
    println!(
        "trained {} epochs on {} frames; best epoch {} (loss {:.4} px)",
        report.curve.len(),
        samples.len(),
        report.best_epoch,
        report.best_loss
    );
    match last.val_loss {
        Some(v) => println!("final epoch: train {:.4} px, val {:.4} px", last.train_loss, v),
        None => println!("final epoch: train {:.4} px", last.train_loss),
    }
    println!("model written to {}", args.out.display());

    if let Some(curve_path) = args.curve {
        let mut csv = String::from("epoch,train_loss,val_loss,skipped\n");
        for e in &report.curve {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.skipped));
        }
        write_text(&curve_path, &csv)?;
    }
    Ok(())
}

/// Per-frame prediction emitted by `infer`.
#[derive(Serialize)]
struct Prediction {
    frame: usize,
    delta: [f64; 4],
    k_hat: Intrinsics,
}

#[derive(Serialize)]
struct InferOutput {
    k_prior: Intrinsics,
    predictions: Vec<Prediction>,
}

fn run_infer(args: InferArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let model = load_model(&args.model)?;
    let grid = resolve_grid(&EvalProtocol::default().grid, args.grid.as_deref(), &data)?;
    if model.input_dim() != grid.feature_len() {
        return Err(CliError::Validation(format!(
            "model expects {} inputs but grid {}x{} produces {}; pass the training grid via --grid",
            model.input_dim(),
            grid.cols,
            grid.rows,
            grid.feature_len()
        )));
    }
    let mask = match args.feature_mask.as_deref() {
        Some(text) => parse_mask(text)?,
        None => FeatureMask::All,
    };

    let indices: Vec<usize> = match args.frame {
        Some(i) if i >= data.frames.len() => {
            return Err(CliError::Validation(format!(
                "frame {i} out of range; dataset has {} frames",
                data.frames.len()
            )));
        }
        Some(i) => vec![i],
        None => (0..data.frames.len()).collect(),
    };

    let kc = data.header.k_prior;
    let mut predictions = Vec::with_capacity(indices.len());
    println!("frame        d_fx        d_fy        d_cx        d_cy");
    for i in indices {
        let corrs = data.frames[i].correspondences();
        let features = frame_features(&kc, &corrs, &grid, mask).map_err(CliError::from)?;
        let delta = mlp_forward(&model, &features)?;
        let k_hat = kc.shifted(&delta)?;
        println!(
            "{i:5} {:11.4} {:11.4} {:11.4} {:11.4}",
            delta[0], delta[1], delta[2], delta[3]
        );
        predictions.push(Prediction {
            frame: i,
            delta: [delta[0], delta[1], delta[2], delta[3]],
            k_hat,
        });
    }
    println!(
        "prior: fx {:.2} fy {:.2} cx {:.2} cy {:.2} ({} frames)",
        kc.fx,
        kc.fy,
        kc.cx,
        kc.cy,
        predictions.len()
    );

    if let Some(out) = args.out {
        write_json(&out, &InferOutput { k_prior: kc, predictions })?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let mut protocol: EvalProtocol = load_config(args.config.as_deref())?;
    protocol.grid = resolve_grid(&protocol.grid, args.grid.as_deref(), &data)?;
    if let Some(mask) = args.feature_mask.as_deref() {
        protocol.mask = parse_mask(mask)?;
    }
    if let Some(v) = args.keep {
        protocol.keep_points = Some(v);
    }
    if let Some(v) = args.drop_eta {
        protocol.drop_eta = v;
    }
    if let Some(v) = args.noise_2d {
        protocol.sigma_2d_px = v;
    }
    if let Some(v) = args.noise_3d {
        protocol.sigma_3d_mm = v;
    }
    if let Some(v) = args.seed {
        protocol.seed = v;
    }

    let model: Option<MlpModel> = match args.model.as_deref() {
        Some(path) => Some(load_model(path)?),
        None => None,
    };
    let samples = data.train_samples();
    let report = evaluate(model.as_ref(), &samples, &protocol)?;

    print!("{}", report.format_console());
    if let Some(out) = args.out.as_deref() {
        write_text(out, &report.to_json())?;
        println!("report written to {}", out.display());
    }
    if let Some(csv) = args.csv.as_deref() {
        write_text(csv, &report.to_csv())?;
        println!("per-frame rows written to {}", csv.display());
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<(), CliError> {
    let train_data = read_dataset(&args.train_data)?;
    let eval_data = read_dataset(&args.eval_data)?;
    if train_data.header.rig_fingerprint != eval_data.header.rig_fingerprint {
        return Err(CliError::Validation(
            "train and eval datasets were generated for different rigs".into(),
        ));
    }
    if train_data.header.k_prior != eval_data.header.k_prior {
        return Err(CliError::Validation(
            "train and eval datasets carry different prior intrinsics".into(),
        ));
    }

    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    cfg.grid = resolve_grid(&cfg.grid, None, &train_data)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let protocol = EvalProtocol {
        grid: cfg.grid,
        seed: cfg.seed,
        ..EvalProtocol::default()
    };

    let train_samples = train_data.train_samples();
    let eval_samples = eval_data.train_samples();

    match args.axis {
        AblationAxis::Masks => {
            let masks = [
                FeatureMask::All,
                FeatureMask::PmdOnly,
                FeatureMask::PmdInvDepth,
                FeatureMask::PmdXy,
                FeatureMask::SpatialOnly,
            ];
            let rows: Vec<MaskAblationRow> =
                ablate_feature_masks(&train_samples, &eval_samples, &cfg, &protocol, &masks);
            println!("mask          avg_e(px)     rho");
            for row in &rows {
                let avg_e = row.avg_e.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                let rho = row.rho.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("{:<13} {:>9} {:>7}", row.mask.name(), avg_e, rho);
            }
            if let Some(out) = args.out.as_deref() {
                write_json(out, &rows)?;
            }
        }
        AblationAxis::Occupancy => {
            let shapes = [(16, 12), (12, 9), (8, 6)];
            let grids: Vec<GridConfig> = shapes
                .iter()
                .map(|&(c, r)| {
                    GridConfig::new(
                        c,
                        r,
                        train_data.header.image_width,
                        train_data.header.image_height,
                    )
                    .map_err(|e| CliError::Validation(e.to_string()))
                })
                .collect::<Result<_, _>>()?;
            let etas = [0.0, 0.2, 0.4, 0.6, 0.8];
            let rows: Vec<GridEtaRow> = ablate_grid_occupancy(
                &train_samples,
                &eval_samples,
                &cfg,
                &protocol,
                &grids,
                &etas,
            );
            println!("grid    eta     gamma   avg_e(px)");
            for row in &rows {
                let gamma =
                    row.mean_gamma.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
                let avg_e = row.avg_e.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:>2}x{:<3} {:>5.2} {:>8} {:>10}",
                    row.grid_cols, row.grid_rows, row.requested_eta, gamma, avg_e
                );
            }
            if let Some(out) = args.out.as_deref() {
                write_json(out, &rows)?;
            }
        }
    }
    Ok(())
}
