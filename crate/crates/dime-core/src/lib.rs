//! Per-frame rectification of camera intrinsics for lenses that move.
//!
//! Stabilized camera modules tilt and shift lens elements relative to the
//! sensor, so the effective focal lengths and principal point drift away from
//! bench calibration on every frame. Given 2D-3D point correspondences, this
//! crate estimates a four-parameter intrinsic correction (delta fx, fy, cx,
//! cy) with a small network and verifies it geometrically:
//!
//! - [`geometry`]: pinhole projection, reprojection errors, PnP pose solving
//!   and joint intrinsics-plus-pose refinement.
//! - [`features`]: per-point projection discrepancies pooled on a fixed image
//!   grid into a flat feature vector.
//! - [`mlp`]: the correction network. Zero input maps to exactly zero
//!   correction by construction.
//! - [`bpnp`]: reprojection loss and the implicit-function gradient of the
//!   PnP solution with respect to intrinsics, which makes the pose solver
//!   differentiable end to end.
//! - [`train`]: the training loop wiring features, network, and solver
//!   together, plus single-frame inference.
//! - [`sim`]: a synthetic rig of checkerboard targets and a lens-state
//!   manifold for generating labeled frames.
//! - [`dataset`]: versioned on-disk frame sets.
//! - [`eval`]: recovery-rate metrics, report generation, and ablation sweeps.

pub mod bpnp;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod mlp;
pub mod sim;
pub mod train;

pub use bpnp::{bpnp_backward, bpnp_forward, loss_reprojection, BpnpError, HessianMode};
pub use dataset::{read_dataset, write_dataset, DataError, DatasetFile};
pub use eval::{evaluate, rho, EvalError, EvalProtocol, EvalReport};
pub use features::{FeatureMask, GridConfig};
pub use geometry::{
    mle_refine_intrinsics, project, reprojection_errors, solve_pnp, Correspondence, GeometryError,
    Intrinsics, MleSolution, PnpConfig, PnpSolution, Pose,
};
pub use mlp::{load_model, mlp_forward, mlp_init, save_model, MlpError, MlpModel};
pub use sim::{generate_frames, RigSpec, SimConfig, SimError};
pub use train::{infer_k, train, TrainConfig, TrainError, TrainReport, TrainSample};
