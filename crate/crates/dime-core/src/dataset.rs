//! Dataset files: self-describing JSON snapshots of simulated captures.
//!
//! A file carries a header (format version, rig layout with its fingerprint,
//! image size, the shared prior intrinsics, and the simulator config that
//! produced the run) followed by per-frame correspondence tables. Values are
//! written and parsed at full f64 precision, so `read(write(d)) == d` holds
//! bitwise. A header with no `frames` field is a valid empty dataset.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, Intrinsics};
use crate::sim::{average_manifold_k, inject_noise, RigSpec, SimConfig, SimError, SimFrame};
use crate::train::TrainSample;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("dataset format version {found} is not supported (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// What noise was injected into a frame's correspondences, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sigma_2d_px: f64,
    pub sigma_3d_mm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// FNV-1a fingerprint of `rig`, kept redundantly so a reader can verify
    /// compatibility without hashing the layout itself.
    pub rig_fingerprint: u64,
    pub rig: RigSpec,
    pub image_width: f64,
    pub image_height: f64,
    /// Prior intrinsics shared by every frame (the manifold mean).
    pub k_prior: Intrinsics,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFrame {
    /// Rows of `[u, v, X, Y, Z]`: the pixel observation, then the 3D point
    /// in the frame's estimated camera frame (millimeters).
    pub correspondences: Vec<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_true: Option<Intrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    #[serde(default)]
    pub frames: Vec<DatasetFrame>,
}

impl DatasetFrame {
    pub fn from_sim(frame: &SimFrame) -> Self {
        DatasetFrame {
            correspondences: frame
                .correspondences
                .iter()
                .map(|c| [c.pixel.x, c.pixel.y, c.point.x, c.point.y, c.point.z])
                .collect(),
            k_true: Some(frame.k_true),
            noise: None,
        }
    }

    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.correspondences
            .iter()
            .map(|r| Correspondence::new(Vector2::new(r[0], r[1]), Vector3::new(r[2], r[3], r[4])))
            .collect()
    }
}

impl DatasetFile {
    /// Packages a simulation run. The prior is recomputed from the config,
    /// so it is well defined even for an empty run.
    pub fn from_sim_run(
        cfg: &SimConfig,
        rig: &RigSpec,
        frames: &[SimFrame],
    ) -> Result<Self, DataError> {
        let k_prior = average_manifold_k(cfg)?;
        Ok(DatasetFile {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                rig_fingerprint: rig.fingerprint(),
                rig: rig.clone(),
                image_width: cfg.image_width,
                image_height: cfg.image_height,
                k_prior,
                sim: cfg.clone(),
            },
            frames: frames.iter().map(DatasetFrame::from_sim).collect(),
        })
    }

    /// Adds Gaussian noise to every frame in place and records what was
    /// injected. Useful for producing noisy training sets; evaluation-time
    /// noise is the evaluation protocol's job instead.
    pub fn bake_noise(
        &mut self,
        sigma_2d_px: f64,
        sigma_3d_mm: f64,
        seed: u64,
    ) -> Result<(), DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let record = NoiseRecord { sigma_2d_px, sigma_3d_mm, seed };
        for frame in &mut self.frames {
            let noisy = inject_noise(&frame.correspondences(), sigma_2d_px, sigma_3d_mm, &mut rng)?;
            frame.correspondences = noisy
                .iter()
                .map(|c| [c.pixel.x, c.pixel.y, c.point.x, c.point.y, c.point.z])
                .collect();
            frame.noise = Some(record);
        }
        Ok(())
    }

    pub fn train_samples(&self) -> Vec<TrainSample> {
        self.frames
            .iter()
            .map(|f| TrainSample {
                k_prior: self.header.k_prior,
                correspondences: f.correspondences(),
                k_true: f.k_true,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let h = &self.header;
        if h.rig_fingerprint != h.rig.fingerprint() {
            return Err(DataError::Validation(format!(
                "rig fingerprint {:#018x} does not match the stored layout ({:#018x})",
                h.rig_fingerprint,
                h.rig.fingerprint()
            )));
        }
        if !(h.image_width > 0.0 && h.image_height > 0.0) {
            return Err(DataError::Validation("image size must be positive".into()));
        }
        if h.image_width != h.sim.image_width || h.image_height != h.sim.image_height {
            return Err(DataError::Validation(
                "header image size disagrees with the stored simulator config".into(),
            ));
        }
        h.k_prior
            .validate()
            .map_err(|e| DataError::Validation(format!("prior intrinsics: {e}")))?;
        h.sim.validate()?;
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.correspondences.is_empty() {
                return Err(DataError::Validation(format!("frame {i} has no correspondences")));
            }
            for (j, row) in frame.correspondences.iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::Validation(format!(
                        "frame {i} correspondence {j} holds a non-finite value"
                    )));
                }
                if row[4] <= 0.0 {
                    return Err(DataError::Validation(format!(
                        "frame {i} correspondence {j} has depth {} mm; points must sit in front \
                         of the camera",
                        row[4]
                    )));
                }
            }
            if let Some(k) = &frame.k_true {
                k.validate()
                    .map_err(|e| DataError::Validation(format!("frame {i} true intrinsics: {e}")))?;
            }
            if let Some(n) = &frame.noise {
                if n.sigma_2d_px < 0.0 || n.sigma_3d_mm < 0.0 {
                    return Err(DataError::Validation(format!(
                        "frame {i} noise record has a negative sigma"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn write_dataset(path: &Path, data: &DatasetFile) -> Result<(), DataError> {
    data.validate()?;
    let mut text = serde_json::to_string_pretty(data).map_err(parse_error)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile, DataError> {
    let text = fs::read_to_string(path)?;
    let data: DatasetFile = serde_json::from_str(&text).map_err(parse_error)?;
    if data.header.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: data.header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    data.validate()?;
    Ok(data)
}

fn parse_error(e: serde_json::Error) -> DataError {
    DataError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}
