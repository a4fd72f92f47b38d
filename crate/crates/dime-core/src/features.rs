//! Point features and their grid pooling.
//!
//! Each correspondence contributes a five-channel feature: the 2D projection
//! discrepancy under the prior intrinsics (how far the prior-model
//! reprojection lands from the observed pixel), the lateral 3D position, and
//! the inverse depth. Features are pooled by arithmetic mean over a fixed
//! u x v image grid and flattened row-major into a single vector whose
//! length is `5 * u * v`. Empty cells contribute five zeros, which is what
//! lets downstream layers treat "no data" and "no discrepancy" identically.
//!
//! Channel order everywhere: `[dx, dy, X, Y, 1/Z]`.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, GeometryError, Intrinsics, MIN_DEPTH_MM};

pub const FEATURE_CHANNELS: usize = 5;

#[derive(Debug, Clone, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("pixel {index} at ({x}, {y}) lies outside [0, {width}) x [0, {height})")]
    OutOfImageBounds { index: usize, x: f64, y: f64, width: f64, height: f64 },
    #[error("grid configs differ between the two maps")]
    GridMismatch,
    #[error("occupancy baseline has no occupied cells")]
    EmptyBaseline,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Image partition into `rows x cols` rectangular cells.
///
/// Cell boundaries are `a_k = k * image_width / cols` horizontally and
/// `b_j = j * image_height / rows` vertically. Cells own half-open intervals
/// `[a_{k-1}, a_k)`; the last row and column close at the image edge so
/// boundary pixels are never dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub image_width: f64,
    pub image_height: f64,
}

impl GridConfig {
    pub fn new(cols: usize, rows: usize, image_width: f64, image_height: f64) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 {
            return Err(FeatureError::InvalidGrid("rows and cols must be positive".into()));
        }
        if image_width <= 0.0 || image_width.is_nan() || image_height <= 0.0 || image_height.is_nan() {
            return Err(FeatureError::InvalidGrid(format!(
                "image size {image_width} x {image_height} must be positive"
            )));
        }
        Ok(GridConfig { rows, cols, image_width, image_height })
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Flattened feature length `5 * u * v`.
    pub fn feature_len(&self) -> usize {
        FEATURE_CHANNELS * self.cell_count()
    }

    /// `(row, col)` owning the pixel, or `None` outside the image.
    pub fn cell_of(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        if !(pixel.x >= 0.0 && pixel.x < self.image_width && pixel.y >= 0.0 && pixel.y < self.image_height) {
            return None;
        }
        // Rounding at interior boundaries keeps pixels inside [0, n); the
        // clamp only guards the image edge itself.
        let col = ((pixel.x * self.cols as f64 / self.image_width) as usize).min(self.cols - 1);
        let row = ((pixel.y * self.rows as f64 / self.image_height) as usize).min(self.rows - 1);
        Some((row, col))
    }
}

/// Five-channel feature of one correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFeature {
    /// Projection discrepancy `(dx, dy)` in pixels.
    pub pmd: Vector2<f64>,
    /// Lateral 3D position in the prior camera frame, millimeters.
    pub x: f64,
    pub y: f64,
    /// Reciprocal depth, 1/mm. Linearizes the depth influence.
    pub inv_depth: f64,
    /// Pixel the feature was observed at; used only for grid placement.
    pub pixel: Vector2<f64>,
}

impl PointFeature {
    pub fn channels(&self) -> [f64; FEATURE_CHANNELS] {
        [self.pmd.x, self.pmd.y, self.x, self.y, self.inv_depth]
    }
}

/// Projection discrepancy of one correspondence under the prior intrinsics:
/// the identity-pose reprojection of the 3D point minus the observed pixel.
pub fn compute_pmd(kc: &Intrinsics, corr: &Correspondence) -> Result<Vector2<f64>, GeometryError> {
    let z = corr.point.z;
    if z <= MIN_DEPTH_MM {
        return Err(GeometryError::NonPositiveDepth { index: 0, depth: z });
    }
    let reproj = Vector2::new(
        kc.fx * corr.point.x / z + kc.cx,
        kc.fy * corr.point.y / z + kc.cy,
    );
    Ok(reproj - corr.pixel)
}

/// Builds the per-point features for a whole correspondence set.
pub fn build_point_features(
    kc: &Intrinsics,
    corrs: &[Correspondence],
) -> Result<Vec<PointFeature>, FeatureError> {
    kc.validate()?;
    let mut feats = Vec::with_capacity(corrs.len());
    for (i, c) in corrs.iter().enumerate() {
        let pmd = compute_pmd(kc, c).map_err(|e| match e {
            GeometryError::NonPositiveDepth { depth, .. } => {
                GeometryError::NonPositiveDepth { index: i, depth }
            }
            other => other,
        })?;
        feats.push(PointFeature {
            pmd,
            x: c.point.x,
            y: c.point.y,
            inv_depth: 1.0 / c.point.z,
            pixel: c.pixel,
        });
    }
    Ok(feats)
}

/// Grid of per-cell mean features with an occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeatureMap {
    pub config: GridConfig,
    /// Row-major cell means; zeros where unoccupied.
    means: Vec<[f64; FEATURE_CHANNELS]>,
    counts: Vec<usize>,
}

impl GridFeatureMap {
    pub fn occupied(&self, row: usize, col: usize) -> bool {
        self.counts[row * self.config.cols + col] > 0
    }

    pub fn count(&self, row: usize, col: usize) -> usize {
        self.counts[row * self.config.cols + col]
    }

    /// Mean feature of a cell; `None` when the cell is empty.
    pub fn mean(&self, row: usize, col: usize) -> Option<[f64; FEATURE_CHANNELS]> {
        let idx = row * self.config.cols + col;
        (self.counts[idx] > 0).then(|| self.means[idx])
    }

    /// Number of occupied cells, `m_p`.
    pub fn occupied_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Pools point features into per-cell arithmetic means.
///
/// Cell members are summed in a canonical value order, so the result is
/// exactly permutation invariant.
pub fn gridify(features: &[PointFeature], grid: &GridConfig) -> Result<GridFeatureMap, FeatureError> {
    let cells = grid.cell_count();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (i, f) in features.iter().enumerate() {
        let Some((row, col)) = grid.cell_of(&f.pixel) else {
            return Err(FeatureError::OutOfImageBounds {
                index: i,
                x: f.pixel.x,
                y: f.pixel.y,
                width: grid.image_width,
                height: grid.image_height,
            });
        };
        members[row * grid.cols + col].push(i);
    }

    let mut means = vec![[0.0; FEATURE_CHANNELS]; cells];
    let mut counts = vec![0usize; cells];
    for (idx, cell) in members.iter_mut().enumerate() {
        if cell.is_empty() {
            continue;
        }
        cell.sort_unstable_by(|&a, &b| {
            let fa = features[a];
            let fb = features[b];
            fa.channels()
                .into_iter()
                .chain([fa.pixel.x, fa.pixel.y])
                .zip(fb.channels().into_iter().chain([fb.pixel.x, fb.pixel.y]))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = [0.0; FEATURE_CHANNELS];
        for &i in cell.iter() {
            for (s, v) in sum.iter_mut().zip(features[i].channels()) {
                *s += v;
            }
        }
        let n = cell.len() as f64;
        for (m, s) in means[idx].iter_mut().zip(sum) {
            *m = s / n;
        }
        counts[idx] = cell.len();
    }

    Ok(GridFeatureMap { config: *grid, means, counts })
}

/// Flat feature vector with its originating grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFeature {
    pub grid: GridConfig,
    pub values: DVector<f64>,
}

/// Flattens the grid row-major (row j, then column k), channels contiguous:
/// the cell `(j, k)` occupies entries `5 * (j * cols + k) .. + 5`.
pub fn flatten(map: &GridFeatureMap) -> FlatFeature {
    let mut values = DVector::zeros(map.config.feature_len());
    for idx in 0..map.config.cell_count() {
        if map.counts[idx] > 0 {
            for (c, v) in map.means[idx].iter().enumerate() {
                values[FEATURE_CHANNELS * idx + c] = *v;
            }
        }
    }
    FlatFeature { grid: map.config, values }
}

/// Occupancy statistics between a baseline grid map and a reduced one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyMetrics {
    /// Fraction of all cells occupied in the baseline: `m_p / (u * v)`.
    pub gamma: f64,
    /// Fraction of baseline-occupied cells that went empty: `1 - m'_p / m_p`.
    pub eta: f64,
}

pub fn occupancy_metrics(
    before: &GridFeatureMap,
    after: &GridFeatureMap,
) -> Result<OccupancyMetrics, FeatureError> {
    if before.config != after.config {
        return Err(FeatureError::GridMismatch);
    }
    let m_p = before.occupied_cells();
    if m_p == 0 {
        return Err(FeatureError::EmptyBaseline);
    }
    let m_p_after = after.occupied_cells();
    Ok(OccupancyMetrics {
        gamma: m_p as f64 / before.config.cell_count() as f64,
        eta: 1.0 - m_p_after as f64 / m_p as f64,
    })
}

/// Channel subsets used by the feature ablations. Excluded channels are
/// zeroed after flattening, which matches training on those channels never
/// carrying signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMask {
    /// All five channels.
    All,
    /// Projection discrepancy only.
    PmdOnly,
    /// Discrepancy plus inverse depth.
    PmdInvDepth,
    /// Discrepancy plus lateral position.
    PmdXy,
    /// 3D channels only, no discrepancy.
    SpatialOnly,
}

impl FeatureMask {
    pub fn channel_enabled(&self, channel: usize) -> bool {
        debug_assert!(channel < FEATURE_CHANNELS);
        match self {
            FeatureMask::All => true,
            FeatureMask::PmdOnly => channel < 2,
            FeatureMask::PmdInvDepth => channel < 2 || channel == 4,
            FeatureMask::PmdXy => channel < 4,
            FeatureMask::SpatialOnly => channel >= 2,
        }
    }

    /// Zeroes every excluded channel in place.
    pub fn apply(&self, flat: &mut FlatFeature) {
        if *self == FeatureMask::All {
            return;
        }
        for (i, v) in flat.values.iter_mut().enumerate() {
            if !self.channel_enabled(i % FEATURE_CHANNELS) {
                *v = 0.0;
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMask::All => "all",
            FeatureMask::PmdOnly => "pmd",
            FeatureMask::PmdInvDepth => "pmd-invdepth",
            FeatureMask::PmdXy => "pmd-xy",
            FeatureMask::SpatialOnly => "spatial",
        }
    }

    /// Accepts the descriptive names and the single-letter shorthand used
    /// in ablation tables (a through e, in declaration order).
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "a" | "A" => Some(FeatureMask::All),
            "b" | "B" => Some(FeatureMask::PmdOnly),
            "c" | "C" => Some(FeatureMask::PmdInvDepth),
            "d" | "D" => Some(FeatureMask::PmdXy),
            "e" | "E" => Some(FeatureMask::SpatialOnly),
            "all" => Some(FeatureMask::All),
            "pmd" => Some(FeatureMask::PmdOnly),
            "pmd-invdepth" => Some(FeatureMask::PmdInvDepth),
            "pmd-xy" => Some(FeatureMask::PmdXy),
            "spatial" => Some(FeatureMask::SpatialOnly),
            _ => None,
        }
    }
}
