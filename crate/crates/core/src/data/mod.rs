//! Domain types, synthetic scenarios, on-disk formats, and search-region
//! preparation.

mod benchmark;
mod kitti;
mod region;
mod seq_io;
mod synth;

pub use benchmark::{BenchmarkConfig, Split};
pub use kitti::read_kitti_frame;
pub use region::{crop_search_region, crop_search_region_indices, resample_points,
    resample_points_indices};
pub use seq_io::{read_sequence_dir, write_sequence_dir};
pub use synth::generate_synthetic_sequence;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tape::wrap_angle;

/// One timestamped point cloud: `N x 3` coordinates in meters plus optional
/// per-point feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFrame {
    pub coords: Array2<f64>,
    pub feats: Option<Array2<f64>>,
    pub t: usize,
}

impl PointFrame {
    pub fn new(coords: Array2<f64>, feats: Option<Array2<f64>>, t: usize) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(CoreError::Shape(format!(
                "point coordinates must be N x 3, got N x {}",
                coords.ncols()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("point coordinates".into()));
        }
        if let Some(f) = &feats {
            if f.nrows() != coords.nrows() {
                return Err(CoreError::Shape(format!(
                    "feature rows {} != point count {}",
                    f.nrows(),
                    coords.nrows()
                )));
            }
        }
        Ok(PointFrame { coords, feats, t })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// Number of feature channels (0 when `feats` is absent).
    pub fn channels(&self) -> usize {
        self.feats.as_ref().map_or(0, |f| f.ncols())
    }
}

/// Oriented 3-D bounding box: center, size `(w, l, h)` and yaw heading.
/// The heading rotates the length axis in the x-y plane; height spans z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub theta: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], theta: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::Argument(format!(
                "box size must be positive and finite, got {size:?}"
            )));
        }
        if center.iter().any(|v| !v.is_finite()) || !theta.is_finite() {
            return Err(CoreError::NonFinite("box center/theta".into()));
        }
        Ok(Box3D {
            center,
            size,
            theta: wrap_angle(theta),
        })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Bird's-eye-view corners, counterclockwise. Local +x spans the length.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            [
                self.center[0] + x * c - y * s,
                self.center[1] + x * s + y * c,
            ]
        })
    }

    pub fn z_range(&self) -> (f64, f64) {
        let hh = self.height() / 2.0;
        (self.center[2] - hh, self.center[2] + hh)
    }

    /// Point-in-box test with every half-extent dilated by `dilation` meters.
    pub fn contains(&self, p: [f64; 3], dilation: f64) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= self.length() / 2.0 + dilation
            && ly.abs() <= self.width() / 2.0 + dilation
            && dz.abs() <= self.height() / 2.0 + dilation
    }

    /// Map a point from box-local coordinates to world coordinates.
    pub fn local_to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        [
            self.center[0] + local[0] * c - local[1] * s,
            self.center[1] + local[0] * s + local[1] * c,
            self.center[2] + local[2],
        ]
    }
}

/// An L-frame tracking episode with per-frame ground truth. Synthetic data
/// carries per-point target-membership labels used for mask supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<PointFrame>,
    pub gt_boxes: Vec<Box3D>,
    pub target_size: [f64; 3],
    pub target_mask: Option<Vec<Vec<bool>>>,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(CoreError::Argument(format!(
                "sequence needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        if self.frames.len() != self.gt_boxes.len() {
            return Err(CoreError::Shape(format!(
                "{} frames vs {} ground-truth boxes",
                self.frames.len(),
                self.gt_boxes.len()
            )));
        }
        if self.gt_boxes[0].size != self.target_size {
            return Err(CoreError::Argument(
                "target_size must equal the first ground-truth box size".into(),
            ));
        }
        if let Some(mask) = &self.target_mask {
            if mask.len() != self.frames.len() {
                return Err(CoreError::Shape("mask frame count mismatch".into()));
            }
            for (m, f) in mask.iter().zip(&self.frames) {
                if m.len() != f.len() {
                    return Err(CoreError::Shape("mask point count mismatch".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Synthetic scenario parameters. One config generates one episode; the seed
/// fully determines the output.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub frames: usize,
    pub points_per_frame: usize,
    pub num_distractors: usize,
    /// Target speed range in meters per frame; one speed is drawn per episode.
    pub target_speed: (f64, f64),
    /// Minimum center distance between any distractor and the target, meters.
    pub distractor_min_gap: f64,
    /// Frame index -> fraction of target surface points dropped in [0, 1].
    pub occlusion: BTreeMap<usize, f64>,
    /// Per-point surface noise, meters (truncated at 3 sigma).
    pub noise_sigma: f64,
    pub seed: u64,
    /// Sampling ranges for the target box dimensions (w, l, h), meters.
    pub target_size_range: ((f64, f64), (f64, f64), (f64, f64)),
    /// Nominal fraction of each frame's points on the target surface.
    pub target_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            frames: 8,
            points_per_frame: 128,
            num_distractors: 2,
            target_speed: (0.15, 0.45),
            distractor_min_gap: 2.5,
            occlusion: BTreeMap::new(),
            noise_sigma: 0.02,
            seed: 0,
            target_size_range: ((1.6, 2.0), (3.4, 4.4), (1.4, 1.7)),
            target_fraction: 0.4,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(CoreError::Config("need at least 2 frames".into()));
        }
        if self.points_per_frame < 8 {
            return Err(CoreError::Config("need at least 8 points per frame".into()));
        }
        if !(self.target_speed.0 <= self.target_speed.1) || self.target_speed.0 < 0.0 {
            return Err(CoreError::Config(format!(
                "empty target_speed range {:?}",
                self.target_speed
            )));
        }
        if self.distractor_min_gap < 0.0 {
            return Err(CoreError::Config("negative distractor gap".into()));
        }
        for (&t, &f) in &self.occlusion {
            if t >= self.frames {
                return Err(CoreError::Config(format!(
                    "occlusion frame {t} beyond sequence length {}",
                    self.frames
                )));
            }
            if !(0.0..=1.0).contains(&f) {
                return Err(CoreError::Config(format!(
                    "occlusion fraction {f} outside [0, 1]"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::Config("negative noise sigma".into()));
        }
        let ranges = [
            self.target_size_range.0,
            self.target_size_range.1,
            self.target_size_range.2,
        ];
        for (lo, hi) in ranges {
            if !(0.0 < lo && lo <= hi) {
                return Err(CoreError::Config(format!(
                    "empty target size range ({lo}, {hi})"
                )));
            }
        }
        if !(0.0 < self.target_fraction && self.target_fraction < 1.0) {
            return Err(CoreError::Config("target_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Temporal padding applied before the 1-D frame-axis convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    None,
    Zero,
    Replicate,
}

impl std::fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PaddingMode::None => write!(f, "none"),
            PaddingMode::Zero => write!(f, "zero"),
            PaddingMode::Replicate => write!(f, "replicate"),
        }
    }
}

/// Aggregator over a point's k graph edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeAggregation {
    Max,
    Sum,
}

/// Tracker hyperparameters. Defaults give the desk-scale reference model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Sliding-window length L (number of frames fed to the backbone).
    pub frames: usize,
    /// Point budget per cropped frame.
    pub points: usize,
    /// Set-abstraction center count M.
    pub centers: usize,
    /// Neighbors per node in the KNN graph.
    pub knn: usize,
    /// Temporal kernel size (odd).
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub padding: PaddingMode,
    /// Gaussian mask width, meters.
    pub sigma: f64,
    /// Proposal count sampled by objectness rank.
    pub k_top: usize,
    /// Set-abstraction output width C.
    pub feat_c: usize,
    /// Spatial edge-convolution output width C_m.
    pub feat_cm: usize,
    /// Spatio-temporal embedding width C'.
    pub feat_cp: usize,
    /// Attention heads in the memory transformer blocks.
    pub heads: usize,
    /// Input feature channels per point (validity flag included).
    pub in_channels: usize,
    /// Search-region margin beyond the box half-extent, meters.
    pub crop_margin: f64,
    pub seed: u64,
    /// Bi-directional cross-frame memory on/off (off = forward-only chain).
    pub bidirectional: bool,
    /// Temporal convolution on/off (off = center-tap projection only).
    pub temporal_enabled: bool,
    pub aggregation: EdgeAggregation,
    pub activation: crate::nn::Activation,
    /// Vote-to-center radius that marks an objectness positive, meters.
    pub positive_radius: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            frames: 8,
            points: 128,
            centers: 64,
            knn: 8,
            temporal_kernel: 3,
            temporal_stride: 1,
            padding: PaddingMode::Replicate,
            sigma: 2.0,
            k_top: 16,
            feat_c: 32,
            feat_cm: 64,
            feat_cp: 128,
            heads: 4,
            in_channels: 1,
            crop_margin: 2.0,
            seed: 0,
            bidirectional: true,
            temporal_enabled: true,
            aggregation: EdgeAggregation::Max,
            activation: crate::nn::Activation::Tanh,
            positive_radius: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(CoreError::Config("window needs at least 2 frames".into()));
        }
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel == 0 {
            return Err(CoreError::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.temporal_stride == 0 {
            return Err(CoreError::Config("temporal stride must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.k_top == 0 || self.k_top > self.centers || self.k_top > self.points {
            return Err(CoreError::Config(format!(
                "k_top {} must be in 1..=centers ({}) and <= points ({})",
                self.k_top, self.centers, self.points
            )));
        }
        if self.centers == 0 || self.points == 0 {
            return Err(CoreError::Config("centers/points must be positive".into()));
        }
        if self.knn == 0 || self.knn >= self.centers {
            return Err(CoreError::Config(format!(
                "knn {} must be in 1..centers ({})",
                self.knn, self.centers
            )));
        }
        if self.heads == 0 || self.feat_cp % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "heads {} must divide feature width {}",
                self.heads, self.feat_cp
            )));
        }
        if self.in_channels == 0 {
            return Err(CoreError::Config("in_channels must include the flag".into()));
        }
        if self.crop_margin < 0.0 {
            return Err(CoreError::Config("crop margin must be >= 0".into()));
        }
        if !(self.positive_radius > 0.0) {
            return Err(CoreError::Config("positive radius must be > 0".into()));
        }
        Ok(())
    }

    /// Half-width of the temporal padding for the configured kernel.
    pub fn temporal_pad_width(&self) -> usize {
        (self.temporal_kernel - 1) / 2
    }
}

pub(crate) fn normalize_theta(theta: f64) -> f64 {
    wrap_angle(theta)
}

#[allow(dead_code)]
pub(crate) const TWO_PI: f64 = 2.0 * PI;
