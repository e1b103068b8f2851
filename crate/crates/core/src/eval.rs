//! One-Pass Evaluation: rotated 3-D IoU, center error, Success/Precision
//! AUC over fixed 101-point threshold grids, and the sequence-level loop.

use serde::{Deserialize, Serialize};

use crate::data::{Box3D, PointFrame, SequenceSample};
use crate::error::{CoreError, Result};

/// Volumetric IoU of two yaw-rotated boxes: BEV polygon intersection times
/// vertical overlap, over the union of volumes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (az0, az1) = a.z_range();
    let (bz0, bz1) = b.z_range();
    let dz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let pa = a.corners_bev();
    let pb = b.corners_bev();
    let inter_poly = clip_polygon(pa.to_vec(), &pb);
    let inter_area = polygon_area(&inter_poly);
    let inter = inter_area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman clipping of `subject` against a convex CCW `clip`
/// quadrilateral.
fn clip_polygon(mut subject: Vec<[f64; 2]>, clip: &[[f64; 2]; 4]) -> Vec<[f64; 2]> {
    for e in 0..4 {
        if subject.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % 4];
        let mut out = Vec::with_capacity(subject.len() + 1);
        for i in 0..subject.len() {
            let p = subject[i];
            let q = subject[(i + 1) % subject.len()];
            let p_in = side(a, b, p) >= 0.0;
            let q_in = side(a, b, q) >= 0.0;
            match (p_in, q_in) {
                (true, true) => out.push(q),
                (true, false) => out.push(intersect(a, b, p, q)),
                (false, true) => {
                    out.push(intersect(a, b, p, q));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
        subject = out;
    }
    subject
}

fn side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn intersect(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let d1 = side(a, b, p);
    let d2 = side(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    (s / 2.0).abs()
}

/// Euclidean distance between box centers, meters.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let mut s = 0.0;
    for d in 0..3 {
        s += (a.center[d] - b.center[d]).powi(2);
    }
    s.sqrt()
}

/// Success AUC: mean over the 101 thresholds tau = 0.00, 0.01, ..., 1.00 of
/// the frame fraction with IoU strictly above tau.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(CoreError::Argument("success_auc of an empty list".into()));
    }
    let n = ious.len() as f64;
    let mut acc = 0.0;
    for i in 0..=100u32 {
        let tau = i as f64 / 100.0;
        let frac = ious.iter().filter(|&&v| v > tau).count() as f64 / n;
        acc += frac;
    }
    Ok(acc / 101.0)
}

/// Precision AUC: mean over the 101 thresholds tau = 0.00, 0.02, ..., 2.00
/// of the frame fraction with center distance at most tau.
pub fn precision_auc(dists: &[f64]) -> Result<f64> {
    if dists.is_empty() {
        return Err(CoreError::Argument("precision_auc of an empty list".into()));
    }
    let n = dists.len() as f64;
    let mut acc = 0.0;
    for i in 0..=100u32 {
        let tau = i as f64 * 0.02;
        let frac = dists.iter().filter(|&&v| v <= tau).count() as f64 / n;
        acc += frac;
    }
    Ok(acc / 101.0)
}

/// Single-object tracker driven frame by frame by [`run_ope`].
pub trait Tracker {
    /// Receive the first frame with its ground-truth box.
    fn begin(&mut self, frame: &PointFrame, init: &Box3D) -> Result<()>;
    /// Predict the box for the next frame.
    fn step(&mut self, frame: &PointFrame) -> Result<Box3D>;
}

/// Baseline that repeats the initialization box forever.
#[derive(Default)]
pub struct StaticBaseline {
    current: Option<Box3D>,
}

impl Tracker for StaticBaseline {
    fn begin(&mut self, _frame: &PointFrame, init: &Box3D) -> Result<()> {
        self.current = Some(*init);
        Ok(())
    }
    fn step(&mut self, _frame: &PointFrame) -> Result<Box3D> {
        self.current
            .ok_or_else(|| CoreError::Argument("tracker not initialized".into()))
    }
}

/// Test oracle that replays the ground-truth boxes.
pub struct OracleTracker {
    boxes: Vec<Box3D>,
    at: usize,
}

impl OracleTracker {
    pub fn new(sample: &SequenceSample) -> Self {
        OracleTracker {
            boxes: sample.gt_boxes.clone(),
            at: 0,
        }
    }
}

impl Tracker for OracleTracker {
    fn begin(&mut self, _frame: &PointFrame, _init: &Box3D) -> Result<()> {
        self.at = 0;
        Ok(())
    }
    fn step(&mut self, _frame: &PointFrame) -> Result<Box3D> {
        self.at += 1;
        self.boxes
            .get(self.at)
            .copied()
            .ok_or_else(|| CoreError::Argument("oracle ran past the sequence".into()))
    }
}

/// Per-sequence tracking outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub boxes: Vec<Box3D>,
    pub ious: Vec<f64>,
    pub dists: Vec<f64>,
    pub success: f64,
    pub precision: f64,
}

#[derive(Serialize, Deserialize)]
struct WireFrame {
    #[serde(rename = "box")]
    box7: [f64; 7],
    iou: f64,
    dist: f64,
}

#[derive(Serialize, Deserialize)]
struct WireResult {
    frames: Vec<WireFrame>,
    success: f64,
    precision: f64,
}

impl TrackResult {
    pub fn to_json(&self) -> String {
        let wire = WireResult {
            frames: self
                .boxes
                .iter()
                .zip(self.ious.iter().zip(&self.dists))
                .map(|(b, (&iou, &dist))| WireFrame {
                    box7: [
                        b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2],
                        b.theta,
                    ],
                    iou,
                    dist,
                })
                .collect(),
            success: self.success,
            precision: self.precision,
        };
        serde_json::to_string(&wire).expect("track result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: WireResult = serde_json::from_str(text).map_err(|e| CoreError::Parse {
            file: "<track-result>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut boxes = Vec::with_capacity(wire.frames.len());
        let mut ious = Vec::with_capacity(wire.frames.len());
        let mut dists = Vec::with_capacity(wire.frames.len());
        for f in &wire.frames {
            boxes.push(Box3D::new(
                [f.box7[0], f.box7[1], f.box7[2]],
                [f.box7[3], f.box7[4], f.box7[5]],
                f.box7[6],
            )?);
            ious.push(f.iou);
            dists.push(f.dist);
        }
        Ok(TrackResult {
            boxes,
            ious,
            dists,
            success: wire.success,
            precision: wire.precision,
        })
    }
}

/// One-pass evaluation: the frame-0 prediction is the ground-truth box, every
/// later frame is predicted by the tracker with no resets, and Success and
/// Precision are scored over every frame.
pub fn run_ope<T: Tracker>(tracker: &mut T, sample: &SequenceSample) -> Result<TrackResult> {
    sample.validate()?;
    let mut boxes = Vec::with_capacity(sample.len());
    tracker.begin(&sample.frames[0], &sample.gt_boxes[0])?;
    boxes.push(sample.gt_boxes[0]);
    for frame in &sample.frames[1..] {
        boxes.push(tracker.step(frame)?);
    }
    let ious: Vec<f64> = boxes
        .iter()
        .zip(&sample.gt_boxes)
        .map(|(p, g)| iou3d(p, g))
        .collect();
    let dists: Vec<f64> = boxes
        .iter()
        .zip(&sample.gt_boxes)
        .map(|(p, g)| center_distance(p, g))
        .collect();
    let success = success_auc(&ious)?;
    let precision = precision_auc(&dists)?;
    Ok(TrackResult {
        boxes,
        ious,
        dists,
        success,
        precision,
    })
}
