//! The full tracker: window preparation, the training forward pass, and the
//! frame-by-frame tracking loop behind the [`Tracker`] trait.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::backbone::{Backbone, FrameFeatures, FrameVars};
use crate::data::{
    crop_search_region_indices, resample_points_indices, Box3D, PointFrame, SequenceSample,
    TrackerConfig,
};
use crate::error::{CoreError, Result};
use crate::eval::Tracker;
use crate::gmloc::{gaussian_mask, normalize_mask, select_best, LocNet, LocVars, Proposal};
use crate::memory::{run_bidirectional_protocol, run_forward_protocol, MemoryNet, ProtocolOutput};
use crate::nn::{BoundParams, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Deterministic seed mixing for per-frame sampling decisions.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ c.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// All learnable components plus the shared parameter store.
pub struct StmdModel<F: Real> {
    pub cfg: TrackerConfig,
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    pub memory: MemoryNet,
    pub locnet: LocNet,
}

/// One prepared window frame: model-precision arrays plus label bookkeeping.
pub struct PreparedFrame<F: Real> {
    pub features: FrameFeatures<F>,
    /// Per-point target-membership labels carried through crop/resample.
    pub labels: Vec<bool>,
    /// Count of real (non-filler) points after resampling.
    pub real_points: usize,
}

/// Training-time outputs for one window frame.
pub struct FrameTrainOut<F: Real> {
    /// Original frame index inside the sample.
    pub t: usize,
    pub coords: Array2<F>,
    pub center_labels: Vec<bool>,
    pub loc: LocVars,
    /// Ground-truth center in crop coordinates.
    pub gt_center: [f64; 3],
    pub gt_theta: f64,
    pub prev_theta: f64,
}

pub struct TrainForward<F: Real> {
    pub frames: Vec<FrameTrainOut<F>>,
    /// (mask-logit var, center labels) per mask evaluation in protocol order.
    pub mask_evals: Vec<(Var, Vec<bool>)>,
}

/// A prepared training window: cropped/resampled frames plus the crop center
/// they are expressed in.
pub struct TrainingWindow<F: Real> {
    pub prepared: Vec<PreparedFrame<F>>,
    pub crop_center: [f64; 3],
}

impl<F: Real> StmdModel<F> {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::init(&mut store, &mut rng, &cfg);
        let memory = MemoryNet::init(&mut store, &mut rng, cfg.feat_cp, cfg.heads);
        let locnet = LocNet::init(&mut store, &mut rng, cfg.feat_cp, cfg.activation);
        Ok(StmdModel {
            cfg,
            store,
            backbone,
            memory,
            locnet,
        })
    }

    /// Convert to another scalar precision with identical parameters.
    pub fn cast<G: Real>(&self) -> StmdModel<G> {
        StmdModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            memory: self.memory.clone(),
            locnet: self.locnet.clone(),
        }
    }

    /// Crop a raw frame around a box, resample to the configured budget, and
    /// cast to model precision. Labels (when given) ride along.
    pub fn prepare_frame(
        &self,
        frame: &PointFrame,
        around: &Box3D,
        labels: Option<&[bool]>,
        seed: u64,
    ) -> Result<PreparedFrame<F>> {
        let (cropped, kept) = crop_search_region_indices(frame, around, self.cfg.crop_margin);
        let (resampled, picks) = resample_points_indices(&cropped, self.cfg.points, seed)?;
        let feats = resampled
            .feats
            .as_ref()
            .expect("resample always emits feats");
        if feats.ncols() != self.cfg.in_channels {
            return Err(CoreError::Shape(format!(
                "frame has {} feature channels, model expects {}",
                feats.ncols(),
                self.cfg.in_channels
            )));
        }
        let out_labels: Vec<bool> = picks
            .iter()
            .map(|p| {
                p.map(|r| labels.map_or(false, |l| l[kept[r]]))
                    .unwrap_or(false)
            })
            .collect();
        let real_points = picks.iter().filter(|p| p.is_some()).count();
        Ok(PreparedFrame {
            features: FrameFeatures {
                centers: resampled.coords.mapv(F::from_f64),
                feats: feats.mapv(F::from_f64),
                t: frame.t,
            },
            labels: out_labels,
            real_points,
        })
    }

    fn run_protocol(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        seq: &[FrameVars<F>],
    ) -> Result<ProtocolOutput<F>> {
        if self.cfg.bidirectional {
            run_bidirectional_protocol(tape, bound, &self.memory, seq)
        } else {
            run_forward_protocol(tape, bound, &self.memory, seq)
        }
    }

    /// Crop, resample, and label the first L frames of a sample around the
    /// jittered frame-0 ground-truth center.
    pub fn prepare_training_window(
        &self,
        sample: &SequenceSample,
        sample_seed: u64,
        crop_jitter: f64,
    ) -> Result<TrainingWindow<F>> {
        sample.validate()?;
        let l = self.cfg.frames;
        if sample.len() < l {
            return Err(CoreError::Argument(format!(
                "sample has {} frames, window needs {l}",
                sample.len()
            )));
        }

        let mut jitter_rng = ChaCha12Rng::seed_from_u64(mix_seed(sample_seed, 0xA11CE, 0));
        // Center the window crop on the teacher box of the last frame, the
        // same geometry the tracker sees when it recrops around its previous
        // estimate each step.
        let mut crop_center = sample.gt_boxes[l - 2].center;
        for c in crop_center.iter_mut().take(2) {
            *c += jitter_rng.gen_range(-crop_jitter..=crop_jitter);
        }
        let crop_box = Box3D::new(crop_center, sample.target_size, sample.gt_boxes[l - 2].theta)?;

        let mut prepared = Vec::with_capacity(l);
        for t in 0..l {
            let labels = sample.target_mask.as_ref().map(|m| m[t].as_slice());
            let seed = mix_seed(sample_seed, t as u64, 0x5EED);
            prepared.push(self.prepare_frame(&sample.frames[t], &crop_box, labels, seed)?);
        }
        Ok(TrainingWindow {
            prepared,
            crop_center,
        })
    }

    /// Full training pass over one sample: backbone, memory protocol, then
    /// per-frame localization with teacher-forced mask centers and headings.
    ///
    /// The window is cropped around the frame-0 ground-truth center offset by
    /// a jitter of up to `crop_jitter` meters (drawn from `sample_seed`),
    /// mimicking accumulated tracking drift.
    pub fn training_forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        sample: &SequenceSample,
        sample_seed: u64,
        crop_jitter: f64,
    ) -> Result<TrainForward<F>> {
        let window = self.prepare_training_window(sample, sample_seed, crop_jitter)?;
        self.training_forward_prepared(tape, bound, &window, sample)
    }

    /// Training pass over an already prepared window.
    pub fn training_forward_prepared(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        window: &TrainingWindow<F>,
        sample: &SequenceSample,
    ) -> Result<TrainForward<F>> {
        let prepared = &window.prepared;
        let crop_center = window.crop_center;
        let frames: Vec<FrameFeatures<F>> =
            prepared.iter().map(|p| p.features.clone()).collect();
        let (seq, sources) = self.backbone.forward(tape, bound, &frames, &self.cfg)?;

        // Per-center labels for every backbone output frame, via the
        // set-abstraction source indices of the frame it centers on.
        let center_labels_of = |t: usize| -> Vec<bool> {
            sources[t].iter().map(|&i| prepared[t].labels[i]).collect()
        };

        let protocol = self.run_protocol(tape, bound, &seq)?;
        let mask_evals = protocol
            .mask_evals
            .iter()
            .map(|&(pos, var)| (var, center_labels_of(seq[pos].t)))
            .collect();

        let mut frames_out = Vec::with_capacity(protocol.loc.len());
        for loc in &protocol.loc {
            let t = seq[loc.index].t;
            let gt = &sample.gt_boxes[t];
            let teacher = if t == 0 { gt } else { &sample.gt_boxes[t - 1] };
            let y = [
                F::from_f64(teacher.center[0] - crop_center[0]),
                F::from_f64(teacher.center[1] - crop_center[1]),
                F::from_f64(teacher.center[2] - crop_center[2]),
            ];
            let weights = normalize_mask(&gaussian_mask(&loc.coords, y, self.cfg.sigma)?);
            let loc_vars = self.locnet.forward(
                tape,
                bound,
                &loc.coords,
                loc.geo,
                loc.mask_feats,
                &weights,
                self.cfg.k_top,
                teacher.theta,
            )?;
            frames_out.push(FrameTrainOut {
                t,
                coords: loc.coords.clone(),
                center_labels: center_labels_of(t),
                loc: loc_vars,
                gt_center: [
                    gt.center[0] - crop_center[0],
                    gt.center[1] - crop_center[1],
                    gt.center[2] - crop_center[2],
                ],
                gt_theta: gt.theta,
                prev_theta: teacher.theta,
            });
        }

        Ok(TrainForward {
            frames: frames_out,
            mask_evals,
        })
    }

    /// Predict the current-frame box from a window of raw frames. The last
    /// entry of `window` is the current frame; all frames are cropped around
    /// `prev_box`. Returns the selected box in world coordinates.
    pub fn track_window(
        &self,
        window: &[&PointFrame],
        prev_box: &Box3D,
        target_size: [f64; 3],
        step: u64,
    ) -> Result<Box3D> {
        if window.len() != self.cfg.frames {
            return Err(CoreError::Argument(format!(
                "track window must hold {} frames, got {}",
                self.cfg.frames,
                window.len()
            )));
        }
        let mut prepared = Vec::with_capacity(window.len());
        for (pos, frame) in window.iter().enumerate() {
            let seed = mix_seed(self.cfg.seed, step, pos as u64);
            prepared.push(self.prepare_frame(frame, prev_box, None, seed)?);
        }
        // No real point survived the crop of the current frame: carry the
        // previous box forward.
        if prepared.last().expect("window nonempty").real_points == 0 {
            return Ok(*prev_box);
        }

        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let frames: Vec<FrameFeatures<F>> =
            prepared.iter().map(|p| p.features.clone()).collect();
        let (seq, _) = self.backbone.forward(&mut tape, &bound, &frames, &self.cfg)?;
        let protocol = self.run_protocol(&mut tape, &bound, &seq)?;
        let loc = protocol.loc.last().expect("protocol yields frames");

        // Crop coordinates are centered on the previous estimate.
        let y = [F::zero(); 3];
        let weights = normalize_mask(&gaussian_mask(&loc.coords, y, self.cfg.sigma)?);
        let loc_vars = self.locnet.forward(
            &mut tape,
            &bound,
            &loc.coords,
            loc.geo,
            loc.mask_feats,
            &weights,
            self.cfg.k_top,
            prev_box.theta,
        )?;

        let proposals = read_proposals(&tape, &loc_vars, prev_box.center);
        Ok(select_best(&proposals, target_size, prev_box))
    }
}

/// Convert tape-level proposal outputs to world-coordinate proposals.
fn read_proposals<F: Real>(
    tape: &Tape<F>,
    loc: &LocVars,
    crop_center: [f64; 3],
) -> Vec<Proposal> {
    let centers = tape.value(loc.prop_centers);
    let thetas = tape.value(loc.prop_theta);
    let scores = tape.value(loc.prop_scores);
    (0..centers.nrows())
        .map(|i| Proposal {
            center: [
                centers[(i, 0)].to_f64() + crop_center[0],
                centers[(i, 1)].to_f64() + crop_center[1],
                centers[(i, 2)].to_f64() + crop_center[2],
            ],
            theta: thetas[(i, 0)].to_f64(),
            score: scores[(i, 0)].to_f64(),
        })
        .collect()
}

/// Stateful one-pass tracker over a shared model.
pub struct StmdTracker<'m, F: Real> {
    model: &'m StmdModel<F>,
    history: Vec<PointFrame>,
    prev_box: Option<Box3D>,
    target_size: [f64; 3],
    step: u64,
}

impl<'m, F: Real> StmdTracker<'m, F> {
    pub fn new(model: &'m StmdModel<F>) -> Self {
        StmdTracker {
            model,
            history: Vec::new(),
            prev_box: None,
            target_size: [1.0; 3],
            step: 0,
        }
    }
}

impl<F: Real> Tracker for StmdTracker<'_, F> {
    fn begin(&mut self, frame: &PointFrame, init: &Box3D) -> Result<()> {
        self.history.clear();
        self.history.push(frame.clone());
        self.prev_box = Some(*init);
        self.target_size = init.size;
        self.step = 0;
        Ok(())
    }

    fn step(&mut self, frame: &PointFrame) -> Result<Box3D> {
        let prev = self
            .prev_box
            .ok_or_else(|| CoreError::Argument("tracker not initialized".into()))?;
        self.history.push(frame.clone());
        self.step += 1;

        // Sliding window of the most recent L frames, left-replicated while
        // the history is short.
        let l = self.model.cfg.frames;
        let mut window: Vec<&PointFrame> = Vec::with_capacity(l);
        let have = self.history.len();
        for k in 0..l {
            let idx = (have + k).saturating_sub(l).min(have - 1);
            window.push(&self.history[idx]);
        }

        let pred = self
            .model
            .track_window(&window, &prev, self.target_size, self.step)?;
        self.prev_box = Some(pred);
        Ok(pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sequence, ScenarioConfig};
    use crate::eval::run_ope;

    fn small_cfg() -> TrackerConfig {
        TrackerConfig {
            frames: 4,
            points: 48,
            centers: 16,
            knn: 4,
            feat_c: 8,
            feat_cm: 12,
            feat_cp: 16,
            heads: 2,
            k_top: 8,
            seed: 0,
            ..Default::default()
        }
    }

    fn small_sample(seed: u64) -> SequenceSample {
        let cfg = ScenarioConfig {
            frames: 4,
            points_per_frame: 64,
            seed,
            ..Default::default()
        };
        generate_synthetic_sequence(&cfg).unwrap()
    }

    #[test]
    fn training_forward_shapes_and_labels() {
        let model: StmdModel<f64> = StmdModel::new(small_cfg()).unwrap();
        let sample = small_sample(5);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let out = model
            .training_forward(&mut tape, &bound, &sample, 42, 0.25)
            .unwrap();
        assert_eq!(out.frames.len(), 4);
        for f in &out.frames {
            assert_eq!(f.coords.nrows(), 16);
            assert_eq!(f.center_labels.len(), 16);
            assert_eq!(tape.value(f.loc.vote_centers).dim(), (16, 3));
            assert_eq!(tape.value(f.loc.prop_centers).dim(), (8, 3));
        }
        // Bi-directional protocol over 4 frames: 5 updates plus the last
        // frame read-out.
        assert_eq!(out.mask_evals.len(), 2 * 4 - 2);
    }

    #[test]
    fn training_forward_is_deterministic() {
        let model: StmdModel<f64> = StmdModel::new(small_cfg()).unwrap();
        let sample = small_sample(6);
        let run = || {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let out = model
                .training_forward(&mut tape, &bound, &sample, 7, 0.25)
                .unwrap();
            out.frames
                .iter()
                .map(|f| tape.value(f.loc.prop_centers).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tracker_emits_one_box_per_frame() {
        let model: StmdModel<f32> = StmdModel::new(small_cfg()).unwrap();
        let sample = small_sample(7);
        let mut tracker = StmdTracker::new(&model);
        let result = run_ope(&mut tracker, &sample).unwrap();
        assert_eq!(result.boxes.len(), sample.len());
        assert_eq!(result.boxes[0], sample.gt_boxes[0]);
        for b in &result.boxes {
            assert!(b.center.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn tracker_survives_full_occlusion_and_empty_crops() {
        let mut scen = ScenarioConfig {
            frames: 4,
            points_per_frame: 64,
            seed: 9,
            ..Default::default()
        };
        scen.occlusion.insert(2, 1.0);
        let sample = generate_synthetic_sequence(&scen).unwrap();
        let model: StmdModel<f32> = StmdModel::new(small_cfg()).unwrap();
        let mut tracker = StmdTracker::new(&model);
        let result = run_ope(&mut tracker, &sample).unwrap();
        assert_eq!(result.boxes.len(), 4);

        // Empty crop: teleport the target far away so the crop around the
        // stale previous box holds nothing; the tracker must carry forward.
        let mut far = sample.clone();
        for f in far.frames.iter_mut().skip(1) {
            f.coords.mapv_inplace(|v| v + 500.0);
        }
        for b in far.gt_boxes.iter_mut().skip(1) {
            b.center = [b.center[0] + 500.0, b.center[1] + 500.0, b.center[2] + 500.0];
        }
        let mut tracker = StmdTracker::new(&model);
        let result = run_ope(&mut tracker, &far).unwrap();
        assert_eq!(result.boxes.len(), 4);
        // Nothing visible in the crop: the previous box is carried forward.
        assert_eq!(result.boxes[1], sample.gt_boxes[0]);
    }

    #[test]
    fn tracking_is_deterministic() {
        let model: StmdModel<f32> = StmdModel::new(small_cfg()).unwrap();
        let sample = small_sample(11);
        let run = || {
            let mut tracker = StmdTracker::new(&model);
            run_ope(&mut tracker, &sample).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cast_preserves_parameters() {
        let model: StmdModel<f32> = StmdModel::new(small_cfg()).unwrap();
        let as64 = model.cast::<f64>();
        let back = as64.cast::<f32>();
        for (id, name, arr) in model.store.iter() {
            assert_eq!(back.store.name(id), name);
            assert_eq!(back.store.get(id), arr);
        }
    }
}
