//! Supervised training on synthetic sequences: the four-term objective,
//! mini-batch gradient descent with a halved step-size schedule, a
//! finite-difference verification harness, and binary checkpoints.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceSample, TrackerConfig};
use crate::error::{CoreError, Result};
use crate::eval::run_ope;
use crate::model::{mix_seed, StmdModel, StmdTracker, TrainForward};
use crate::nn::{BoundParams, ParamStore};
use crate::real::Real;
use crate::tape::{Grads, Tape, Var};

/// Relative weight of each loss term.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mask: f64,
    pub vote: f64,
    pub objectness: f64,
    pub box_term: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            vote: 1.0,
            objectness: 1.0,
            box_term: 1.0,
        }
    }
}

/// Scalar loss values for logging and tests.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask_term: f64,
    pub vote_term: f64,
    pub objectness_term: f64,
    pub box_term: f64,
    pub weights: LossWeights,
}

/// Assemble the training objective on the tape.
///
/// mask: BCE of every mask evaluation against center membership labels.
/// vote: smooth-L1 of vote centers to the ground-truth center, member
/// centers only. objectness: BCE on vote objectness (and sampled proposal
/// scores), positive iff the vote lands within `positive_radius` of the
/// center. box: smooth-L1 on refined centers and wrapped headings of
/// positive proposals.
pub fn compute_loss<F: Real>(
    tape: &mut Tape<F>,
    fwd: &TrainForward<F>,
    weights: &LossWeights,
    positive_radius: f64,
) -> Result<(Var, LossBreakdown)> {
    if fwd.frames.is_empty() {
        return Err(CoreError::Argument("loss over zero frames".into()));
    }

    // Mask term: mean BCE over every mask evaluation.
    let mut mask_acc: Option<Var> = None;
    for (logits, labels) in &fwd.mask_evals {
        let target = Rc::new(Array2::from_shape_fn((labels.len(), 1), |(i, _)| {
            if labels[i] {
                F::one()
            } else {
                F::zero()
            }
        }));
        let bce = tape.bce_with_logits(*logits, target);
        let mean = tape.mean_all(bce);
        mask_acc = Some(match mask_acc {
            None => mean,
            Some(a) => tape.add(a, mean),
        });
    }
    let mask_term = match mask_acc {
        Some(v) => tape.scale(v, F::from_f64(1.0 / fwd.mask_evals.len() as f64)),
        None => tape.leaf(Array2::zeros((1, 1))),
    };

    let n_frames = fwd.frames.len() as f64;
    let mut vote_acc: Option<Var> = None;
    let mut obj_acc: Option<Var> = None;
    let mut box_acc: Option<Var> = None;
    let radius2 = positive_radius * positive_radius;

    for f in &fwd.frames {
        let m = f.coords.nrows();
        let gt = f.gt_center;
        let gt_row = [
            F::from_f64(gt[0]),
            F::from_f64(gt[1]),
            F::from_f64(gt[2]),
        ];

        // Vote regression over member centers.
        let members: Vec<usize> = (0..m).filter(|&i| f.center_labels[i]).collect();
        if !members.is_empty() {
            let target = Rc::new(Array2::from_shape_fn((m, 3), |(_, d)| gt_row[d]));
            let sl = tape.smooth_l1(f.loc.vote_centers, target);
            let w = F::from_f64(1.0 / (members.len() as f64 * 3.0));
            let row_w = ndarray::Array1::from_shape_fn(m, |i| {
                if f.center_labels[i] {
                    w
                } else {
                    F::zero()
                }
            });
            let weighted = tape.scale_rows(sl, Rc::new(row_w));
            let s = tape.sum_all(weighted);
            vote_acc = Some(match vote_acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }

        // Objectness labels from where the votes actually landed.
        let votes = tape.value(f.loc.vote_centers).clone();
        let vote_pos: Vec<bool> = (0..m)
            .map(|i| {
                let mut d2 = 0.0;
                for d in 0..3 {
                    d2 += (votes[(i, d)].to_f64() - gt[d]).powi(2);
                }
                d2 <= radius2
            })
            .collect();
        let obj_target = Rc::new(Array2::from_shape_fn((m, 1), |(i, _)| {
            if vote_pos[i] {
                F::one()
            } else {
                F::zero()
            }
        }));
        let obj_bce = tape.bce_with_logits(f.loc.obj_logits, obj_target);
        let obj_mean = tape.mean_all(obj_bce);

        // Proposal score head shares the objectness supervision.
        let k = f.loc.top_idx.len();
        let prop_target = Rc::new(Array2::from_shape_fn((k, 1), |(r, _)| {
            if vote_pos[f.loc.top_idx[r]] {
                F::one()
            } else {
                F::zero()
            }
        }));
        let prop_bce = tape.bce_with_logits(f.loc.prop_score_logits, prop_target);
        let prop_mean = tape.mean_all(prop_bce);
        let both = tape.add(obj_mean, prop_mean);
        let both = tape.scale(both, F::from_f64(0.5));
        obj_acc = Some(match obj_acc {
            None => both,
            Some(a) => tape.add(a, both),
        });

        // Box refinement over positive proposals.
        let pos_rows: Vec<usize> = (0..k).filter(|&r| vote_pos[f.loc.top_idx[r]]).collect();
        if !pos_rows.is_empty() {
            let target = Rc::new(Array2::from_shape_fn((k, 3), |(_, d)| gt_row[d]));
            let sl = tape.smooth_l1(f.loc.prop_centers, target);
            let wc = F::from_f64(1.0 / (pos_rows.len() as f64 * 3.0));
            let row_w = ndarray::Array1::from_shape_fn(k, |r| {
                if vote_pos[f.loc.top_idx[r]] {
                    wc
                } else {
                    F::zero()
                }
            });
            let weighted = tape.scale_rows(sl, Rc::new(row_w));
            let center_loss = tape.sum_all(weighted);

            let neg_gt = Rc::new(Array2::from_elem((k, 1), F::from_f64(-f.gt_theta)));
            let diff = tape.add_const(f.loc.prop_theta, neg_gt);
            let wrapped = tape.wrap_to_pi(diff);
            let zeros = Rc::new(Array2::zeros((k, 1)));
            let sl_theta = tape.smooth_l1(wrapped, zeros);
            let wt = F::from_f64(1.0 / pos_rows.len() as f64);
            let row_wt = ndarray::Array1::from_shape_fn(k, |r| {
                if vote_pos[f.loc.top_idx[r]] {
                    wt
                } else {
                    F::zero()
                }
            });
            let weighted_t = tape.scale_rows(sl_theta, Rc::new(row_wt));
            let theta_loss = tape.sum_all(weighted_t);

            let frame_box = tape.add(center_loss, theta_loss);
            box_acc = Some(match box_acc {
                None => frame_box,
                Some(a) => tape.add(a, frame_box),
            });
        }
    }

    let inv_frames = F::from_f64(1.0 / n_frames);
    let vote_term = match vote_acc {
        Some(v) => tape.scale(v, inv_frames),
        None => tape.leaf(Array2::zeros((1, 1))),
    };
    let obj_term = match obj_acc {
        Some(v) => tape.scale(v, inv_frames),
        None => tape.leaf(Array2::zeros((1, 1))),
    };
    let box_term = match box_acc {
        Some(v) => tape.scale(v, inv_frames),
        None => tape.leaf(Array2::zeros((1, 1))),
    };

    let wm = tape.scale(mask_term, F::from_f64(weights.mask));
    let wv = tape.scale(vote_term, F::from_f64(weights.vote));
    let wo = tape.scale(obj_term, F::from_f64(weights.objectness));
    let wb = tape.scale(box_term, F::from_f64(weights.box_term));
    let t1 = tape.add(wm, wv);
    let t2 = tape.add(wo, wb);
    let total = tape.add(t1, t2);

    let breakdown = LossBreakdown {
        total: tape.value(total)[(0, 0)].to_f64(),
        mask_term: tape.value(mask_term)[(0, 0)].to_f64(),
        vote_term: tape.value(vote_term)[(0, 0)].to_f64(),
        objectness_term: tape.value(obj_term)[(0, 0)].to_f64(),
        box_term: tape.value(box_term)[(0, 0)].to_f64(),
        weights: *weights,
    };
    Ok((total, breakdown))
}

/// Pull per-parameter gradients (zeros for parameters off the active path).
pub fn param_grads<F: Real>(
    store: &ParamStore<F>,
    bound: &BoundParams,
    grads: &Grads<F>,
) -> Vec<Array2<F>> {
    store
        .ids()
        .map(|id| {
            grads
                .get(bound.var(id))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Mini-batch optimizer with a fixed step-size schedule (the base rate is
/// halved at 1/3 and 2/3 of the planned steps).
pub struct Optimizer<F: Real> {
    kind: OptimizerKind,
    base_lr: f64,
    total_steps: usize,
    step: usize,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, base_lr: f64, total_steps: usize, store: &ParamStore<F>) -> Self {
        let shapes: Vec<Array2<F>> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Optimizer {
            kind,
            base_lr,
            total_steps,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.total_steps.max(1);
        if self.step * 3 < t {
            self.base_lr
        } else if self.step * 3 < 2 * t {
            self.base_lr / 2.0
        } else {
            self.base_lr / 4.0
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[Array2<F>]) {
        let lr = self.current_lr();
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
                    let p = store.get_mut(id);
                    p.zip_mut_with(g, |pv, &gv| *pv = *pv - F::from_f64(lr) * gv);
                }
            }
            OptimizerKind::Adam => {
                let b1 = F::from_f64(0.9);
                let b2 = F::from_f64(0.999);
                let eps = F::from_f64(1e-8);
                let t = self.step as i32;
                let c1 = F::from_f64(1.0 - 0.9f64.powi(t));
                let c2 = F::from_f64(1.0 - 0.999f64.powi(t));
                for (i, (id, g)) in store
                    .ids()
                    .collect::<Vec<_>>()
                    .into_iter()
                    .zip(grads)
                    .enumerate()
                {
                    self.m[i].zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (F::one() - b1) * gv);
                    self.v[i]
                        .zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (F::one() - b2) * gv * gv);
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p)
                        .and(&self.m[i])
                        .and(&self.v[i])
                        .for_each(|pv, &mv, &vv| {
                            let mh = mv / c1;
                            let vh = vv / c2;
                            *pv = *pv - F::from_f64(lr) * mh / (vh.sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Random offset (meters) applied to the training crop center.
    pub crop_jitter: f64,
    /// Evaluate on the held-out set every this many epochs (and at the end).
    pub eval_every_epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            crop_jitter: 0.3,
            eval_every_epochs: 1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mask: f64,
    pub vote: f64,
    pub objectness: f64,
    #[serde(rename = "box")]
    pub box_term: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_success: f64,
    pub mean_precision: f64,
}

pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_success: f64,
    pub steps: usize,
}

/// Mean Success/Precision of the model over a sequence set.
pub fn evaluate_model<F: Real>(
    model: &StmdModel<F>,
    eval_set: &[SequenceSample],
) -> Result<(f64, f64)> {
    if eval_set.is_empty() {
        return Err(CoreError::Argument("empty evaluation set".into()));
    }
    let mut s = 0.0;
    let mut p = 0.0;
    for sample in eval_set {
        let mut tracker = StmdTracker::new(model);
        let r = run_ope(&mut tracker, sample)?;
        s += r.success;
        p += r.precision;
    }
    Ok((s / eval_set.len() as f64, p / eval_set.len() as f64))
}

/// Mini-batch training with periodic evaluation; the best parameters by
/// evaluation Success are restored into the model before returning.
pub fn train_loop<F: Real>(
    model: &mut StmdModel<F>,
    tcfg: &TrainConfig,
    train_set: &[SequenceSample],
    eval_set: &[SequenceSample],
) -> Result<TrainOutcome> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(CoreError::Argument(
            "training needs nonempty datasets".into(),
        ));
    }
    let steps_per_epoch = train_set.len().div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.lr, total_steps, &model.store);
    let mut order_rng = ChaCha12Rng::seed_from_u64(mix_seed(tcfg.seed, 1, 2));

    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut best_success = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Array2<F>>> = None;
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);

        for batch in order.chunks(tcfg.batch_size) {
            let mut acc: Vec<Array2<F>> = model
                .store
                .ids()
                .map(|id| Array2::zeros(model.store.get(id).dim()))
                .collect();
            let mut batch_loss = LossBreakdown {
                total: 0.0,
                mask_term: 0.0,
                vote_term: 0.0,
                objectness_term: 0.0,
                box_term: 0.0,
                weights: tcfg.weights,
            };
            for &si in batch {
                let sample_seed = mix_seed(tcfg.seed, si as u64, epoch as u64);
                let mut tape = Tape::new();
                let bound = model.store.bind(&mut tape);
                let fwd = model.training_forward(
                    &mut tape,
                    &bound,
                    &train_set[si],
                    sample_seed,
                    tcfg.crop_jitter,
                )?;
                let (loss, bd) =
                    compute_loss(&mut tape, &fwd, &tcfg.weights, model.cfg.positive_radius)?;
                if !bd.total.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "loss diverged at step {step} on training sequence {si} \
                         (epoch {epoch}, sample seed {sample_seed}): {bd:?}"
                    )));
                }
                let grads = tape.backward(loss);
                for (a, g) in acc.iter_mut().zip(param_grads(&model.store, &bound, &grads)) {
                    *a += &g;
                }
                batch_loss.total += bd.total;
                batch_loss.mask_term += bd.mask_term;
                batch_loss.vote_term += bd.vote_term;
                batch_loss.objectness_term += bd.objectness_term;
                batch_loss.box_term += bd.box_term;
            }
            let n = batch.len() as f64;
            let inv = F::from_f64(1.0 / n);
            for a in &mut acc {
                a.mapv_inplace(|v| v * inv);
            }
            let lr = opt.current_lr();
            opt.apply(&mut model.store, &acc);
            step += 1;
            history.push(StepRecord {
                step,
                epoch,
                lr,
                loss: batch_loss.total / n,
                mask: batch_loss.mask_term / n,
                vote: batch_loss.vote_term / n,
                objectness: batch_loss.objectness_term / n,
                box_term: batch_loss.box_term / n,
            });
        }

        let due = tcfg.eval_every_epochs > 0 && (epoch + 1) % tcfg.eval_every_epochs == 0;
        if due || epoch + 1 == tcfg.epochs {
            let (s, p) = evaluate_model(model, eval_set)?;
            evals.push(EvalRecord {
                step,
                mean_success: s,
                mean_precision: p,
            });
            if s > best_success {
                best_success = s;
                best_params = Some(model.store.ids().map(|id| model.store.get(id).clone()).collect());
            }
        }
    }

    if let Some(best) = best_params {
        for (id, arr) in model.store.ids().collect::<Vec<_>>().into_iter().zip(best) {
            *model.store.get_mut(id) = arr;
        }
    }
    Ok(TrainOutcome {
        history,
        evals,
        best_success,
        steps: step,
    })
}

/// Worst relative finite-difference error across every parameter scalar.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central-difference verification of analytic gradients.
///
/// `analytic` holds one gradient array per store parameter (store order);
/// `loss_fn` re-evaluates the scalar loss for perturbed parameters. The
/// relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn finite_difference_check<L>(
    store: &mut ParamStore<f64>,
    analytic: &[Array2<f64>],
    mut loss_fn: L,
    step: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let dim = store.get(id).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let a = analytic[id.0][(r, c)];
                if !a.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "analytic gradient of {name}[{r},{c}]"
                    )));
                }
                let orig = store.get(id)[(r, c)];
                store.get_mut(id)[(r, c)] = orig + step;
                let fp = loss_fn(store)?;
                store.get_mut(id)[(r, c)] = orig - step;
                let fm = loss_fn(store)?;
                store.get_mut(id)[(r, c)] = orig;
                let n = (fp - fm) / (2.0 * step);
                if !n.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "numeric gradient of {name}[{r},{c}]"
                    )));
                }
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_param = format!("{name}[{r},{c}]");
                }
                checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        worst,
        worst_param,
        checked,
    })
}

/// Finite-difference check of the full model loss on one sample
/// (double precision).
pub fn grad_check_model(
    model: &mut StmdModel<f64>,
    sample: &SequenceSample,
    sample_seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let weights = LossWeights::default();
    let radius = model.cfg.positive_radius;
    let jitter = 0.0;

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let fwd = model.training_forward(&mut tape, &bound, sample, sample_seed, jitter)?;
    let (loss, _) = compute_loss(&mut tape, &fwd, &weights, radius)?;
    let grads = tape.backward(loss);
    let analytic = param_grads(&model.store, &bound, &grads);

    let cfg = model.cfg.clone();
    let backbone = model.backbone.clone();
    let memory = model.memory.clone();
    let locnet = model.locnet.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = finite_difference_check(
        &mut store,
        &analytic,
        |s| {
            let probe = StmdModel {
                cfg: cfg.clone(),
                store: s.cast::<f64>(),
                backbone: backbone.clone(),
                memory: memory.clone(),
                locnet: locnet.clone(),
            };
            let mut t = Tape::new();
            let b = probe.store.bind(&mut t);
            let fwd = probe.training_forward(&mut t, &b, sample, sample_seed, jitter)?;
            let (loss, bd) = compute_loss(&mut t, &fwd, &weights, radius)?;
            let _ = loss;
            Ok(bd.total)
        },
        step,
    );
    model.store = store;
    report
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    tracker: TrackerConfig,
    step: u64,
    seed: u64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"STMD";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, version, scalar count, config JSON blob,
/// 32-bit float payload, CRC32 over everything before it.
pub fn save_checkpoint<F: Real>(model: &StmdModel<F>, step: u64, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        tracker: model.cfg.clone(),
        step,
        seed: model.cfg.seed,
    };
    let meta_json = serde_json::to_vec(&meta).expect("checkpoint meta serializes");
    let count: u64 = model.store.num_scalars() as u64;

    let mut bytes = Vec::with_capacity(24 + meta_json.len() + count as usize * 4);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    for id in model.store.ids() {
        for &v in model.store.get(id).iter() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 28 {
        return Err(CoreError::Checksum {
            stored: 0,
            computed: crc32fast::hash(&bytes),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CoreError::Checksum { stored, computed });
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(CoreError::Version("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Version(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let meta_len = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
    if body.len() != 24 + meta_len + count * 4 {
        return Err(CoreError::Version(format!(
            "checkpoint length {} does not match a count of {count}",
            body.len()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[24..24 + meta_len])
        .map_err(|e| CoreError::Version(format!("bad config blob: {e}")))?;
    let payload = &body[24 + meta_len..];
    let params: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, params))
}

/// Rebuild a model from a checkpoint's stored configuration.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(StmdModel<F>, u64)> {
    let (meta, params) = read_checkpoint(path)?;
    let mut model = StmdModel::<F>::new(meta.tracker)?;
    write_params(&mut model, &params)?;
    Ok((model, meta.step))
}

/// Load parameters into an existing model; the stored configuration must
/// match exactly.
pub fn load_checkpoint_into<F: Real>(model: &mut StmdModel<F>, path: &Path) -> Result<u64> {
    let (meta, params) = read_checkpoint(path)?;
    if meta.tracker != model.cfg {
        return Err(CoreError::Version(format!(
            "checkpoint was trained with a different configuration \
             (stored frames={}, model frames={})",
            meta.tracker.frames, model.cfg.frames
        )));
    }
    write_params(model, &params)?;
    Ok(meta.step)
}

fn write_params<F: Real>(model: &mut StmdModel<F>, params: &[f32]) -> Result<usize> {
    if params.len() != model.store.num_scalars() {
        return Err(CoreError::Version(format!(
            "checkpoint holds {} scalars, model needs {}",
            params.len(),
            model.store.num_scalars()
        )));
    }
    let mut at = 0;
    for id in model.store.ids().collect::<Vec<_>>() {
        let arr = model.store.get_mut(id);
        for v in arr.iter_mut() {
            *v = F::from_f64(params[at] as f64);
            at += 1;
        }
    }
    Ok(at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sequence, ScenarioConfig};
    use crate::gmloc::LocVars;
    use crate::model::FrameTrainOut;
    use ndarray::array;

    /// Build a two-center frame with hand-picked head outputs.
    fn handmade_forward(tape: &mut Tape<f64>) -> TrainForward<f64> {
        let coords = array![[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let fused = tape.leaf(Array2::zeros((2, 2)));
        let vote_centers = tape.leaf(array![[1.2, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let obj_logits = tape.leaf(Array2::zeros((2, 1)));
        let objectness = tape.sigmoid(obj_logits);
        let prop_centers = tape.leaf(array![[1.5, 0.0, 0.0], [9.0, 9.0, 9.0]]);
        let prop_theta = tape.leaf(array![[0.9], [2.0]]);
        let prop_score_logits = tape.leaf(Array2::zeros((2, 1)));
        let prop_scores = tape.sigmoid(prop_score_logits);
        let mask_logits = tape.leaf(Array2::zeros((2, 1)));
        let loc = LocVars {
            fused,
            vote_centers,
            obj_logits,
            objectness,
            top_idx: vec![0, 1],
            prop_centers,
            prop_theta,
            prop_score_logits,
            prop_scores,
        };
        TrainForward {
            frames: vec![FrameTrainOut {
                t: 0,
                coords,
                center_labels: vec![true, false],
                loc,
                gt_center: [1.0, 0.0, 0.0],
                gt_theta: 0.4,
                prev_theta: 0.4,
            }],
            mask_evals: vec![(mask_logits, vec![true, false])],
        }
    }

    #[test]
    fn loss_matches_hand_computation() {
        let mut tape: Tape<f64> = Tape::new();
        let fwd = handmade_forward(&mut tape);
        let (_, bd) = compute_loss(&mut tape, &fwd, &LossWeights::default(), 0.3).unwrap();

        let ln2 = std::f64::consts::LN_2;
        // Mask: zero logits against labels {1, 0} -> ln 2 each.
        assert!((bd.mask_term - ln2).abs() < 1e-12);
        // Vote: member row lands 0.2 off in x -> 0.5 * 0.04 / 3.
        assert!((bd.vote_term - 0.5 * 0.04 / 3.0).abs() < 1e-12);
        // Objectness: zero logits on both heads -> ln 2.
        assert!((bd.objectness_term - ln2).abs() < 1e-12);
        // Box: one positive proposal, 0.5 m center error and 0.5 rad heading
        // error -> 0.125/3 + 0.125.
        assert!((bd.box_term - (0.125 / 3.0 + 0.125)).abs() < 1e-12);
        let total = ln2 + 0.5 * 0.04 / 3.0 + ln2 + 0.125 / 3.0 + 0.125;
        assert!((bd.total - total).abs() < 1e-12);
        assert!(bd.total >= 0.0);
    }

    #[test]
    fn perfect_predictions_zero_vote_and_box_terms() {
        let mut tape: Tape<f64> = Tape::new();
        let mut fwd = handmade_forward(&mut tape);
        let vote_centers = tape.leaf(array![[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let prop_centers = tape.leaf(array![[1.0, 0.0, 0.0], [9.0, 9.0, 9.0]]);
        let prop_theta = tape.leaf(array![[0.4], [2.0]]);
        fwd.frames[0].loc.vote_centers = vote_centers;
        fwd.frames[0].loc.prop_centers = prop_centers;
        fwd.frames[0].loc.prop_theta = prop_theta;
        let (_, bd) = compute_loss(&mut tape, &fwd, &LossWeights::default(), 0.3).unwrap();
        assert_eq!(bd.vote_term, 0.0);
        assert_eq!(bd.box_term, 0.0);
        assert!(bd.total >= 0.0);
    }

    #[test]
    fn loss_weights_scale_the_total() {
        let mut tape: Tape<f64> = Tape::new();
        let fwd = handmade_forward(&mut tape);
        let w = LossWeights {
            mask: 2.0,
            vote: 0.0,
            objectness: 1.0,
            box_term: 0.5,
        };
        let (_, bd) = compute_loss(&mut tape, &fwd, &w, 0.3).unwrap();
        let expect = 2.0 * bd.mask_term + bd.objectness_term + 0.5 * bd.box_term;
        assert!((bd.total - expect).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_halves_twice() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3, 9, &store);
        let mut lrs = Vec::new();
        for _ in 0..9 {
            lrs.push(opt.current_lr());
            opt.apply(&mut ParamStore::new(), &[]);
        }
        assert_eq!(&lrs[0..3], &[1e-3, 1e-3, 1e-3]);
        assert_eq!(&lrs[3..6], &[5e-4, 5e-4, 5e-4]);
        assert_eq!(&lrs[6..9], &[2.5e-4, 2.5e-4, 2.5e-4]);
    }

    #[test]
    fn finite_difference_check_on_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("q", array![[2.0, -1.0]]);
        // loss = sum(x^2); gradient 2x.
        let analytic = vec![array![[4.0, -2.0]]];
        let report = finite_difference_check(
            &mut store,
            &analytic,
            |s| Ok(s.get(id).iter().map(|v| v * v).sum()),
            1e-5,
        )
        .unwrap();
        assert!(report.worst < 1e-8, "worst {}", report.worst);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn finite_difference_check_constant_function() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("c", array![[1.0], [2.0]]);
        let analytic = vec![Array2::zeros((2, 1))];
        let report =
            finite_difference_check(&mut store, &analytic, |_| Ok(7.5), 1e-5).unwrap();
        assert_eq!(report.worst, 0.0);
    }

    fn tiny_model(seed: u64) -> StmdModel<f32> {
        let cfg = TrackerConfig {
            frames: 3,
            points: 32,
            centers: 8,
            knn: 3,
            feat_c: 6,
            feat_cm: 8,
            feat_cp: 8,
            heads: 2,
            k_top: 4,
            seed,
            ..Default::default()
        };
        StmdModel::new(cfg).unwrap()
    }

    fn tiny_samples(n: usize, base_seed: u64) -> Vec<SequenceSample> {
        (0..n)
            .map(|i| {
                let cfg = ScenarioConfig {
                    frames: 3,
                    points_per_frame: 48,
                    seed: base_seed + i as u64,
                    ..Default::default()
                };
                generate_synthetic_sequence(&cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stmd");
        save_checkpoint(&model, 17, &path).unwrap();
        let (back, step) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back.cfg, model.cfg);
        for (id, _, arr) in model.store.iter() {
            assert_eq!(back.store.get(id), arr, "parameter {}", model.store.name(id));
        }
    }

    #[test]
    fn checkpoint_config_mismatch_is_a_version_error() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stmd");
        save_checkpoint(&model, 0, &path).unwrap();
        let mut other = tiny_model(3);
        other.cfg.frames = 4;
        match load_checkpoint_into(&mut other, &path) {
            Err(CoreError::Version(_)) => {}
            Err(other) => panic!("expected version error, got {other}"),
            Ok(_) => panic!("expected version error, got success"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_checksum_error() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stmd");
        save_checkpoint(&model, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(CoreError::Checksum { .. }) => {}
            Err(other) => panic!("expected checksum error, got {other}"),
            Ok(_) => panic!("expected checksum error, got success"),
        }
    }

    #[test]
    fn corrupted_payload_is_a_checksum_error() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stmd");
        save_checkpoint(&model, 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CoreError::Checksum { .. })
        ));
    }

    #[test]
    fn train_smoke_one_epoch_emits_checkpointable_model() {
        let mut model = tiny_model(1);
        let train = tiny_samples(4, 100);
        let eval = tiny_samples(2, 200);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let out = train_loop(&mut model, &tcfg, &train, &eval).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.history.len(), 2);
        assert!(!out.evals.is_empty());
        assert!(out.best_success.is_finite());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, out.steps as u64, &dir.path().join("m.stmd")).unwrap();
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut model = tiny_model(2);
            let train = tiny_samples(4, 300);
            let eval = tiny_samples(1, 400);
            let tcfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..Default::default()
            };
            let out = train_loop(&mut model, &tcfg, &train, &eval).unwrap();
            let losses: Vec<f64> = out.history.iter().map(|h| h.loss).collect();
            let params: Vec<Array2<f32>> =
                model.store.ids().map(|id| model.store.get(id).clone()).collect();
            (losses, params)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }
}
