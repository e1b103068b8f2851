//! Gaussian-mask localization: distractor down-weighting, Hough voting,
//! objectness-ranked proposal sampling, and final box selection.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use std::rc::Rc;

use crate::data::Box3D;
use crate::error::{CoreError, Result};
use crate::nn::{Activation, BoundParams, LayerNorm, Linear, Mlp2, ParamStore};
use crate::real::Real;
use crate::tape::{wrap_angle, Tape, Var};

/// Per-point weights `exp(-|x - y|^2 / (2 sigma^2))` around the previous
/// center estimate `y`.
pub fn gaussian_mask<F: Real>(points: &Array2<F>, y: [F; 3], sigma: f64) -> Result<Array1<F>> {
    if !(sigma > 0.0) {
        return Err(CoreError::Argument(format!(
            "gaussian mask sigma must be positive, got {sigma}"
        )));
    }
    let denom = F::from_f64(2.0 * sigma * sigma);
    Ok(Array1::from_iter(points.rows().into_iter().map(|row| {
        let mut d2 = F::zero();
        for d in 0..3 {
            let diff = row[d] - y[d];
            d2 = d2 + diff * diff;
        }
        (-d2 / denom).exp()
    })))
}

/// Normalize weights by their maximum so the best-aligned point keeps
/// weight 1 and the mask only suppresses. A zero maximum leaves the input
/// unchanged.
pub fn normalize_mask<F: Real>(weights: &Array1<F>) -> Array1<F> {
    let max = weights.iter().cloned().fold(F::zero(), F::max);
    if max <= F::zero() {
        weights.clone()
    } else {
        weights.mapv(|w| w / max)
    }
}

/// Eqn-style fusion: row-scale the sum of geometric and mask features by
/// the normalized mask weight.
pub fn fuse_features<F: Real>(
    geo: &Array2<F>,
    mask_feats: &Array2<F>,
    weights: &Array1<F>,
) -> Result<Array2<F>> {
    if geo.dim() != mask_feats.dim() || geo.nrows() != weights.len() {
        return Err(CoreError::Shape(format!(
            "fuse_features: geo {:?}, mask {:?}, weights {}",
            geo.dim(),
            mask_feats.dim(),
            weights.len()
        )));
    }
    let mut out = geo + mask_feats;
    for (mut row, &w) in out.rows_mut().into_iter().zip(weights.iter()) {
        row.mapv_inplace(|v| v * w);
    }
    Ok(out)
}

/// Hough votes: predicted centers, objectness in [0, 1], and per-vote
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutput<F: Real> {
    pub centers: Array2<F>,
    pub objectness: Array1<F>,
    pub feats: Array2<F>,
}

/// Candidate target pose with a calibrated score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub center: [f64; 3],
    pub theta: f64,
    pub score: f64,
}

/// Top-K votes selected by normalized objectness (descending score, ties to
/// the lower index).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledVotes<F: Real> {
    pub indices: Vec<usize>,
    pub votes: VoteOutput<F>,
}

pub fn sample_proposals<F: Real>(votes: &VoteOutput<F>, k: usize) -> Result<SampledVotes<F>> {
    let m = votes.centers.nrows();
    if k == 0 || k > m {
        return Err(CoreError::Argument(format!(
            "top-K {k} outside 1..={m}"
        )));
    }
    let max = votes.objectness.iter().cloned().fold(F::zero(), F::max);
    let norm: Vec<F> = if max <= F::zero() {
        votes.objectness.to_vec()
    } else {
        votes.objectness.iter().map(|&s| s / max).collect()
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        norm[b]
            .partial_cmp(&norm[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let indices: Vec<usize> = order.into_iter().take(k).collect();
    let mut centers = Array2::zeros((k, 3));
    let mut objectness = Array1::zeros(k);
    let mut feats = Array2::zeros((k, votes.feats.ncols()));
    for (r, &i) in indices.iter().enumerate() {
        centers.row_mut(r).assign(&votes.centers.row(i));
        objectness[r] = norm[i];
        feats.row_mut(r).assign(&votes.feats.row(i));
    }
    Ok(SampledVotes {
        indices,
        votes: VoteOutput {
            centers,
            objectness,
            feats,
        },
    })
}

/// Box from the argmax-score proposal with the frame-0 target size; with no
/// proposals the previous box is carried forward.
pub fn select_best(proposals: &[Proposal], target_size: [f64; 3], prev_box: &Box3D) -> Box3D {
    let Some(best) = proposals.iter().enumerate().fold(
        None::<(usize, &Proposal)>,
        |acc, (i, p)| match acc {
            Some((_, b)) if b.score >= p.score => acc,
            _ => Some((i, p)),
        },
    ) else {
        return *prev_box;
    };
    Box3D::new(best.1.center, target_size, best.1.theta)
        .expect("target size validated at sequence load")
}

/// Tape-level localization outputs for one frame.
pub struct LocVars {
    pub fused: Var,
    /// All M vote centers (coords + predicted offsets).
    pub vote_centers: Var,
    pub obj_logits: Var,
    pub objectness: Var,
    /// Indices of the K sampled votes, ordered by descending objectness.
    pub top_idx: Vec<usize>,
    /// Refined centers for the sampled votes (K x 3).
    pub prop_centers: Var,
    /// Wrapped headings for the sampled votes (K x 1).
    pub prop_theta: Var,
    pub prop_score_logits: Var,
    pub prop_scores: Var,
}

/// Learnable localization heads.
#[derive(Clone)]
pub struct LocNet {
    pub vote_net: Linear,
    pub offset_head: Linear,
    pub feat_head: Linear,
    pub obj_head: Mlp2,
    pub proposal_head: Mlp2,
    pub ln_in: LayerNorm,
    pub ln_vote: LayerNorm,
    pub act: Activation,
}

impl LocNet {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        width: usize,
        act: Activation,
    ) -> Self {
        let hidden = (width / 2).max(4);
        LocNet {
            vote_net: Linear::init(store, rng, "loc.vote", width + 3, width),
            offset_head: Linear::init(store, rng, "loc.offset", width, 3),
            feat_head: Linear::init(store, rng, "loc.feat", width, width),
            obj_head: Mlp2::init(store, rng, "loc.obj", width, hidden, 1, act),
            proposal_head: Mlp2::init(store, rng, "loc.prop", width, hidden, 5, act),
            ln_in: LayerNorm::init(store, "loc.ln_in", width),
            ln_vote: LayerNorm::init(store, "loc.ln_vote", width),
            act,
        }
    }

    /// Shared pointwise voting over fused features.
    pub fn vote<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        coords: &Array2<F>,
        fused: Var,
    ) -> (Var, Var, Var, Var) {
        // Crop coordinates are centered on the previous estimate, so a
        // point's own position is a localization cue, not a nuisance.
        let normed = self.ln_in.apply(tape, bound, fused);
        let coords_in = tape.leaf(coords.clone());
        let vote_in = tape.concat_cols(&[normed, coords_in]);
        let h = self.vote_net.apply(tape, bound, vote_in);
        let h = self.act.apply(tape, h);
        let offsets = self.offset_head.apply(tape, bound, h);
        let coords_leaf = Rc::new(coords.clone());
        let centers = tape.add_const(offsets, coords_leaf);
        let res = self.feat_head.apply(tape, bound, h);
        let vote_feats = tape.add(normed, res);
        let vote_feats = self.ln_vote.apply(tape, bound, vote_feats);
        let obj_logits = self.obj_head.apply(tape, bound, vote_feats);
        (centers, vote_feats, obj_logits, offsets)
    }

    /// Full localization pass for one frame: fuse, vote, sample by
    /// objectness, refine proposals.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        coords: &Array2<F>,
        geo: Var,
        mask_feats: Var,
        mask_weights: &Array1<F>,
        k_top: usize,
        prev_theta: f64,
    ) -> Result<LocVars> {
        let m = coords.nrows();
        if k_top == 0 || k_top > m {
            return Err(CoreError::Argument(format!("top-K {k_top} outside 1..={m}")));
        }
        let summed = tape.add(geo, mask_feats);
        let fused = tape.scale_rows(summed, Rc::new(mask_weights.clone()));

        let (vote_centers, vote_feats, obj_logits, _) = self.vote(tape, bound, coords, fused);
        let objectness = tape.sigmoid(obj_logits);

        // Rank by objectness (descending, ties to the lower index).
        let obj_vals = tape.value(objectness);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            obj_vals[(b, 0)]
                .partial_cmp(&obj_vals[(a, 0)])
                .unwrap()
                .then(a.cmp(&b))
        });
        let top_idx: Vec<usize> = order.into_iter().take(k_top).collect();

        let sel_feats = tape.gather_rows(vote_feats, Rc::new(top_idx.clone()));
        let sel_centers = tape.gather_rows(vote_centers, Rc::new(top_idx.clone()));
        let refined = self.proposal_head.apply(tape, bound, sel_feats);
        let d_center = tape.slice_cols(refined, 0, 3);
        let d_theta = tape.slice_cols(refined, 3, 1);
        let score_logits = tape.slice_cols(refined, 4, 1);

        let prop_centers = tape.add(sel_centers, d_center);
        let prev = Rc::new(Array2::from_elem((k_top, 1), F::from_f64(prev_theta)));
        let theta_raw = tape.add_const(d_theta, prev);
        let prop_theta = tape.wrap_to_pi(theta_raw);
        let prop_scores = tape.sigmoid(score_logits);

        Ok(LocVars {
            fused,
            vote_centers,
            obj_logits,
            objectness,
            top_idx,
            prop_centers,
            prop_theta,
            prop_score_logits: score_logits,
            prop_scores,
        })
    }

    /// Plain evaluation of the voting stage.
    pub fn eval_votes<F: Real>(
        &self,
        store: &ParamStore<F>,
        coords: &Array2<F>,
        fused: &Array2<F>,
    ) -> Result<VoteOutput<F>> {
        if coords.nrows() != fused.nrows() {
            return Err(CoreError::Shape("coords/features row mismatch".into()));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(fused.clone());
        let (centers, vote_feats, obj_logits, _) = self.vote(&mut tape, &bound, coords, f);
        let obj = tape.sigmoid(obj_logits);
        Ok(VoteOutput {
            centers: tape.value(centers).clone(),
            objectness: Array1::from_iter(tape.value(obj).iter().cloned()),
            feats: tape.value(vote_feats).clone(),
        })
    }

    /// Plain evaluation of the proposal refinement over sampled votes.
    pub fn eval_proposals<F: Real>(
        &self,
        store: &ParamStore<F>,
        sampled: &SampledVotes<F>,
        prev_theta: f64,
    ) -> Result<Vec<Proposal>> {
        let k = sampled.votes.centers.nrows();
        if k == 0 {
            return Err(CoreError::Argument("no sampled votes to refine".into()));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let feats = tape.leaf(sampled.votes.feats.clone());
        let refined = self.proposal_head.apply(&mut tape, &bound, feats);
        let vals = tape.value(refined);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let center = [
                sampled.votes.centers[(i, 0)].to_f64() + vals[(i, 0)].to_f64(),
                sampled.votes.centers[(i, 1)].to_f64() + vals[(i, 1)].to_f64(),
                sampled.votes.centers[(i, 2)].to_f64() + vals[(i, 2)].to_f64(),
            ];
            let theta = wrap_angle(prev_theta + vals[(i, 3)].to_f64());
            let score = 1.0 / (1.0 + (-vals[(i, 4)].to_f64()).exp());
            out.push(Proposal {
                center,
                theta,
                score,
            });
        }
        Ok(out)
    }
}
