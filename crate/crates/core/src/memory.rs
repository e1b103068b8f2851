//! Bi-directional cross-frame memory: the propagate (P) and update (U)
//! primitives and the three-branch iteration over a frame window.
//!
//! Propagate cross-attends a query frame against a memory (keys/values from
//! the memory's geometric and mask features, with a learned relative-position
//! bias over coordinate differences). Update predicts per-point mask logits
//! from the propagated features, attending over the previous memory when one
//! exists, and stores mask-gated features alongside the geometric ones.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrameFeatures, FrameVars, SequenceFeatures};
use crate::error::{CoreError, Result};
use crate::nn::{Activation, BoundParams, LayerNorm, Linear, Mlp2, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Index pair naming a memory or transformer feature, e.g. `M(2,0)`.
pub type Origin = (usize, usize);

/// Iterated memory over one frame's centers.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<F: Real> {
    pub coords: Array2<F>,
    pub geo_feats: Array2<F>,
    pub mask_feats: Array2<F>,
    pub mask_scores: Array2<F>,
    pub origin: Origin,
}

impl<F: Real> MemoryState<F> {
    /// Bootstrap a memory from a bare frame (the first frame duplicates
    /// itself to serve as its own memory).
    pub fn from_frame(frame: &FrameFeatures<F>, origin: Origin) -> Self {
        MemoryState {
            coords: frame.centers.clone(),
            geo_feats: frame.feats.clone(),
            mask_feats: frame.feats.clone(),
            mask_scores: Array2::ones((frame.centers.nrows(), 1)),
            origin,
        }
    }
}

/// Propagated (cross-attended) features for one query frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerFeatures<F: Real> {
    pub coords: Array2<F>,
    pub feats: Array2<F>,
    pub origin: Origin,
}

/// Tape-level memory.
#[derive(Clone)]
pub struct MemoryVars<F: Real> {
    pub coords: Array2<F>,
    pub geo: Var,
    pub mask: Var,
    pub scores: Var,
    pub origin: Origin,
}

impl<F: Real> MemoryVars<F> {
    pub fn from_frame(tape: &mut Tape<F>, frame: &FrameVars<F>, origin: Origin) -> Self {
        let ones = tape.leaf(Array2::ones((frame.centers.nrows(), 1)));
        MemoryVars {
            coords: frame.centers.clone(),
            geo: frame.feats,
            mask: frame.feats,
            scores: ones,
            origin,
        }
    }
}

/// Tape-level transformer features.
#[derive(Clone)]
pub struct TransformerVars<F: Real> {
    pub coords: Array2<F>,
    pub feats: Var,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceOp {
    P,
    U,
}

/// One protocol step, serializable as a JSON line
/// `{"op":"P","query":i,"mem":[a,b],"out":"T(i,j)"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub op: TraceOp,
    pub query: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mem: Option<(usize, usize)>,
    pub out: String,
}

/// Ordered record of every propagate and update call in one protocol run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProtocolTrace {
    pub records: Vec<TraceRecord>,
}

impl ProtocolTrace {
    pub fn count(&self, op: TraceOp) -> usize {
        self.records.iter().filter(|r| r.op == op).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| {
                CoreError::Parse {
                    file: "<trace>".into(),
                    line: ln + 1,
                    msg: e.to_string(),
                }
            })?);
        }
        Ok(ProtocolTrace { records })
    }
}

/// Multi-head cross-attention with a relative-position bias predicted from
/// query/key coordinate differences.
#[derive(Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub bias_mlp: Mlp2,
    pub heads: usize,
    pub head_dim: usize,
}

impl CrossAttention {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
    ) -> Self {
        assert!(width % heads == 0, "heads must divide width");
        CrossAttention {
            wq: Linear::init(store, rng, &format!("{name}.wq"), width, width),
            wk: Linear::init(store, rng, &format!("{name}.wk"), kv_width, width),
            wv: Linear::init(store, rng, &format!("{name}.wv"), kv_width, width),
            wo: Linear::init(store, rng, &format!("{name}.wo"), width, width),
            bias_mlp: Mlp2::init(
                store,
                rng,
                &format!("{name}.bias"),
                3,
                8,
                heads,
                Activation::Tanh,
            ),
            heads,
            head_dim: width / heads,
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        q_feats: Var,
        q_coords: &Array2<F>,
        kv_feats: Var,
        k_coords: &Array2<F>,
    ) -> Var {
        let mq = q_coords.nrows();
        let mk = k_coords.nrows();
        let q = self.wq.apply(tape, bound, q_feats);
        let k = self.wk.apply(tape, bound, kv_feats);
        let v = self.wv.apply(tape, bound, kv_feats);

        // Relative-position bias from coordinate differences, one column per
        // head, rows in (query-major, key-minor) order.
        let mut diffs = Array2::zeros((mq * mk, 3));
        for i in 0..mq {
            for j in 0..mk {
                for d in 0..3 {
                    diffs[(i * mk + j, d)] = q_coords[(i, d)] - k_coords[(j, d)];
                }
            }
        }
        let diffs = tape.leaf(diffs);
        let bias = self.bias_mlp.apply(tape, bound, diffs);

        let scale = F::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * self.head_dim, self.head_dim);
            let kh = tape.slice_cols(k, h * self.head_dim, self.head_dim);
            let vh = tape.slice_cols(v, h * self.head_dim, self.head_dim);
            let kht = tape.transpose(kh);
            let logits = tape.matmul(qh, kht);
            let logits = tape.scale(logits, scale);
            let bias_h = tape.slice_cols(bias, h, 1);
            let bias_h = tape.reshape(bias_h, mq, mk);
            let logits = tape.add(logits, bias_h);
            let attn = tape.softmax_rows(logits);
            head_outs.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&head_outs);
        self.wo.apply(tape, bound, cat)
    }
}

/// The propagate primitive (geometric feature propagation stand-in).
/// Pre-norm residual block: inputs to the attention and feed-forward are
/// layer-normalized so the residual stream stays well-scaled across the
/// window iterations.
#[derive(Clone)]
pub struct PropagateNet {
    pub attn: CrossAttention,
    pub ffn: Mlp2,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub ln_ffn: LayerNorm,
}

impl PropagateNet {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        width: usize,
        heads: usize,
    ) -> Self {
        PropagateNet {
            attn: CrossAttention::init(store, rng, "mem.p", width, 2 * width, heads),
            ffn: Mlp2::init(store, rng, "mem.p.ffn", width, width, width, Activation::Tanh),
            ln_q: LayerNorm::init(store, "mem.p.ln_q", width),
            ln_kv: LayerNorm::init(store, "mem.p.ln_kv", 2 * width),
            ln_ffn: LayerNorm::init(store, "mem.p.ln_ffn", width),
        }
    }

    /// Cross-attend `query` against `memory`; output coordinates are the
    /// query coordinates.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        query: &FrameVars<F>,
        memory: &MemoryVars<F>,
        origin: Origin,
    ) -> TransformerVars<F> {
        let kv = tape.concat_cols(&[memory.geo, memory.mask]);
        let kv = self.ln_kv.apply(tape, bound, kv);
        let q_in = self.ln_q.apply(tape, bound, query.feats);
        let attn = self
            .attn
            .forward(tape, bound, q_in, &query.centers, kv, &memory.coords);
        let y = tape.add(query.feats, attn);
        let y_in = self.ln_ffn.apply(tape, bound, y);
        let f = self.ffn.apply(tape, bound, y_in);
        let out = tape.add(y, f);
        TransformerVars {
            coords: query.centers.clone(),
            feats: out,
            origin,
        }
    }

    /// Plain-array evaluation on its own tape.
    pub fn eval<F: Real>(
        &self,
        store: &ParamStore<F>,
        query: &FrameFeatures<F>,
        memory: &MemoryState<F>,
    ) -> Result<TransformerFeatures<F>> {
        if query.feats.ncols() != memory.geo_feats.ncols() {
            return Err(CoreError::Argument(format!(
                "feature width mismatch: query {} vs memory {}",
                query.feats.ncols(),
                memory.geo_feats.ncols()
            )));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let qf = tape.leaf(query.feats.clone());
        let qv = FrameVars {
            centers: query.centers.clone(),
            feats: qf,
            t: query.t,
        };
        let geo = tape.leaf(memory.geo_feats.clone());
        let mask = tape.leaf(memory.mask_feats.clone());
        let scores = tape.leaf(memory.mask_scores.clone());
        let mv = MemoryVars {
            coords: memory.coords.clone(),
            geo,
            mask,
            scores,
            origin: memory.origin,
        };
        let out = self.forward(&mut tape, &bound, &qv, &mv, (query.t, memory.origin.1));
        Ok(TransformerFeatures {
            coords: out.coords,
            feats: tape.value(out.feats).clone(),
            origin: out.origin,
        })
    }
}

/// Output of the mask branch shared by memory updates and the last-frame
/// localization read-out.
pub struct MaskBranch {
    pub gated: Var,
    pub logits: Var,
    pub scores: Var,
}

/// The update primitive (mask feature prediction stand-in).
#[derive(Clone)]
pub struct UpdateNet {
    pub attn: CrossAttention,
    pub ffn: Mlp2,
    pub mask_head: Mlp2,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ln_mask: LayerNorm,
}

impl UpdateNet {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        width: usize,
        heads: usize,
    ) -> Self {
        UpdateNet {
            attn: CrossAttention::init(store, rng, "mem.u", width, 2 * width, heads),
            ffn: Mlp2::init(store, rng, "mem.u.ffn", width, width, width, Activation::Tanh),
            mask_head: Mlp2::init(
                store,
                rng,
                "mem.u.mask",
                width,
                width / 2,
                1,
                Activation::Tanh,
            ),
            ln_q: LayerNorm::init(store, "mem.u.ln_q", width),
            ln_kv: LayerNorm::init(store, "mem.u.ln_kv", 2 * width),
            ln_ffn: LayerNorm::init(store, "mem.u.ln_ffn", width),
            ln_mask: LayerNorm::init(store, "mem.u.ln_mask", width),
        }
    }

    /// Predict mask logits from transformer features, attending over the
    /// previous memory when present; gate the features by the mask scores.
    pub fn mask_branch<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tf: &TransformerVars<F>,
        prev: Option<&MemoryVars<F>>,
    ) -> MaskBranch {
        let mut h = tf.feats;
        if let Some(prev) = prev {
            let kv = tape.concat_cols(&[prev.geo, prev.mask]);
            let kv = self.ln_kv.apply(tape, bound, kv);
            let q_in = self.ln_q.apply(tape, bound, h);
            let attn = self
                .attn
                .forward(tape, bound, q_in, &tf.coords, kv, &prev.coords);
            h = tape.add(h, attn);
            let h_in = self.ln_ffn.apply(tape, bound, h);
            let f = self.ffn.apply(tape, bound, h_in);
            h = tape.add(h, f);
        }
        let mask_in = self.ln_mask.apply(tape, bound, h);
        let logits = self.mask_head.apply(tape, bound, mask_in);
        let scores = tape.sigmoid(logits);
        let width = tape.value(h).ncols();
        let ones = tape.leaf(Array2::ones((1, width)));
        let tiled = tape.matmul(scores, ones);
        let gated = tape.mul_elem(h, tiled);
        MaskBranch {
            gated,
            logits,
            scores,
        }
    }

    /// Write a new memory from the mask branch. `origin` names the result.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tf: &TransformerVars<F>,
        frame: &FrameVars<F>,
        prev: Option<&MemoryVars<F>>,
        origin: Origin,
    ) -> Result<(MemoryVars<F>, MaskBranch)> {
        if tf.coords != frame.centers {
            return Err(CoreError::Argument(
                "update requires transformer features and frame on identical coordinates".into(),
            ));
        }
        let branch = self.mask_branch(tape, bound, tf, prev);
        let mem = MemoryVars {
            coords: frame.centers.clone(),
            geo: tf.feats,
            mask: branch.gated,
            scores: branch.scores,
            origin,
        };
        Ok((
            mem,
            MaskBranch {
                gated: branch.gated,
                logits: branch.logits,
                scores: branch.scores,
            },
        ))
    }

    pub fn eval<F: Real>(
        &self,
        store: &ParamStore<F>,
        tf: &TransformerFeatures<F>,
        frame: &FrameFeatures<F>,
        prev: Option<&MemoryState<F>>,
        origin: Origin,
    ) -> Result<MemoryState<F>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tfv = TransformerVars {
            coords: tf.coords.clone(),
            feats: tape.leaf(tf.feats.clone()),
            origin: tf.origin,
        };
        let fv = FrameVars {
            centers: frame.centers.clone(),
            feats: tape.leaf(frame.feats.clone()),
            t: frame.t,
        };
        let prev_vars = prev.map(|p| {
            let geo = tape.leaf(p.geo_feats.clone());
            let mask = tape.leaf(p.mask_feats.clone());
            let scores = tape.leaf(p.mask_scores.clone());
            MemoryVars {
                coords: p.coords.clone(),
                geo,
                mask,
                scores,
                origin: p.origin,
            }
        });
        let (mem, _) = self.forward(&mut tape, &bound, &tfv, &fv, prev_vars.as_ref(), origin)?;
        Ok(MemoryState {
            coords: mem.coords,
            geo_feats: tape.value(mem.geo).clone(),
            mask_feats: tape.value(mem.mask).clone(),
            mask_scores: tape.value(mem.scores).clone(),
            origin,
        })
    }
}

/// Both memory primitives with their parameters.
#[derive(Clone)]
pub struct MemoryNet {
    pub propagate: PropagateNet,
    pub update: UpdateNet,
}

impl MemoryNet {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        width: usize,
        heads: usize,
    ) -> Self {
        MemoryNet {
            propagate: PropagateNet::init(store, rng, width, heads),
            update: UpdateNet::init(store, rng, width, heads),
        }
    }
}

/// Per-frame localization read-out: geometric features, mask features, and
/// mask scores on the frame's coordinates.
pub struct LocFeatures<F: Real> {
    pub coords: Array2<F>,
    pub geo: Var,
    pub mask_feats: Var,
    pub mask_scores: Var,
    /// Position of the frame inside the protocol window.
    pub index: usize,
}

pub struct ProtocolOutput<F: Real> {
    pub loc: Vec<LocFeatures<F>>,
    pub final_memory: MemoryVars<F>,
    pub trace: ProtocolTrace,
    /// Every mask-logit prediction with its window frame index, for
    /// supervision (one per update plus the last-frame read-out).
    pub mask_evals: Vec<(usize, Var)>,
}

/// Run the bi-directional protocol over a window of per-frame features.
///
/// Frame 0 bootstraps from itself (P then U). Each middle frame i first
/// propagates the future frame i+1 against the incoming memory, updates it
/// to a cross-frame memory, propagates the current frame against that, then
/// updates against the memory that entered the iteration. The last frame
/// only propagates.
pub fn run_bidirectional_protocol<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    net: &MemoryNet,
    seq: &[FrameVars<F>],
) -> Result<ProtocolOutput<F>> {
    let l = seq.len();
    if l < 2 {
        return Err(CoreError::Argument(format!(
            "protocol needs at least 2 frames, got {l}"
        )));
    }
    let mut trace = ProtocolTrace::default();
    let mut loc = Vec::with_capacity(l);
    let mut mask_evals = Vec::new();

    let boot = MemoryVars::from_frame(tape, &seq[0], (0, 0));
    let t00 = net.propagate.forward(tape, bound, &seq[0], &boot, (0, 0));
    trace.records.push(TraceRecord {
        op: TraceOp::P,
        query: 0,
        mem: Some((0, 0)),
        out: "T(0,0)".into(),
    });
    let (m0, branch0) = net
        .update
        .forward(tape, bound, &t00, &seq[0], None, (0, 0))?;
    trace.records.push(TraceRecord {
        op: TraceOp::U,
        query: 0,
        mem: None,
        out: "M(0,0)".into(),
    });
    loc.push(LocFeatures {
        coords: seq[0].centers.clone(),
        geo: t00.feats,
        mask_feats: m0.mask,
        mask_scores: m0.scores,
        index: 0,
    });
    mask_evals.push((0, branch0.logits));
    let mut m_prev = m0;

    for i in 1..=l.saturating_sub(2) {
        let prev_origin = m_prev.origin;
        // Future branch: propagate frame i+1 against the incoming memory,
        // then update it to the cross-frame memory.
        let t_future = net
            .propagate
            .forward(tape, bound, &seq[i + 1], &m_prev, (i + 1, i - 1));
        trace.records.push(TraceRecord {
            op: TraceOp::P,
            query: i + 1,
            mem: Some(prev_origin),
            out: format!("T({},{})", i + 1, i - 1),
        });
        let (m_cross, branch_cross) = net.update.forward(
            tape,
            bound,
            &t_future,
            &seq[i + 1],
            Some(&m_prev),
            (i + 1, i - 1),
        )?;
        trace.records.push(TraceRecord {
            op: TraceOp::U,
            query: i + 1,
            mem: Some(prev_origin),
            out: format!("M({},{})", i + 1, i - 1),
        });
        mask_evals.push((i + 1, branch_cross.logits));

        // Current branch: propagate frame i against the cross-frame memory,
        // then update against the memory that entered this iteration.
        let t_cur = net
            .propagate
            .forward(tape, bound, &seq[i], &m_cross, (i, i));
        trace.records.push(TraceRecord {
            op: TraceOp::P,
            query: i,
            mem: Some(m_cross.origin),
            out: format!("T({i},{i}')"),
        });
        let (m_new, branch_new) =
            net.update
                .forward(tape, bound, &t_cur, &seq[i], Some(&m_prev), (i, i))?;
        trace.records.push(TraceRecord {
            op: TraceOp::U,
            query: i,
            mem: Some(prev_origin),
            out: format!("M({i},{i}')"),
        });
        mask_evals.push((i, branch_new.logits));
        loc.push(LocFeatures {
            coords: seq[i].centers.clone(),
            geo: t_cur.feats,
            mask_feats: m_new.mask,
            mask_scores: m_new.scores,
            index: i,
        });
        m_prev = m_new;
    }

    // Last frame: propagate only; the mask branch is evaluated for the
    // localization read-out but the memory is not updated.
    let last = l - 1;
    let t_last = net
        .propagate
        .forward(tape, bound, &seq[last], &m_prev, (last, last.saturating_sub(1)));
    trace.records.push(TraceRecord {
        op: TraceOp::P,
        query: last,
        mem: Some(m_prev.origin),
        out: format!("T({},{})", last, last - 1),
    });
    let branch = net.update.mask_branch(tape, bound, &t_last, Some(&m_prev));
    loc.push(LocFeatures {
        coords: seq[last].centers.clone(),
        geo: t_last.feats,
        mask_feats: branch.gated,
        mask_scores: branch.scores,
        index: last,
    });
    mask_evals.push((last, branch.logits));

    Ok(ProtocolOutput {
        loc,
        final_memory: m_prev,
        trace,
        mask_evals,
    })
}

/// Forward-only memory chain (bi-directional compensation disabled): each
/// frame propagates against the previous memory and updates it in place.
pub fn run_forward_protocol<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    net: &MemoryNet,
    seq: &[FrameVars<F>],
) -> Result<ProtocolOutput<F>> {
    let l = seq.len();
    if l < 2 {
        return Err(CoreError::Argument(format!(
            "protocol needs at least 2 frames, got {l}"
        )));
    }
    let mut trace = ProtocolTrace::default();
    let mut loc = Vec::with_capacity(l);
    let mut mask_evals = Vec::new();

    let boot = MemoryVars::from_frame(tape, &seq[0], (0, 0));
    let t00 = net.propagate.forward(tape, bound, &seq[0], &boot, (0, 0));
    trace.records.push(TraceRecord {
        op: TraceOp::P,
        query: 0,
        mem: Some((0, 0)),
        out: "T(0,0)".into(),
    });
    let (m0, branch0) = net
        .update
        .forward(tape, bound, &t00, &seq[0], None, (0, 0))?;
    trace.records.push(TraceRecord {
        op: TraceOp::U,
        query: 0,
        mem: None,
        out: "M(0,0)".into(),
    });
    loc.push(LocFeatures {
        coords: seq[0].centers.clone(),
        geo: t00.feats,
        mask_feats: m0.mask,
        mask_scores: m0.scores,
        index: 0,
    });
    mask_evals.push((0, branch0.logits));
    let mut m_prev = m0;

    for i in 1..l {
        let prev_origin = m_prev.origin;
        let t = net
            .propagate
            .forward(tape, bound, &seq[i], &m_prev, (i, i - 1));
        trace.records.push(TraceRecord {
            op: TraceOp::P,
            query: i,
            mem: Some(prev_origin),
            out: format!("T({},{})", i, i - 1),
        });
        if i < l - 1 {
            let (m_new, branch) =
                net.update
                    .forward(tape, bound, &t, &seq[i], Some(&m_prev), (i, i))?;
            trace.records.push(TraceRecord {
                op: TraceOp::U,
                query: i,
                mem: Some(prev_origin),
                out: format!("M({i},{i})"),
            });
            mask_evals.push((i, branch.logits));
            loc.push(LocFeatures {
                coords: seq[i].centers.clone(),
                geo: t.feats,
                mask_feats: m_new.mask,
                mask_scores: m_new.scores,
                index: i,
            });
            m_prev = m_new;
        } else {
            let branch = net.update.mask_branch(tape, bound, &t, Some(&m_prev));
            loc.push(LocFeatures {
                coords: seq[i].centers.clone(),
                geo: t.feats,
                mask_feats: branch.gated,
                mask_scores: branch.scores,
                index: i,
            });
            mask_evals.push((i, branch.logits));
        }
    }

    Ok(ProtocolOutput {
        loc,
        final_memory: m_prev,
        trace,
        mask_evals,
    })
}

impl MemoryNet {
    /// Plain-array protocol run on a fresh tape: localization transformer
    /// features per frame, the final memory, and the call trace.
    pub fn eval_protocol<F: Real>(
        &self,
        store: &ParamStore<F>,
        seq: &SequenceFeatures<F>,
        bidirectional: bool,
    ) -> Result<(Vec<TransformerFeatures<F>>, MemoryState<F>, ProtocolTrace)> {
        seq.validate()?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vars: Vec<FrameVars<F>> = seq
            .frames
            .iter()
            .map(|f| {
                let feats = tape.leaf(f.feats.clone());
                FrameVars {
                    centers: f.centers.clone(),
                    feats,
                    t: f.t,
                }
            })
            .collect();
        let out = if bidirectional {
            run_bidirectional_protocol(&mut tape, &bound, self, &vars)?
        } else {
            run_forward_protocol(&mut tape, &bound, self, &vars)?
        };
        let loc = out
            .loc
            .iter()
            .map(|l| TransformerFeatures {
                coords: l.coords.clone(),
                feats: tape.value(l.geo).clone(),
                origin: (l.index, l.index),
            })
            .collect();
        let fm = MemoryState {
            coords: out.final_memory.coords.clone(),
            geo_feats: tape.value(out.final_memory.geo).clone(),
            mask_feats: tape.value(out.final_memory.mask).clone(),
            mask_scores: tape.value(out.final_memory.scores).clone(),
            origin: out.final_memory.origin,
        };
        Ok((loc, fm, out.trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    const WIDTH: usize = 8;

    fn setup() -> (ParamStore<f64>, MemoryNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let net = MemoryNet::init(&mut store, &mut rng, WIDTH, 2);
        (store, net)
    }

    fn frame(seed: u64, m: usize, t: usize) -> FrameFeatures<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        FrameFeatures {
            centers: Array2::from_shape_fn((m, 3), |_| rng.gen_range(-2.0..2.0)),
            feats: Array2::from_shape_fn((m, WIDTH), |_| rng.gen_range(-1.0..1.0)),
            t,
        }
    }

    #[test]
    fn propagate_preserves_shape_and_coords() {
        let (store, net) = setup();
        let q = frame(1, 5, 2);
        let mem = MemoryState::from_frame(&frame(2, 6, 1), (1, 1));
        let out = net.propagate.eval(&store, &q, &mem).unwrap();
        assert_eq!(out.feats.dim(), (5, WIDTH));
        assert_eq!(out.coords, q.centers);
    }

    #[test]
    fn bootstrap_propagate_is_well_defined() {
        let (store, net) = setup();
        let f0 = frame(3, 4, 0);
        let mem = MemoryState::from_frame(&f0, (0, 0));
        let out = net.propagate.eval(&store, &f0, &mem).unwrap();
        assert!(out.feats.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_with_residual_is_identity() {
        let (mut store, net) = setup();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let q = frame(4, 5, 1);
        let mem = MemoryState::from_frame(&frame(5, 5, 0), (0, 0));
        let out = net.propagate.eval(&store, &q, &mem).unwrap();
        assert_eq!(out.feats, q.feats);
    }

    #[test]
    fn update_first_frame_form() {
        let (store, net) = setup();
        let f0 = frame(6, 4, 0);
        let mem0 = MemoryState::from_frame(&f0, (0, 0));
        let t00 = net.propagate.eval(&store, &f0, &mem0).unwrap();
        let m = net.update.eval(&store, &t00, &f0, None, (0, 0)).unwrap();
        assert_eq!(m.origin, (0, 0));
        assert_eq!(m.coords, f0.centers);
        assert_eq!(m.geo_feats, t00.feats);
        assert!(m
            .mask_scores
            .iter()
            .all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn update_rejects_coordinate_mismatch() {
        let (store, net) = setup();
        let f0 = frame(7, 4, 0);
        let f1 = frame(8, 4, 1);
        let mem0 = MemoryState::from_frame(&f0, (0, 0));
        let t = net.propagate.eval(&store, &f0, &mem0).unwrap();
        assert!(net.update.eval(&store, &t, &f1, None, (0, 0)).is_err());
    }

    fn window(l: usize) -> SequenceFeatures<f64> {
        SequenceFeatures {
            frames: (0..l).map(|t| frame(100 + t as u64, 6, t)).collect(),
        }
    }

    #[test]
    fn protocol_call_counts_follow_2l_minus_2() {
        let (store, net) = setup();
        for l in [2usize, 3, 5, 8] {
            let (loc, _, trace) = net.eval_protocol(&store, &window(l), true).unwrap();
            assert_eq!(loc.len(), l);
            assert_eq!(trace.count(TraceOp::P), 2 * l - 2, "P count at L={l}");
            assert_eq!(trace.count(TraceOp::U), 2 * l - 3, "U count at L={l}");
        }
    }

    #[test]
    fn protocol_consumes_future_before_current() {
        let (store, net) = setup();
        let (_, _, trace) = net.eval_protocol(&store, &window(3), true).unwrap();
        // Records: P0, U0, then the i=1 block must query frame 2 before frame 1.
        assert_eq!(trace.records[2].query, 2);
        assert_eq!(trace.records[2].op, TraceOp::P);
        assert_eq!(trace.records[4].query, 1);
        assert_eq!(trace.records[4].op, TraceOp::P);
        // Eq. (10)'s update consumes the memory that entered the iteration.
        assert_eq!(trace.records[5].mem, Some((0, 0)));
    }

    #[test]
    fn final_memory_coords_match_its_origin_frame() {
        let (store, net) = setup();
        let seq = window(5);
        let (_, fm, _) = net.eval_protocol(&store, &seq, true).unwrap();
        assert_eq!(fm.origin, (3, 3));
        assert_eq!(fm.coords, seq.frames[3].centers);
    }

    #[test]
    fn localization_is_causal_up_to_one_future_frame() {
        let (store, net) = setup();
        let seq = window(6);
        let (base, _, _) = net.eval_protocol(&store, &seq, true).unwrap();
        // Perturb frame j = 4; outputs for frames i with i + 1 < 4 must be
        // bitwise unchanged.
        let mut bumped = seq.clone();
        bumped.frames[4].feats += 0.5;
        let (pert, _, _) = net.eval_protocol(&store, &bumped, true).unwrap();
        for i in 0..3 {
            assert_eq!(base[i].feats, pert[i].feats, "frame {i} leaked the future");
        }
        assert_ne!(base[4].feats, pert[4].feats);
    }

    #[test]
    fn forward_only_protocol_counts() {
        let (store, net) = setup();
        let (loc, _, trace) = net.eval_protocol(&store, &window(5), false).unwrap();
        assert_eq!(loc.len(), 5);
        assert_eq!(trace.count(TraceOp::P), 5);
        assert_eq!(trace.count(TraceOp::U), 4);
    }

    #[test]
    fn trace_serializes_to_expected_jsonl() {
        let (store, net) = setup();
        let (_, _, trace) = net.eval_protocol(&store, &window(2), true).unwrap();
        let text = trace.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"op":"P","query":0,"mem":[0,0],"out":"T(0,0)"}"#);
        assert_eq!(lines[1], r#"{"op":"U","query":0,"out":"M(0,0)"}"#);
        assert_eq!(lines[2], r#"{"op":"P","query":1,"mem":[0,0],"out":"T(1,0)"}"#);
        let parsed = ProtocolTrace::from_jsonl(&text).unwrap();
        assert_eq!(parsed, trace);
    }

    #[test]
    fn protocol_rejects_short_windows() {
        let (store, net) = setup();
        assert!(net.eval_protocol(&store, &window(1), true).is_err());
    }
}
