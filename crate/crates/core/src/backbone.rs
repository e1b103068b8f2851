//! Multi-frame spatio-temporal backbone: per-frame set abstraction, KNN
//! graph construction, spatial edge convolution, and a 1-D convolution
//! across the frame axis. Spatial and temporal stages are decoupled; with
//! linear activations and a product-form kernel their composition matches a
//! joint 4-D convolution (see the factorization tests).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::rc::Rc;

use crate::data::{EdgeAggregation, PaddingMode, TrackerConfig};
use crate::error::{CoreError, Result};
use crate::nn::{Activation, BoundParams, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Per-frame embedded features: M center coordinates with one feature row
/// per center.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures<F: Real> {
    pub centers: Array2<F>,
    pub feats: Array2<F>,
    pub t: usize,
}

/// A fixed-length window of per-frame features sharing (M, C).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures<F: Real> {
    pub frames: Vec<FrameFeatures<F>>,
}

impl<F: Real> SequenceFeatures<F> {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(CoreError::Argument("empty sequence".into()));
        };
        let (m, c) = (first.centers.nrows(), first.feats.ncols());
        for f in &self.frames {
            if f.centers.nrows() != m || f.feats.nrows() != m || f.feats.ncols() != c {
                return Err(CoreError::Shape(
                    "sequence frames must share (M, C)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Tape-level frame features: coordinates are constants, features live on
/// the tape.
#[derive(Clone)]
pub struct FrameVars<F: Real> {
    pub centers: Array2<F>,
    pub feats: Var,
    pub t: usize,
}

/// Farthest-point sampling over row coordinates. The start index is
/// `seed % N`; ties break toward the lowest index. When `m > N` the surplus
/// is drawn with replacement from a seeded generator.
pub fn farthest_point_sampling<F: Real>(coords: &Array2<F>, m: usize, seed: u64) -> Vec<usize> {
    let n = coords.nrows();
    assert!(n > 0, "farthest_point_sampling needs at least one point");
    let unique = m.min(n);
    let mut selected = Vec::with_capacity(m);
    let start = (seed % n as u64) as usize;
    selected.push(start);
    let mut min_d2: Vec<F> = (0..n).map(|i| dist2(coords, i, start)).collect();
    while selected.len() < unique {
        let mut best = 0;
        let mut best_d = F::neg_infinity();
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for i in 0..n {
            let d = dist2(coords, i, best);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    if m > n {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for _ in n..m {
            selected.push(rng.gen_range(0..n));
        }
    }
    selected
}

fn dist2<F: Real>(coords: &Array2<F>, a: usize, b: usize) -> F {
    let mut s = F::zero();
    for d in 0..coords.ncols() {
        let diff = coords[(a, d)] - coords[(b, d)];
        s = s + diff * diff;
    }
    s
}

/// K-nearest-neighbor graph over center coordinates, self excluded. Row `i`
/// holds the k nearest indices sorted by ascending distance, ties broken by
/// lower index.
pub fn knn_graph<F: Real>(centers: &Array2<F>, k: usize) -> Result<Array2<usize>> {
    let m = centers.nrows();
    if k == 0 || k >= m {
        return Err(CoreError::Argument(format!(
            "knn k={k} must satisfy 1 <= k <= M-1 (M={m})"
        )));
    }
    let mut out = Array2::zeros((m, k));
    let mut cand: Vec<(F, usize)> = Vec::with_capacity(m - 1);
    for i in 0..m {
        cand.clear();
        for j in 0..m {
            if j != i {
                cand.push((dist2(centers, i, j), j));
            }
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (e, &(_, j)) in cand.iter().take(k).enumerate() {
            out[(i, e)] = j;
        }
    }
    Ok(out)
}

/// For each query row, the k nearest rows of `points` (self included when
/// the query is one of the points). Used for set-abstraction grouping.
fn nearest_points<F: Real>(points: &Array2<F>, queries: &[usize], k: usize) -> Vec<usize> {
    let n = points.nrows();
    assert!(k <= n, "neighborhood size exceeds point count");
    let mut flat = Vec::with_capacity(queries.len() * k);
    let mut cand: Vec<(F, usize)> = Vec::with_capacity(n);
    for &q in queries {
        cand.clear();
        for j in 0..n {
            cand.push((dist2(points, q, j), j));
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        flat.extend(cand.iter().take(k).map(|&(_, j)| j));
    }
    flat
}

fn aggregate<F: Real>(tape: &mut Tape<F>, agg: EdgeAggregation, x: Var, group: usize) -> Var {
    match agg {
        EdgeAggregation::Max => tape.group_max(x, group),
        EdgeAggregation::Sum => tape.group_sum(x, group),
    }
}

/// Set abstraction: farthest-point-sampled centers, each embedded by a
/// shared pointwise network over its k-neighborhood.
#[derive(Clone)]
pub struct SetAbstraction {
    pub net: Linear,
    pub act: Activation,
    pub agg: EdgeAggregation,
    pub k: usize,
    pub in_channels: usize,
}

impl SetAbstraction {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        in_channels: usize,
        out_dim: usize,
        k: usize,
        act: Activation,
        agg: EdgeAggregation,
    ) -> Self {
        SetAbstraction {
            net: Linear::init(store, rng, "backbone.sa", in_channels + 3, out_dim),
            act,
            agg,
            k,
            in_channels,
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        coords: &Array2<F>,
        feats: Var,
        m: usize,
        seed: u64,
        t: usize,
    ) -> (FrameVars<F>, Vec<usize>) {
        let n = coords.nrows();
        let k = self.k.min(n);
        let center_idx = farthest_point_sampling(coords, m, seed);
        let nbr = nearest_points(coords, &center_idx, k);

        let mut centers = Array2::zeros((m, 3));
        let mut delta = Array2::zeros((m * k, 3));
        for (r, &ci) in center_idx.iter().enumerate() {
            for d in 0..3 {
                centers[(r, d)] = coords[(ci, d)];
            }
            for e in 0..k {
                let j = nbr[r * k + e];
                for d in 0..3 {
                    delta[(r * k + e, d)] = coords[(j, d)] - coords[(ci, d)];
                }
            }
        }

        let gathered = tape.gather_rows(feats, Rc::new(nbr));
        let delta_leaf = tape.leaf(delta);
        let edge_in = tape.concat_cols(&[gathered, delta_leaf]);
        let h = self.net.apply(tape, bound, edge_in);
        let h = self.act.apply(tape, h);
        let out = aggregate(tape, self.agg, h, k);
        (
            FrameVars {
                centers,
                feats: out,
                t,
            },
            center_idx,
        )
    }

    /// Plain-array evaluation (runs its own tape).
    pub fn eval<F: Real>(
        &self,
        store: &ParamStore<F>,
        frame: &FrameFeatures<F>,
        m: usize,
        seed: u64,
    ) -> (FrameFeatures<F>, Vec<usize>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let feats = tape.leaf(frame.feats.clone());
        let (fv, idx) = self.forward(&mut tape, &bound, &frame.centers, feats, m, seed, frame.t);
        (
            FrameFeatures {
                centers: fv.centers,
                feats: tape.value(fv.feats).clone(),
                t: frame.t,
            },
            idx,
        )
    }
}

/// Shared per-edge affine map realizing the spatial convolution kernel.
/// Edge features are (feat_i, feat_j - feat_i, coords_j - coords_i).
#[derive(Clone)]
pub struct SpatialKernel {
    pub lin: Linear,
    pub act: Activation,
    pub agg: EdgeAggregation,
}

impl SpatialKernel {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        agg: EdgeAggregation,
    ) -> Self {
        SpatialKernel {
            lin: Linear::init(store, rng, "backbone.edge", 2 * in_dim + 3, out_dim),
            act,
            agg,
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        frame: &FrameVars<F>,
        nbr: &Array2<usize>,
    ) -> FrameVars<F> {
        let (m, k) = nbr.dim();
        assert_eq!(frame.centers.nrows(), m, "graph rows must match centers");
        let mut flat = Vec::with_capacity(m * k);
        let mut rep = Vec::with_capacity(m * k);
        let mut delta = Array2::zeros((m * k, 3));
        for i in 0..m {
            for e in 0..k {
                let j = nbr[(i, e)];
                flat.push(j);
                rep.push(i);
                for d in 0..3 {
                    delta[(i * k + e, d)] = frame.centers[(j, d)] - frame.centers[(i, d)];
                }
            }
        }
        let feats_j = tape.gather_rows(frame.feats, Rc::new(flat));
        let feats_i = tape.gather_rows(frame.feats, Rc::new(rep));
        let diff = tape.sub(feats_j, feats_i);
        let delta_leaf = tape.leaf(delta);
        let edge_in = tape.concat_cols(&[feats_i, diff, delta_leaf]);
        let h = self.lin.apply(tape, bound, edge_in);
        let h = self.act.apply(tape, h);
        let out = aggregate(tape, self.agg, h, k);
        FrameVars {
            centers: frame.centers.clone(),
            feats: out,
            t: frame.t,
        }
    }

    pub fn eval<F: Real>(
        &self,
        store: &ParamStore<F>,
        frame: &FrameFeatures<F>,
        nbr: &Array2<usize>,
    ) -> FrameFeatures<F> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let feats = tape.leaf(frame.feats.clone());
        let fv = FrameVars {
            centers: frame.centers.clone(),
            feats,
            t: frame.t,
        };
        let out = self.forward(&mut tape, &bound, &fv, nbr);
        FrameFeatures {
            centers: out.centers,
            feats: tape.value(out.feats).clone(),
            t: frame.t,
        }
    }
}

/// Pad the frame axis for a temporal convolution of half-width `pad`.
pub fn temporal_pad<F: Real>(
    seq: &SequenceFeatures<F>,
    mode: PaddingMode,
    pad: usize,
) -> SequenceFeatures<F> {
    let mut frames = Vec::new();
    match mode {
        PaddingMode::None => frames.extend(seq.frames.iter().cloned()),
        PaddingMode::Replicate => {
            let first = &seq.frames[0];
            let last = &seq.frames[seq.frames.len() - 1];
            for _ in 0..pad {
                frames.push(first.clone());
            }
            frames.extend(seq.frames.iter().cloned());
            for _ in 0..pad {
                frames.push(last.clone());
            }
        }
        PaddingMode::Zero => {
            let first = &seq.frames[0];
            let last = &seq.frames[seq.frames.len() - 1];
            for _ in 0..pad {
                frames.push(FrameFeatures {
                    centers: first.centers.clone(),
                    feats: Array2::zeros(first.feats.dim()),
                    t: first.t,
                });
            }
            frames.extend(seq.frames.iter().cloned());
            for _ in 0..pad {
                frames.push(FrameFeatures {
                    centers: last.centers.clone(),
                    feats: Array2::zeros(last.feats.dim()),
                    t: last.t,
                });
            }
        }
    }
    SequenceFeatures { frames }
}

fn temporal_pad_vars<F: Real>(
    tape: &mut Tape<F>,
    seq: &[FrameVars<F>],
    mode: PaddingMode,
    pad: usize,
) -> Vec<FrameVars<F>> {
    let mut frames = Vec::new();
    match mode {
        PaddingMode::None => frames.extend(seq.iter().cloned()),
        PaddingMode::Replicate => {
            for _ in 0..pad {
                frames.push(seq[0].clone());
            }
            frames.extend(seq.iter().cloned());
            for _ in 0..pad {
                frames.push(seq[seq.len() - 1].clone());
            }
        }
        PaddingMode::Zero => {
            let dim = tape.value(seq[0].feats).dim();
            for _ in 0..pad {
                let z = tape.leaf(Array2::zeros(dim));
                frames.push(FrameVars {
                    centers: seq[0].centers.clone(),
                    feats: z,
                    t: seq[0].t,
                });
            }
            frames.extend(seq.iter().cloned());
            for _ in 0..pad {
                let z = tape.leaf(Array2::zeros(dim));
                frames.push(FrameVars {
                    centers: seq[seq.len() - 1].centers.clone(),
                    feats: z,
                    t: seq[seq.len() - 1].t,
                });
            }
        }
    }
    frames
}

/// Per-offset linear maps realizing the 1-D temporal convolution
/// `F'_t = sum_k T_k . M'_{t+k}` (no bias).
#[derive(Clone)]
pub struct TemporalKernel {
    pub taps: Vec<ParamId>,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TemporalKernel {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        kernel: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "temporal kernel must be odd");
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt() / kernel as f64;
        let taps = (0..kernel)
            .map(|i| {
                store.add(
                    format!("backbone.temporal.t{i}"),
                    Array2::from_shape_fn((in_dim, out_dim), |_| {
                        F::from_f64(rng.gen_range(-bound..bound))
                    }),
                )
            })
            .collect();
        TemporalKernel {
            taps,
            kernel,
            in_dim,
            out_dim,
        }
    }

    /// Convolve an already padded frame sequence along the frame axis.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        padded: &[FrameVars<F>],
        stride: usize,
    ) -> Result<Vec<FrameVars<F>>> {
        if padded.len() < self.kernel {
            return Err(CoreError::Argument(format!(
                "{} frames cannot support kernel {}",
                padded.len(),
                self.kernel
            )));
        }
        let half = (self.kernel - 1) / 2;
        let out_len = (padded.len() - self.kernel) / stride + 1;
        let mut out = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let base = o * stride;
            let mut acc = None;
            for k in 0..self.kernel {
                let term = tape.matmul(padded[base + k].feats, bound.var(self.taps[k]));
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term),
                });
            }
            let center = &padded[base + half];
            out.push(FrameVars {
                centers: center.centers.clone(),
                feats: acc.expect("kernel >= 1"),
                t: center.t,
            });
        }
        Ok(out)
    }

    /// Center-tap-only projection (temporal mixing disabled).
    pub fn forward_center_only<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        frames: &[FrameVars<F>],
    ) -> Vec<FrameVars<F>> {
        let center = self.taps[(self.kernel - 1) / 2];
        frames
            .iter()
            .map(|f| FrameVars {
                centers: f.centers.clone(),
                feats: tape.matmul(f.feats, bound.var(center)),
                t: f.t,
            })
            .collect()
    }

    /// Plain-array convolution over an already padded sequence.
    pub fn eval<F: Real>(
        &self,
        store: &ParamStore<F>,
        padded: &SequenceFeatures<F>,
        stride: usize,
    ) -> Result<SequenceFeatures<F>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vars: Vec<FrameVars<F>> = padded
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
        let out = self.forward(&mut tape, &bound, &vars, stride)?;
        Ok(SequenceFeatures {
            frames: out
                .iter()
                .map(|f| FrameFeatures {
                    centers: f.centers.clone(),
                    feats: tape.value(f.feats).clone(),
                    t: f.t,
                })
                .collect(),
        })
    }
}

/// The full backbone: per-frame spatial embedding, pointwise encoder, then
/// the temporal convolution.
#[derive(Clone)]
pub struct Backbone {
    pub sa: SetAbstraction,
    pub edge: SpatialKernel,
    pub encoder: Linear,
    pub temporal: TemporalKernel,
    pub act: Activation,
}

impl Backbone {
    /// Sampling seed used by [`Backbone::forward`] for set abstraction.
    /// One seed serves the whole window so identical frames embed onto
    /// identically ordered centers, which the index-aligned temporal
    /// convolution relies on.
    pub fn sa_seed(cfg: &TrackerConfig) -> u64 {
        cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        cfg: &TrackerConfig,
    ) -> Self {
        let sa = SetAbstraction::init(
            store,
            rng,
            cfg.in_channels,
            cfg.feat_c,
            cfg.knn,
            cfg.activation,
            cfg.aggregation,
        );
        let edge = SpatialKernel::init(
            store,
            rng,
            cfg.feat_c,
            cfg.feat_cm,
            cfg.activation,
            cfg.aggregation,
        );
        let encoder = Linear::init(store, rng, "backbone.encoder", cfg.feat_cm, cfg.feat_cm);
        let temporal =
            TemporalKernel::init(store, rng, cfg.temporal_kernel, cfg.feat_cm, cfg.feat_cp);
        Backbone {
            sa,
            edge,
            encoder,
            temporal,
            act: cfg.activation,
        }
    }

    /// Run the window through spatial embedding and temporal convolution.
    /// Input frames are raw (cropped, resampled) point sets; output frames
    /// carry (M, C') features. Also returns the set-abstraction source index
    /// of every center, for label bookkeeping.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        frames: &[FrameFeatures<F>],
        cfg: &TrackerConfig,
    ) -> Result<(Vec<FrameVars<F>>, Vec<Vec<usize>>)> {
        if frames.len() != cfg.frames {
            return Err(CoreError::Argument(format!(
                "backbone expects {} frames, got {}",
                cfg.frames,
                frames.len()
            )));
        }
        let mut spatial = Vec::with_capacity(frames.len());
        let mut sources = Vec::with_capacity(frames.len());
        for f in frames.iter() {
            let feats = tape.leaf(f.feats.clone());
            let seed = Self::sa_seed(cfg);
            let (sa_out, src) =
                self.sa
                    .forward(tape, bound, &f.centers, feats, cfg.centers, seed, f.t);
            let nbr = knn_graph(&sa_out.centers, cfg.knn)?;
            let edge_out = self.edge.forward(tape, bound, &sa_out, &nbr);
            let enc = self.encoder.apply(tape, bound, edge_out.feats);
            let enc = self.act.apply(tape, enc);
            spatial.push(FrameVars {
                centers: edge_out.centers,
                feats: enc,
                t: f.t,
            });
            sources.push(src);
        }
        let out = if cfg.temporal_enabled {
            let padded = temporal_pad_vars(tape, &spatial, cfg.padding, cfg.temporal_pad_width());
            self.temporal
                .forward(tape, bound, &padded, cfg.temporal_stride)?
        } else {
            self.temporal.forward_center_only(tape, bound, &spatial)
        };
        Ok((out, sources))
    }
}
