//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every forward pass records onto a [`Tape`]; `backward` walks the recorded
//! ops in reverse and accumulates gradients. Nodes are pushed in topological
//! order by construction, so a single reverse sweep suffices. All tensors are
//! row-major 2-D; vectors are n×1 columns, scalars 1×1.

use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};

use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// (n×m) plus a (1×m) row broadcast over all rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    /// Max over consecutive row groups of size `group`; `argmax` holds the
    /// winning source row per output element (row-major).
    GroupMax {
        src: Var,
        argmax: Vec<usize>,
    },
    GroupSum {
        src: Var,
        group: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Rows scaled by a constant (non-learnable) per-row weight.
    ScaleRows(Var, Rc<Array1<F>>),
    MulConst(Var, Rc<Array2<F>>),
    AddConst(Var),
    /// Elementwise smooth-L1 (Huber, delta = 1) against a constant target.
    SmoothL1 {
        src: Var,
        target: Rc<Array2<F>>,
    },
    /// Elementwise binary cross-entropy on logits against constant targets.
    BceWithLogits {
        logits: Var,
        target: Rc<Array2<F>>,
    },
    /// Wrap angles to [-pi, pi); derivative is 1 almost everywhere.
    WrapToPi(Var),
    /// Row-wise standardization (x - mean) / sqrt(var + eps).
    NormRows {
        src: Var,
        inv_std: Vec<F>,
    },
    /// (n x m) times a (1 x m) row broadcast over all rows.
    MulRow(Var, Var),
}

struct Node<F: Real> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F: Real> {
    g: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the backward root w.r.t. `v`; `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let v = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(group > 0 && src.nrows() % group == 0, "group_max shape");
        let out_rows = src.nrows() / group;
        let cols = src.ncols();
        let mut v = Array2::zeros((out_rows, cols));
        let mut argmax = vec![0usize; out_rows * cols];
        for i in 0..out_rows {
            for j in 0..cols {
                let mut best = src[(i * group, j)];
                let mut best_r = i * group;
                for r in i * group + 1..(i + 1) * group {
                    if src[(r, j)] > best {
                        best = src[(r, j)];
                        best_r = r;
                    }
                }
                v[(i, j)] = best;
                argmax[i * cols + j] = best_r;
            }
        }
        self.push(v, Op::GroupMax { src: a, argmax })
    }

    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(group > 0 && src.nrows() % group == 0, "group_sum shape");
        let out_rows = src.nrows() / group;
        let mut v = Array2::zeros((out_rows, src.ncols()));
        for i in 0..out_rows {
            for r in i * group..(i + 1) * group {
                let row = src.row(r).to_owned();
                let mut dst = v.row_mut(i);
                dst += &row;
            }
        }
        self.push(v, Op::GroupSum { src: a, group })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let a = self.value(p);
            assert_eq!(a.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(ndarray::s![.., at..at + a.ncols()]).assign(a);
            at += a.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { src: a, start })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut v = src.to_owned();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-major reinterpretation to a new (rows, cols) with the same element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape element count");
        let v = Array2::from_shape_vec((rows, cols), src.iter().cloned().collect())
            .expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let m = src.sum() / F::from_f64(src.len() as f64);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn scale_rows(&mut self, a: Var, weights: Rc<Array1<F>>) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), weights.len(), "scale_rows weight length");
        let mut v = src.to_owned();
        for (mut row, &w) in v.rows_mut().into_iter().zip(weights.iter()) {
            row.mapv_inplace(|x| x * w);
        }
        self.push(v, Op::ScaleRows(a, weights))
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Array2<F>>) -> Var {
        debug_assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) * &*c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: Rc<Array2<F>>) -> Var {
        debug_assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) + &*c;
        self.push(v, Op::AddConst(a))
    }

    pub fn smooth_l1(&mut self, a: Var, target: Rc<Array2<F>>) -> Var {
        debug_assert_eq!(self.value(a).dim(), target.dim());
        let one = F::one();
        let half = F::from_f64(0.5);
        let v = ndarray::Zip::from(self.value(a))
            .and(&*target)
            .map_collect(|&x, &t| {
                let d = x - t;
                if d.abs() < one {
                    half * d * d
                } else {
                    d.abs() - half
                }
            });
        self.push(v, Op::SmoothL1 { src: a, target })
    }

    pub fn bce_with_logits(&mut self, logits: Var, target: Rc<Array2<F>>) -> Var {
        debug_assert_eq!(self.value(logits).dim(), target.dim());
        let zero = F::zero();
        let one = F::one();
        let v = ndarray::Zip::from(self.value(logits))
            .and(&*target)
            .map_collect(|&z, &t| z.max(zero) - z * t + (one + (-z.abs()).exp()).ln());
        self.push(v, Op::BceWithLogits { logits, target })
    }

    pub fn wrap_to_pi(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| wrap_angle(x));
        self.push(v, Op::WrapToPi(a))
    }

    /// Standardize each row to zero mean and unit variance.
    pub fn norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let cols = F::from_f64(src.ncols() as f64);
        let epsf = F::from_f64(eps);
        let mut v = src.to_owned();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).fold(F::zero(), |a, b| a + b) / cols;
            let inv = F::one() / (var + epsf).sqrt();
            inv_std.push(inv);
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::NormRows { src: a, inv_std })
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that influences the root.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut g: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = gi.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&gi);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *b, gi.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *row, dr);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *b, gi.mapv(|x| -x));
                }
                Op::MulElem(a, b) => {
                    let da = &gi * &self.nodes[b.0].value;
                    let db = &gi * &self.nodes[a.0].value;
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, c) => acc(&mut g, *a, gi.mapv(|x| x * *c)),
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&gi)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (F::one() - yv * yv));
                    acc(&mut g, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&gi)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (F::one() - yv));
                    acc(&mut g, *a, da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = ndarray::Zip::from(&gi)
                        .and(x)
                        .map_collect(|&gv, &xv| if xv > F::zero() { gv } else { F::zero() });
                    acc(&mut g, *a, da);
                }
                Op::GatherRows(a, idx) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    for (r, &srcr) in idx.iter().enumerate() {
                        let grow = gi.row(r).to_owned();
                        let mut dst = da.row_mut(srcr);
                        dst += &grow;
                    }
                    acc(&mut g, *a, da);
                }
                Op::GroupMax { src, argmax, .. } => {
                    let mut da = Array2::zeros(self.nodes[src.0].value.dim());
                    let cols = gi.ncols();
                    for r in 0..gi.nrows() {
                        for c in 0..cols {
                            da[(argmax[r * cols + c], c)] += gi[(r, c)];
                        }
                    }
                    acc(&mut g, *src, da);
                }
                Op::GroupSum { src, group } => {
                    let mut da = Array2::zeros(self.nodes[src.0].value.dim());
                    for r in 0..gi.nrows() {
                        for gr in r * group..(r + 1) * group {
                            let grow = gi.row(r).to_owned();
                            let mut dst = da.row_mut(gr);
                            dst += &grow;
                        }
                    }
                    acc(&mut g, *src, da);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = gi.slice(ndarray::s![.., at..at + w]).to_owned();
                        acc(&mut g, p, dp);
                        at += w;
                    }
                }
                Op::SliceCols { src, start } => {
                    let mut da = Array2::zeros(self.nodes[src.0].value.dim());
                    da.slice_mut(ndarray::s![.., *start..*start + gi.ncols()])
                        .assign(&gi);
                    acc(&mut g, *src, da);
                }
                Op::Transpose(a) => acc(&mut g, *a, gi.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(gi.dim());
                    for r in 0..gi.nrows() {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let dot = yr
                            .iter()
                            .zip(gr.iter())
                            .fold(F::zero(), |s, (&yv, &gv)| s + yv * gv);
                        for c in 0..gi.ncols() {
                            da[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let da = Array2::from_shape_vec(dim, gi.iter().cloned().collect())
                        .expect("reshape grad");
                    acc(&mut g, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), gi[(0, 0)]);
                    acc(&mut g, *a, da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    let da = Array2::from_elem(
                        self.nodes[a.0].value.dim(),
                        gi[(0, 0)] / F::from_f64(n as f64),
                    );
                    acc(&mut g, *a, da);
                }
                Op::ScaleRows(a, w) => {
                    let mut da = gi.clone();
                    for (mut row, &wv) in da.rows_mut().into_iter().zip(w.iter()) {
                        row.mapv_inplace(|x| x * wv);
                    }
                    acc(&mut g, *a, da);
                }
                Op::MulConst(a, c) => acc(&mut g, *a, &gi * &**c),
                Op::AddConst(a) => acc(&mut g, *a, gi.clone()),
                Op::SmoothL1 { src, target } => {
                    let x = &self.nodes[src.0].value;
                    let one = F::one();
                    let da = ndarray::Zip::from(&gi)
                        .and(x)
                        .and(&**target)
                        .map_collect(|&gv, &xv, &tv| {
                            let d = xv - tv;
                            gv * d.max(-one).min(one)
                        });
                    acc(&mut g, *src, da);
                }
                Op::BceWithLogits { logits, target } => {
                    let z = &self.nodes[logits.0].value;
                    let one = F::one();
                    let dz = ndarray::Zip::from(&gi)
                        .and(z)
                        .and(&**target)
                        .map_collect(|&gv, &zv, &tv| gv * (one / (one + (-zv).exp()) - tv));
                    acc(&mut g, *logits, dz);
                }
                Op::WrapToPi(a) => acc(&mut g, *a, gi.clone()),
                Op::NormRows { src, inv_std } => {
                    let y = &self.nodes[i].value;
                    let cols = F::from_f64(y.ncols() as f64);
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let g_mean = gr.sum() / cols;
                        let gy_mean = yr
                            .iter()
                            .zip(gr.iter())
                            .fold(F::zero(), |s, (&yv, &gv)| s + yv * gv)
                            / cols;
                        for c in 0..y.ncols() {
                            da[(r, c)] = inv_std[r] * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    acc(&mut g, *src, da);
                }
                Op::MulRow(a, row) => {
                    let da = &gi * &self.nodes[row.0].value;
                    let dr = (&gi * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc(&mut g, *a, da);
                    acc(&mut g, *row, dr);
                }
            }
            g[i] = Some(gi);
        }
        Grads { g }
    }
}

fn acc<F: Real>(g: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
    match &mut g[v.0] {
        Some(a) => *a += &delta,
        slot => *slot = Some(delta),
    }
}

/// Wrap an angle to [-pi, pi).
pub fn wrap_angle<F: Real>(x: F) -> F {
    let two_pi = F::from_f64(2.0 * PI);
    let pi = F::from_f64(PI);
    let mut y = (x + pi) % two_pi;
    if y < F::zero() {
        y = y + two_pi;
    }
    y - pi
}
