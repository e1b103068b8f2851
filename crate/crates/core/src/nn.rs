//! Parameter storage and small feed-forward building blocks.
//!
//! All learnable arrays live in one flat [`ParamStore`] so the optimizer,
//! checkpointing, and finite-difference verification can walk every
//! parameter uniformly. Modules keep [`ParamId`] handles and fetch their
//! tape nodes through a per-pass [`BoundParams`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::real::Real;
use crate::tape::{Tape, Var};

/// Stable index of a parameter array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamStore<F: Real> {
    names: Vec<String>,
    arrays: Vec<Array2<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, array: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count across all parameter arrays.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.arrays[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(self.arrays.iter())
            .enumerate()
            .map(|(i, (n, a))| (ParamId(i), n.as_str(), a))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    /// Register every parameter as a tape leaf for one forward/backward pass.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        BoundParams {
            vars: self.arrays.iter().map(|a| tape.leaf(a.clone())).collect(),
        }
    }

    /// Convert all parameters to another scalar type (f32 <-> f64).
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.mapv(|x| G::from_f64(x.to_f64())))
                .collect(),
        }
    }
}

/// Tape vars for every store parameter, parallel to [`ParamStore`] order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Elementwise nonlinearity used throughout the feature pipeline. `None`
/// switches the affected layers to pure linear maps, which the factorization
/// oracle relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    None,
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::None => x,
        }
    }
}

/// Shared affine map `x @ w + b` applied pointwise over rows.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// A bias-free linear map (used where the formulation has no bias term).
    pub fn init_no_bias<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w));
        match self.b {
            Some(b) => tape.add_row(h, bound.var(b)),
            None => h,
        }
    }
}

/// Two-layer pointwise network: `act(x W1 + b1) W2 + b2`.
#[derive(Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
    ) -> Self {
        Mlp2 {
            l1: Linear::init(store, rng, &format!("{name}.l1"), in_dim, hidden),
            l2: Linear::init(store, rng, &format!("{name}.l2"), hidden, out_dim),
            act,
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        let h = self.l1.apply(tape, bound, x);
        let h = self.act.apply(tape, h);
        self.l2.apply(tape, bound, h)
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        let n = tape.norm_rows(x, 1e-5);
        let scaled = tape.mul_row(n, bound.var(self.gain));
        tape.add_row(scaled, bound.var(self.bias))
    }
}

fn xavier<F: Real>(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Array2<F> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_fn((in_dim, out_dim), |_| {
        F::from_f64(rng.gen_range(-bound..bound))
    })
}
