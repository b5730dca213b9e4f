//! Parameter storage and the small layers the forecaster is assembled from.
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! binds the store onto a fresh tape as leaves and runs layers through a
//! [`Ctx`], which maps [`ParamId`]s to those leaves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Float, NormMode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }
}

/// Forward-pass state shared by all layers.
pub struct Ctx<'a, F> {
    pub tape: &'a mut Tape<F>,
    params: &'a [Var],
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, params: &'a [Var], train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self { tape, params, train, rng }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Inverted dropout in training, identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.train && p > 0.0 {
            self.tape.dropout(x, p, self.rng)
        } else {
            x
        }
    }
}

/// Consumers of randomness; each gets an independent stream of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Features = 3,
    Shuffle = 4,
    Probe = 5,
    Redraw = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Uniform Glorot `[fan_in, fan_out]`.
pub fn glorot<F: Float>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| F::from_f64(rng.random_range(-limit..limit)))
}

/// `N(0, 1) / sqrt(d)` entries of a `[rows, d]` lookup table.
pub fn embedding_table<F: Float>(rows: usize, d: usize, rng: &mut impl Rng) -> Tensor<F> {
    let scale = 1.0 / (d as f64).sqrt();
    Tensor::from_fn(&[rows, d], |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z * scale)
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), self.b.map(|b| ctx.p(b)));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Batch,
    Layer,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "layer" => Ok(Self::Layer),
            other => Err(Error::config(format!("unknown norm `{other}` (expected batch or layer)"))),
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Learnable scale/shift normalization; batch norm carries running stats.
#[derive(Clone, Debug)]
pub struct Norm<F> {
    pub name: String,
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BatchNormStats<F>,
}

impl<F: Float> Norm<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, kind: NormKind, d: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            stats: BatchNormStats::new(d),
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match self.kind {
            NormKind::Layer => ctx.tape.layer_norm(x, g, b, LN_EPS),
            NormKind::Batch => {
                let mode = if ctx.train { NormMode::Train } else { NormMode::Eval };
                ctx.tape.batch_norm(x, g, b, &mut self.stats, mode)
            }
        }
    }
}

/// Position-wise `d -> ff -> d` with ReLU; dropout after the activation and
/// after the output projection.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), ff, d, true, rng),
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h, dropout);
        let y = self.down.forward(ctx, h)?;
        Ok(ctx.dropout(y, dropout))
    }
}
