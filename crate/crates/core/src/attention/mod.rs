//! Multi-head attention: exact softmax attention, the random-feature
//! (Performer) approximation, local per-variable folding, and attention
//! matrix extraction for visualization.
//!
//! Both mechanisms work on *groups*: a `[G*L, d]` matrix is treated as `G`
//! independent sequences of length `L`. Global attention uses one group per
//! sample; local attention uses one group per (sample, variable) block, which
//! is a contiguous slice under the variable-major token layout.

mod full;
mod performer;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::glorot;
use crate::tensor::gemm::{MatMut, MatRef};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Lower bound of the random-feature normalizer so an all-zero feature row
/// cannot divide by zero.
pub const PERFORMER_EPS: f64 = 1e-6;

/// Row/column geometry of a grouped multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub groups: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.heads * self.d_head
    }

    pub(crate) fn q_block<'a, F>(&self, data: &'a [F], g: usize, h: usize) -> MatRef<'a, F> {
        let w = self.width();
        MatRef::strided(data, g * self.lq * w + h * self.d_head, self.lq, self.d_head, w, 1)
    }

    pub(crate) fn k_block<'a, F>(&self, data: &'a [F], g: usize, h: usize) -> MatRef<'a, F> {
        let w = self.width();
        MatRef::strided(data, g * self.lk * w + h * self.d_head, self.lk, self.d_head, w, 1)
    }

    /// Infers the layout of `[G*Lq, w]` queries against `[G*Lk, w]` keys.
    pub fn infer(q_shape: &[usize], k_shape: &[usize], groups: usize, heads: usize) -> Result<Self> {
        if q_shape.len() != 2 || k_shape.len() != 2 || k_shape[1] != q_shape[1] {
            return Err(Error::dims("attention", q_shape, k_shape));
        }
        let (q_rows, k_rows, w) = (q_shape[0], k_shape[0], q_shape[1]);
        if groups == 0 || q_rows % groups != 0 || k_rows % groups != 0 {
            return Err(Error::contract(format!(
                "attention rows ({q_rows} queries, {k_rows} keys) are not divisible into {groups} groups"
            )));
        }
        if heads == 0 || w % heads != 0 {
            return Err(Error::config(format!("width {w} is not divisible by {heads} heads")));
        }
        Ok(Self {
            groups,
            lq: q_rows / groups,
            lk: k_rows / groups,
            heads,
            d_head: w / heads,
        })
    }
}

/// Feature map of the random-feature approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKernel {
    /// Positive random features whose inner products estimate `exp(q.k)`.
    Softmax,
    /// `ReLU(W u)` features; a different, non-softmax attention.
    Relu,
}

impl std::str::FromStr for FeatureKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "relu" => Ok(Self::Relu),
            other => Err(Error::config(format!("unknown performer kernel `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformerConfig {
    /// Random features per head.
    pub features: usize,
    pub kernel: FeatureKernel,
    /// Training steps between feature redraws; 0 never redraws.
    pub redraw_interval: usize,
}

impl Default for PerformerConfig {
    fn default() -> Self {
        Self {
            features: 256,
            kernel: FeatureKernel::Relu,
            redraw_interval: 100,
        }
    }
}

/// Draws a `[m, d]` random projection.
///
/// The softmax kernel uses orthogonal blocks: each block of `d` rows is an
/// orthonormalized Gaussian matrix whose rows are rescaled to the norms of
/// fresh Gaussian vectors. The ReLU kernel uses i.i.d. Gaussian rows.
pub fn sample_features<F: Float>(m: usize, d: usize, kernel: FeatureKernel, rng: &mut impl Rng) -> Tensor<F> {
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let rows: Vec<Vec<f64>> = match kernel {
        FeatureKernel::Relu => (0..m).map(|_| gaussian(d)).collect(),
        FeatureKernel::Softmax => {
            let mut rows = Vec::with_capacity(m);
            while rows.len() < m {
                let mut block: Vec<Vec<f64>> = (0..d).map(|_| gaussian(d)).collect();
                gram_schmidt(&mut block);
                for row in block.into_iter().take(m - rows.len()) {
                    let norm = gaussian(d).iter().map(|x| x * x).sum::<f64>().sqrt();
                    rows.push(row.into_iter().map(|x| x * norm).collect());
                }
            }
            rows
        }
    };
    Tensor::from_fn(&[m, d], |i| F::from_f64(rows[i / d][i % d]))
}

/// Orthonormalizes rows in place (modified Gram-Schmidt).
fn gram_schmidt(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for j in 0..i {
            let (done, rest) = rows.split_at_mut(i);
            let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
            for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                *a -= dot * b;
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|x| *x /= norm);
    }
}

/// How the attention weights are computed.
#[derive(Clone, Debug)]
pub enum Mechanism<F> {
    Exact,
    /// Random-feature approximation with one `[m, d_head]` projection per head.
    Performer {
        features: Vec<Tensor<F>>,
        kernel: FeatureKernel,
    },
}

impl<F: Float> Mechanism<F> {
    pub fn is_exact(&self) -> bool {
        matches!(self, Mechanism::Exact)
    }
}

impl<F: Float> Tape<F> {
    /// Attention core on already projected queries, keys and values, applied
    /// independently to `groups` row blocks. No masking: every query sees
    /// every key of its group.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize, mech: &Mechanism<F>) -> Result<Var> {
        if self.shape(k) != self.shape(v) {
            return Err(Error::dims("attention keys/values", self.shape(k), self.shape(v)));
        }
        let lay = Layout::infer(self.shape(q), self.shape(k), groups, heads)?;
        Ok(match mech {
            Mechanism::Exact => self.grouped_full_attention(q, k, v, lay),
            Mechanism::Performer { features, kernel } => {
                if features.len() != heads || features.iter().any(|f| f.cols() != lay.d_head) {
                    return Err(Error::contract(format!("performer needs {heads} feature matrices with {} columns", lay.d_head)));
                }
                self.grouped_performer_attention(q, k, v, lay, features.clone(), *kernel)
            }
        })
    }
}

/// Projection weights of one attention block.
///
/// `w_q`, `w_k`, `w_v` are `[d, heads * d_head]` (the per-head `[d, d_head]`
/// matrices side by side) and `w_o` is `[heads * d_head, d]`.
#[derive(Clone, Debug)]
pub struct AttentionParams<F> {
    pub heads: usize,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
}

/// [`AttentionParams`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_q: Option<Var>,
    pub b_k: Option<Var>,
    pub b_v: Option<Var>,
    pub b_o: Option<Var>,
}

impl<F: Float> AttentionParams<F> {
    pub fn new(heads: usize, w_q: Tensor<F>, w_k: Tensor<F>, w_v: Tensor<F>, w_o: Tensor<F>) -> Result<Self> {
        let d = w_q.rows();
        let width = w_q.cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("projection width {width} not divisible by {heads} heads")));
        }
        for w in [&w_k, &w_v] {
            if w.shape() != w_q.shape() {
                return Err(Error::dims("attention params", w_q.shape(), w.shape()));
            }
        }
        if w_o.shape() != [width, d] {
            return Err(Error::dims("attention output projection", w_o.shape(), &[width, d]));
        }
        Ok(Self { heads, w_q, w_k, w_v, w_o })
    }

    /// Uniform Glorot-initialized weights with `d_head * heads == d`.
    pub fn random(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        let mut w = || glorot(d, d, rng);
        let (q, k, v, o) = (w(), w(), w(), w());
        Self::new(heads, q, k, v, o)
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols() / self.heads
    }

    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            w_q: tape.leaf(self.w_q.clone(), requires_grad),
            w_k: tape.leaf(self.w_k.clone(), requires_grad),
            w_v: tape.leaf(self.w_v.clone(), requires_grad),
            w_o: tape.leaf(self.w_o.clone(), requires_grad),
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }
}

/// Projected queries, keys and values of one attention call.
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project<F: Float>(tape: &mut Tape<F>, x: Var, z: Var, p: &AttentionVars) -> Result<Projections> {
    Ok(Projections {
        q: tape.linear(x, p.w_q, p.b_q)?,
        k: tape.linear(z, p.w_k, p.b_k)?,
        v: tape.linear(z, p.w_v, p.b_v)?,
    })
}

/// Multi-head attention of `x` (queries) over `z` (keys and values), split
/// into `groups` independent row blocks, followed by the output projection.
pub fn attend<F: Float>(tape: &mut Tape<F>, x: Var, z: Var, p: &AttentionVars, groups: usize, mech: &Mechanism<F>) -> Result<Var> {
    let Projections { q, k, v } = project(tape, x, z, p)?;
    let heads_out = tape.grouped_attention(q, k, v, groups, p.heads, mech)?;
    tape.linear(heads_out, p.w_o, p.b_o)
}

/// `Attention(X, Z) = softmax(Q K^T / sqrt(d_head)) V`, per head, then `W^O`.
pub fn full_attention<F: Float>(tape: &mut Tape<F>, x: Var, z: Var, p: &AttentionVars) -> Result<Var> {
    attend(tape, x, z, p, 1, &Mechanism::Exact)
}

/// Random-feature approximation of [`full_attention`] (exactly a different
/// attention for the ReLU kernel); linear in sequence length.
pub fn performer_attention<F: Float>(tape: &mut Tape<F>, x: Var, z: Var, p: &AttentionVars, features: &[Tensor<F>], kernel: FeatureKernel) -> Result<Var> {
    let mech = Mechanism::Performer {
        features: features.to_vec(),
        kernel,
    };
    attend(tape, x, z, p, 1, &mech)
}

/// Self-attention restricted to each of `blocks` contiguous equal slices of
/// `seq` (one slice per variable under variable-major layout).
pub fn local_attention<F: Float>(tape: &mut Tape<F>, seq: Var, blocks: usize, p: &AttentionVars, mech: &Mechanism<F>) -> Result<Var> {
    let rows = tape.shape(seq)[0];
    if blocks == 0 || rows % blocks != 0 {
        return Err(Error::contract(format!(
            "sequence of {rows} tokens is not divisible into {blocks} variable blocks"
        )));
    }
    attend(tape, seq, seq, p, blocks, mech)
}

/// Materializes the `[Lq, Lk]` attention matrix of one head and group from
/// projected queries and keys (`q: [G*Lq, w]`, `k: [G*Lk, w]`).
///
/// Exact: `softmax(Q K^T / sqrt(d_head))`. Performer: `D^-1 phi(Q) phi(K)^T`
/// with the same normalizer the linear-time path uses, so rows sum to one.
pub fn attention_matrix<F: Float>(q: &Tensor<F>, k: &Tensor<F>, layout: Layout, group: usize, head: usize, mech: &Mechanism<F>) -> Result<Tensor<F>> {
    if group >= layout.groups || head >= layout.heads {
        return Err(Error::contract(format!(
            "group {group} / head {head} out of range ({} groups, {} heads)",
            layout.groups, layout.heads
        )));
    }
    let mut out = Tensor::zeros(&[layout.lq, layout.lk]);
    match mech {
        Mechanism::Exact => full::weights(q.data(), k.data(), &layout, group, head, out.data_mut()),
        Mechanism::Performer { features, kernel } => {
            let wf = &features[head];
            let m = wf.rows();
            let maps = performer::feature_maps(q.data(), k.data(), wf, *kernel, &layout, group, head);
            let mut ksum = vec![F::zero(); m];
            for row in maps.phi_k.chunks(m) {
                for (s, &x) in ksum.iter_mut().zip(row) {
                    *s += x;
                }
            }
            let den = performer::denominators(&maps.phi_q, &ksum, layout.lq, m, F::from_f64(PERFORMER_EPS));
            crate::tensor::gemm::gemm(
                F::one(),
                MatRef::new(&maps.phi_q, layout.lq, m),
                MatRef::new(&maps.phi_k, layout.lk, m).t(),
                F::zero(),
                MatMut::new(out.data_mut(), layout.lq, layout.lk),
            );
            for (row, &d) in out.data_mut().chunks_mut(layout.lk).zip(&den) {
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
    }
    Ok(out)
}

/// Attention matrix of head `head` for `x` attending over `z` with the given
/// projections (visualization scale only).
pub fn extract_attention_matrix<F: Float>(x: &Tensor<F>, z: &Tensor<F>, params: &AttentionParams<F>, head: usize, mech: &Mechanism<F>) -> Result<Tensor<F>> {
    let q = x.matmul(&params.w_q)?;
    let k = z.matmul(&params.w_k)?;
    let layout = Layout::infer(q.shape(), k.shape(), 1, params.heads)?;
    attention_matrix(&q, &k, layout, 0, head, mech)
}
