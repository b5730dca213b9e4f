//! The encoder-decoder forecaster.
//!
//! Embedding, optional halving convolutions, then Pre-Norm residual layers:
//! the encoder runs local self, global self and feed-forward sublayers; the
//! decoder adds local and global cross-attention over the encoder memory.
//! A position-wise head maps each decoder token to a Normal mean and scale.
//! "Local" attention stays within one variable's block of a sample;
//! "global" attention spans all tokens of a sample.

mod config;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, AttentionKind, Dropout, Mode, ModelConfig, FULL_ATTENTION_MAX_LEN};

use crate::attention::{self, sample_features, AttentionVars, Layout, Mechanism};
use crate::checkpoint::Container;
use crate::dataflow::{SplitSpec, Standardizer, WindowSample};
use crate::embedding::{flatten, Embedding, Role, TokenBatch};
use crate::error::{Error, Result};
use crate::nn::{glorot, stream, Ctx, FeedForward, Linear, Norm, ParamId, ParamStore, Stream};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Lower bound added to the predicted standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

/// Multi-head attention sublayer with its Pre-Norm.
#[derive(Clone, Debug)]
pub struct AttnLayer<F> {
    pub name: String,
    norm: Norm<F>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    /// One `[m, d_head]` projection per head; empty for exact attention.
    features: Vec<Tensor<F>>,
    record: bool,
    recorded: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Float> AttnLayer<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng, feature_rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let features = match cfg.attention {
            AttentionKind::Full => Vec::new(),
            AttentionKind::Performer => (0..cfg.heads)
                .map(|_| sample_features(cfg.performer.features, cfg.d_head(), cfg.performer.kernel, feature_rng))
                .collect(),
        };
        Self {
            name: name.to_string(),
            norm: Norm::new(store, &format!("{name}.norm"), cfg.norm, d),
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            features,
            record: false,
            recorded: None,
        }
    }

    fn mechanism(&self, cfg: &ModelConfig) -> Mechanism<F> {
        match cfg.attention {
            AttentionKind::Full => Mechanism::Exact,
            AttentionKind::Performer => Mechanism::Performer {
                features: self.features.clone(),
                kernel: cfg.performer.kernel,
            },
        }
    }

    fn redraw(&mut self, cfg: &ModelConfig, rng: &mut impl Rng) {
        for f in self.features.iter_mut() {
            *f = sample_features(cfg.performer.features, cfg.d_head(), cfg.performer.kernel, rng);
        }
    }

    /// `x + Dropout(Attention(Norm(x), memory or Norm(x)))` over `groups`
    /// independent row blocks.
    fn forward(&mut self, ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, x: Var, memory: Option<Var>, groups: usize, global: bool) -> Result<Var> {
        let xn = self.norm.forward(ctx, x)?;
        let z = memory.unwrap_or(xn);
        let key_len = ctx.tape.shape(z)[0] / groups.max(1);
        if global && cfg.attention == AttentionKind::Full && key_len > FULL_ATTENTION_MAX_LEN {
            return Err(Error::config(format!(
                "exact attention over {key_len} tokens exceeds {FULL_ATTENTION_MAX_LEN}; use performer attention"
            )));
        }
        let vars = AttentionVars {
            heads: cfg.heads,
            w_q: ctx.p(self.q.w),
            w_k: ctx.p(self.k.w),
            w_v: ctx.p(self.v.w),
            w_o: ctx.p(self.o.w),
            b_q: self.q.b.map(|b| ctx.p(b)),
            b_k: self.k.b.map(|b| ctx.p(b)),
            b_v: self.v.b.map(|b| ctx.p(b)),
            b_o: self.o.b.map(|b| ctx.p(b)),
        };
        let proj = attention::project(ctx.tape, xn, z, &vars)?;
        if self.record {
            self.recorded = Some((ctx.tape.value(proj.q).clone(), ctx.tape.value(proj.k).clone()));
        }
        let q = ctx.dropout(proj.q, cfg.dropout.qkv);
        let k = ctx.dropout(proj.k, cfg.dropout.qkv);
        let v = ctx.dropout(proj.v, cfg.dropout.qkv);
        let heads = ctx.tape.grouped_attention(q, k, v, groups, cfg.heads, &self.mechanism(cfg))?;
        let out = ctx.tape.linear(heads, vars.w_o, vars.b_o)?;
        let out = ctx.dropout(out, cfg.dropout.attn_out);
        ctx.tape.add(x, out)
    }
}

/// Pre-Norm feed-forward sublayer.
#[derive(Clone, Debug)]
struct FfLayer<F> {
    norm: Norm<F>,
    ff: FeedForward,
}

impl<F: Float> FfLayer<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), cfg.norm, cfg.d_model),
            ff: FeedForward::new(store, name, cfg.d_model, cfg.ff_dim, rng),
        }
    }

    fn forward(&mut self, ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, x: Var) -> Result<Var> {
        let xn = self.norm.forward(ctx, x)?;
        let y = self.ff.forward(ctx, xn, cfg.dropout.ff)?;
        ctx.tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer<F> {
    local: Option<AttnLayer<F>>,
    global: Option<AttnLayer<F>>,
    ff: FfLayer<F>,
}

#[derive(Clone, Debug)]
struct DecoderLayer<F> {
    local_self: Option<AttnLayer<F>>,
    global_self: Option<AttnLayer<F>>,
    local_cross: Option<AttnLayer<F>>,
    global_cross: Option<AttnLayer<F>>,
    ff: FfLayer<F>,
}

/// Width-3, stride-2, padding-1 convolution with bias and ReLU that halves
/// each segment.
#[derive(Clone, Copy, Debug)]
struct HalvingConv {
    kernel: ParamId,
    bias: ParamId,
}

impl HalvingConv {
    fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let k = glorot::<F>(3 * d, d, rng).reshape(&[3, d, d]).expect("conv kernel shape");
        Self {
            kernel: store.add(format!("{name}.kernel"), k),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var, segments: usize) -> Result<Var> {
        let y = ctx.tape.segmented_conv1d(x, ctx.p(self.kernel), segments, 2, 1)?;
        let y = ctx.tape.add_row(y, ctx.p(self.bias))?;
        Ok(ctx.tape.relu(y))
    }
}

/// Encoder and decoder inputs of a batch plus the standardized targets.
#[derive(Clone, Debug)]
pub struct ModelBatch {
    pub enc: TokenBatch,
    pub dec: TokenBatch,
    pub batch: usize,
    pub start: usize,
    pub horizon: usize,
    pub vars: usize,
    /// Row-major `[batch * horizon, vars]`.
    pub target: Vec<f64>,
    pub target_mask: Vec<bool>,
    /// Row-major `[batch * (start + horizon), vars]`: the start-token rows
    /// copied from the context followed by the horizon rows.
    pub seq_target: Vec<f64>,
    pub seq_mask: Vec<bool>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `[batch * horizon, N]`, start-token steps excluded.
    pub mean: Var,
    pub std: Var,
    /// `[batch * (start + horizon), N]`, start-token steps included.
    pub seq_mean: Var,
    pub seq_std: Var,
    /// Encoder output tokens `[batch * blocks * enc_steps, d]`.
    pub encoded: Var,
    pub enc_steps: usize,
}

/// Per-step, per-variable Normal parameters over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub horizon: usize,
    pub vars: usize,
    /// Row-major `[horizon, vars]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ForecastOutput {
    /// Maps standardized outputs back to data units.
    pub fn destandardize(&self, s: &Standardizer) -> Self {
        let mut mean = self.mean.clone();
        s.invert(&mut mean);
        let std = self.std.iter().enumerate().map(|(i, &x)| x * s.std[i % self.vars]).collect();
        Self { mean, std, ..self.clone() }
    }
}

/// Attention sublayer selector for matrix extraction. Self-attention
/// refers to encoder layers, cross-attention to decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    GlobalSelf,
    LocalSelf,
    GlobalCross,
    LocalCross,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-self" => Ok(Self::GlobalSelf),
            "local-self" => Ok(Self::LocalSelf),
            "global-cross" => Ok(Self::GlobalCross),
            "local-cross" => Ok(Self::LocalCross),
            other => Err(Error::config(format!(
                "unknown attention `{other}` (expected global-self, local-self, global-cross or local-cross)"
            ))),
        }
    }
}

/// Drops the first `start` of every `start + horizon` rows.
pub fn discard_start<F: Float>(tape: &mut Tape<F>, x: Var, batch: usize, start: usize, horizon: usize) -> Result<Var> {
    let l = start + horizon;
    let index: Vec<usize> = (0..batch).flat_map(|b| (start..l).map(move |t| b * l + t)).collect();
    tape.gather_rows(x, &index)
}

pub const CHECKPOINT_SECTION: &str = "forecaster";

/// Metadata stored next to the weights so inference is self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub context_len: usize,
    pub horizon: usize,
    pub max_train_year: i32,
    pub standardizer: Standardizer,
    /// Split the model was trained under; evaluation reuses its test region.
    #[serde(default)]
    pub split: SplitSpec,
}

#[derive(Clone, Debug)]
pub struct Forecaster<F> {
    pub config: ModelConfig,
    pub vars: usize,
    pub store: ParamStore<F>,
    embedding: Embedding,
    initial_convs: Vec<HalvingConv>,
    intermediate_convs: Vec<HalvingConv>,
    encoder: Vec<EncoderLayer<F>>,
    decoder: Vec<DecoderLayer<F>>,
    enc_norm: Norm<F>,
    dec_norm: Norm<F>,
    head: Linear,
}

impl<F: Float> Forecaster<F> {
    /// Builds a model for `vars` series. Weights come from the `Init`
    /// stream of `seed`, random features from the `Features` stream.
    pub fn build(config: ModelConfig, vars: usize, seed: u64) -> Result<Self> {
        let cfg = config.validated()?;
        if vars == 0 {
            return Err(Error::config("a model needs at least one variable"));
        }
        let mut rng = stream(seed, Stream::Init);
        let mut frng = stream(seed, Stream::Features);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let temporal = cfg.mode == Mode::Temporal;
        let (value_width, table) = if temporal { (vars, None) } else { (1, Some(vars)) };
        let embedding = Embedding::new(&mut store, d, cfg.time_emb_dim, value_width, table, &mut rng);
        let initial_convs = (0..cfg.initial_convs)
            .map(|i| HalvingConv::new(&mut store, &format!("conv.initial{i}"), d, &mut rng))
            .collect();
        let intermediate_convs = (0..cfg.intermediate_convs)
            .map(|i| HalvingConv::new(&mut store, &format!("conv.intermediate{i}"), d, &mut rng))
            .collect();
        let (local, global) = (cfg.local_enabled(), cfg.global_enabled());
        let attn = |store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, frng: &mut ChaCha8Rng, on: bool, name: String| {
            on.then(|| AttnLayer::new(store, &name, &cfg, rng, frng))
        };
        let mut encoder = Vec::new();
        for i in 0..cfg.enc_layers {
            let local = attn(&mut store, &mut rng, &mut frng, local, format!("enc{i}.local"));
            let global = attn(&mut store, &mut rng, &mut frng, global, format!("enc{i}.global"));
            encoder.push(EncoderLayer {
                local,
                global,
                ff: FfLayer::new(&mut store, &format!("enc{i}.ff"), &cfg, &mut rng),
            });
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.dec_layers {
            let local_self = attn(&mut store, &mut rng, &mut frng, local, format!("dec{i}.local_self"));
            let global_self = attn(&mut store, &mut rng, &mut frng, global, format!("dec{i}.global_self"));
            let local_cross = attn(&mut store, &mut rng, &mut frng, local, format!("dec{i}.local_cross"));
            let global_cross = attn(&mut store, &mut rng, &mut frng, global, format!("dec{i}.global_cross"));
            decoder.push(DecoderLayer {
                local_self,
                global_self,
                local_cross,
                global_cross,
                ff: FfLayer::new(&mut store, &format!("dec{i}.ff"), &cfg, &mut rng),
            });
        }
        let enc_norm = Norm::new(&mut store, "enc.norm", cfg.norm, d);
        let dec_norm = Norm::new(&mut store, "dec.norm", cfg.norm, d);
        let out_width = if temporal { 2 * vars } else { 2 };
        let head = Linear::new(&mut store, "head", d, out_width, true, &mut rng);
        Ok(Self {
            config: cfg,
            vars,
            store,
            embedding,
            initial_convs,
            intermediate_convs,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn attn_layers_mut(&mut self) -> Vec<&mut AttnLayer<F>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut() {
            out.extend(l.local.as_mut());
            out.extend(l.global.as_mut());
        }
        for l in self.decoder.iter_mut() {
            out.extend(l.local_self.as_mut());
            out.extend(l.global_self.as_mut());
            out.extend(l.local_cross.as_mut());
            out.extend(l.global_cross.as_mut());
        }
        out
    }

    fn norms_mut(&mut self) -> Vec<&mut Norm<F>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut() {
            out.extend(l.local.as_mut().map(|a| &mut a.norm));
            out.extend(l.global.as_mut().map(|a| &mut a.norm));
            out.push(&mut l.ff.norm);
        }
        for l in self.decoder.iter_mut() {
            for a in [&mut l.local_self, &mut l.global_self, &mut l.local_cross, &mut l.global_cross] {
                out.extend(a.as_mut().map(|a| &mut a.norm));
            }
            out.push(&mut l.ff.norm);
        }
        out.push(&mut self.enc_norm);
        out.push(&mut self.dec_norm);
        out
    }

    /// Resamples every performer feature matrix.
    pub fn redraw_features(&mut self, rng: &mut impl Rng) {
        let cfg = self.config.clone();
        for layer in self.attn_layers_mut() {
            layer.redraw(&cfg, rng);
        }
    }

    /// Encoder/decoder token batches for standardized windows.
    pub fn make_batch(&self, samples: &[&WindowSample], max_train_year: i32) -> Result<ModelBatch> {
        let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
        if let Some(bad) = samples.iter().find(|w| w.vars != self.vars) {
            return Err(Error::config(format!("model has {} variables, window has {}", self.vars, bad.vars)));
        }
        let s = self.config.start_token_len;
        let (enc, dec) = match self.config.mode {
            Mode::Spatiotemporal => {
                let mut enc = Vec::with_capacity(samples.len());
                let mut dec = Vec::with_capacity(samples.len());
                for w in samples {
                    enc.push(flatten(w, s, Role::Encoder, max_train_year)?);
                    dec.push(flatten(w, s, Role::Decoder, max_train_year)?);
                }
                (TokenBatch::spatiotemporal(&enc)?, TokenBatch::spatiotemporal(&dec)?)
            }
            Mode::Temporal => (
                TokenBatch::temporal(samples, s, Role::Encoder, max_train_year)?,
                TokenBatch::temporal(samples, s, Role::Decoder, max_train_year)?,
            ),
        };
        Ok(ModelBatch {
            enc,
            dec,
            batch: samples.len(),
            start: s,
            horizon: first.horizon(),
            vars: self.vars,
            target: samples.iter().flat_map(|w| w.target.iter().copied()).collect(),
            target_mask: samples.iter().flat_map(|w| w.target_mask.iter().copied()).collect(),
            seq_target: samples
                .iter()
                .flat_map(|w| [&w.context[(w.context_len() - s) * w.vars..], &w.target[..]].concat())
                .collect(),
            seq_mask: samples
                .iter()
                .flat_map(|w| [&w.context_mask[(w.context_len() - s) * w.vars..], &w.target_mask[..]].concat())
                .collect(),
        })
    }

    /// Encoder output and its per-block length.
    pub fn encode(&mut self, ctx: &mut Ctx<'_, F>, enc: &TokenBatch) -> Result<(Var, usize)> {
        let cfg = self.config.clone();
        let emb_ablation = cfg.ablation.embedding();
        let blocks = enc.batch * enc.blocks;
        let mut steps = enc.steps;
        let mut x = self.embedding.value_time(ctx, enc, emb_ablation)?;
        for conv in &self.initial_convs {
            x = conv.forward(ctx, x, blocks)?;
            steps /= 2;
        }
        // Variable rows at the (possibly halved) per-block length.
        let var: Vec<usize> = (0..blocks).flat_map(|b| std::iter::repeat_n(b % enc.blocks, steps)).collect();
        if let Some(v) = self.embedding.variable(ctx, &var, emb_ablation)? {
            x = ctx.tape.add(x, v)?;
        }
        x = ctx.dropout(x, cfg.dropout.emb);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            if let Some(a) = layer.local.as_mut() {
                x = a.forward(ctx, &cfg, x, None, blocks, false)?;
            }
            if let Some(a) = layer.global.as_mut() {
                x = a.forward(ctx, &cfg, x, None, enc.batch, true)?;
            }
            x = layer.ff.forward(ctx, &cfg, x)?;
            if let Some(conv) = self.intermediate_convs.get(i) {
                x = conv.forward(ctx, x, blocks)?;
                steps /= 2;
            }
        }
        Ok((self.enc_norm.forward(ctx, x)?, steps))
    }

    /// Decoder output tokens `[batch * blocks * (s + h), d]`.
    pub fn decode(&mut self, ctx: &mut Ctx<'_, F>, dec: &TokenBatch, memory: Var) -> Result<Var> {
        let cfg = self.config.clone();
        let blocks = dec.batch * dec.blocks;
        let mut y = self.embedding.forward(ctx, dec, cfg.ablation.embedding())?;
        y = ctx.dropout(y, cfg.dropout.emb);
        for layer in self.decoder.iter_mut() {
            if let Some(a) = layer.local_self.as_mut() {
                y = a.forward(ctx, &cfg, y, None, blocks, false)?;
            }
            if let Some(a) = layer.global_self.as_mut() {
                y = a.forward(ctx, &cfg, y, None, dec.batch, true)?;
            }
            if let Some(a) = layer.local_cross.as_mut() {
                y = a.forward(ctx, &cfg, y, Some(memory), blocks, false)?;
            }
            if let Some(a) = layer.global_cross.as_mut() {
                y = a.forward(ctx, &cfg, y, Some(memory), dec.batch, true)?;
            }
            y = layer.ff.forward(ctx, &cfg, y)?;
        }
        self.dec_norm.forward(ctx, y)
    }

    /// Full forward pass: Normal parameters over the horizon.
    pub fn forward(&mut self, ctx: &mut Ctx<'_, F>, batch: &ModelBatch) -> Result<ForwardOut> {
        let (memory, enc_steps) = self.encode(ctx, &batch.enc)?;
        let decoded = self.decode(ctx, &batch.dec, memory)?;
        let out = self.head.forward(ctx, decoded)?;
        let (b, h, n) = (batch.batch, batch.horizon, self.vars);
        let l = self.config.start_token_len + h;
        let (mean, rho) = match self.config.mode {
            Mode::Spatiotemporal => {
                // Fold variable-major tokens back to (sample, step, variable).
                let index: Vec<usize> = (0..b)
                    .flat_map(|bi| (0..l).flat_map(move |t| (0..n).map(move |v| bi * n * l + v * l + t)))
                    .collect();
                let folded = ctx.tape.gather_rows(out, &index)?;
                let mean = ctx.tape.slice_cols(folded, 0, 1)?;
                let rho = ctx.tape.slice_cols(folded, 1, 2)?;
                (ctx.tape.reshape(mean, &[b * l, n])?, ctx.tape.reshape(rho, &[b * l, n])?)
            }
            Mode::Temporal => (ctx.tape.slice_cols(out, 0, n)?, ctx.tape.slice_cols(out, n, 2 * n)?),
        };
        let std = ctx.tape.softplus(rho);
        let seq_std = ctx.tape.add_scalar(std, F::from_f64(STD_FLOOR));
        let start = self.config.start_token_len;
        Ok(ForwardOut {
            mean: discard_start(ctx.tape, mean, b, start, h)?,
            std: discard_start(ctx.tape, seq_std, b, start, h)?,
            seq_mean: mean,
            seq_std,
            encoded: memory,
            enc_steps,
        })
    }

    /// Evaluation-mode forecasts for standardized windows.
    pub fn predict(&mut self, samples: &[&WindowSample], max_train_year: i32) -> Result<Vec<ForecastOutput>> {
        let batch = self.make_batch(samples, max_train_year)?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let mut rng = stream(0, Stream::Dropout);
        let mut ctx = Ctx::new(&mut tape, &params, false, &mut rng);
        let out = self.forward(&mut ctx, &batch)?;
        let (mean, std) = (tape.value(out.mean).to_f64_vec(), tape.value(out.std).to_f64_vec());
        let per = batch.horizon * self.vars;
        Ok((0..batch.batch)
            .map(|i| ForecastOutput {
                horizon: batch.horizon,
                vars: self.vars,
                mean: mean[i * per..(i + 1) * per].to_vec(),
                std: std[i * per..(i + 1) * per].to_vec(),
            })
            .collect())
    }

    /// Materialized attention weights of one head of one sublayer for a
    /// single window. Local variants are block-diagonal with zeros between
    /// variable blocks.
    pub fn attention_matrix(&mut self, sample: &WindowSample, max_train_year: i32, layer: usize, head: usize, which: Which) -> Result<Tensor<F>> {
        if head >= self.config.heads {
            return Err(Error::config(format!("head {head} out of range ({} heads)", self.config.heads)));
        }
        let target = {
            let slot = match which {
                Which::GlobalSelf => self.encoder.get_mut(layer).map(|l| &mut l.global),
                Which::LocalSelf => self.encoder.get_mut(layer).map(|l| &mut l.local),
                Which::GlobalCross => self.decoder.get_mut(layer).map(|l| &mut l.global_cross),
                Which::LocalCross => self.decoder.get_mut(layer).map(|l| &mut l.local_cross),
            };
            let slot = slot.ok_or_else(|| Error::config(format!("layer {layer} out of range")))?;
            let a = slot
                .as_mut()
                .ok_or_else(|| Error::config(format!("{which:?} attention is disabled in this model")))?;
            a.record = true;
            a.name.clone()
        };
        let result = self.predict(&[sample], max_train_year);
        let cfg = self.config.clone();
        let mech;
        let recorded = {
            let layer = self.attn_layers_mut().into_iter().find(|a| a.name == target).expect("recorded layer");
            layer.record = false;
            mech = layer.mechanism(&cfg);
            layer.recorded.take()
        };
        result?;
        let (q, k) = recorded.ok_or_else(|| Error::contract("attention layer was not reached"))?;
        let local = matches!(which, Which::LocalSelf | Which::LocalCross);
        let groups = if local && self.config.mode == Mode::Spatiotemporal { self.vars } else { 1 };
        let layout = Layout::infer(q.shape(), k.shape(), groups, self.config.heads)?;
        let mut full = Tensor::zeros(&[q.rows(), k.rows()]);
        let cols = k.rows();
        for g in 0..groups {
            let block = attention::attention_matrix(&q, &k, layout, g, head, &mech)?;
            for r in 0..layout.lq {
                let dst = (g * layout.lq + r) * cols + g * layout.lk;
                full.data_mut()[dst..dst + layout.lk].copy_from_slice(block.row(r));
            }
        }
        Ok(full)
    }

    /// Tensor names of the checkpoint state, for inspection.
    pub fn state(&mut self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = self.store.names().iter().cloned().zip(self.store.tensors().iter().cloned()).collect();
        for norm in self.norms_mut() {
            out.push((format!("{}.running_mean", norm.name), norm.stats.mean.clone()));
            out.push((format!("{}.running_var", norm.name), norm.stats.var.clone()));
        }
        for layer in self.attn_layers_mut() {
            for (h, f) in layer.features.iter().enumerate() {
                out.push((format!("{}.features{h}", layer.name), f.clone()));
            }
        }
        out
    }

    pub fn to_container(&mut self, meta: &ModelMeta) -> Result<Container> {
        let json = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut c = Container::new(CHECKPOINT_SECTION, json);
        for (name, t) in self.state() {
            c.push(name, &t);
        }
        Ok(c)
    }

    /// Rebuilds a model and its metadata from a checkpoint.
    pub fn from_container(c: &Container) -> Result<(Self, ModelMeta)> {
        c.expect_section(CHECKPOINT_SECTION)?;
        let meta: ModelMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::build(meta.config.clone(), meta.names.len(), 0)?;
        let names: Vec<String> = model.store.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = c.get::<F>(name)?;
            if t.shape() != model.store.tensors()[i].shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape())));
            }
            model.store.tensors_mut()[i] = t;
        }
        for norm in model.norms_mut() {
            norm.stats.mean = c.get(&format!("{}.running_mean", norm.name))?;
            norm.stats.var = c.get(&format!("{}.running_var", norm.name))?;
        }
        for layer in model.attn_layers_mut() {
            for h in 0..layer.features.len() {
                layer.features[h] = c.get(&format!("{}.features{h}", layer.name))?;
            }
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests;
