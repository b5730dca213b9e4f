//! Flattening windows into spatiotemporal token sequences and embedding
//! tokens into the model dimension.
//!
//! A window of `L` steps and `N` variables becomes `L * N` tokens in
//! variable-major order: token `k` belongs to variable `k / L` at step
//! `k % L`. Each token embeds as
//! `Proj(time2vec(time), value) + VarTable[var] + GivenTable[given]`.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataflow::WindowSample;
use crate::error::{Error, Result};
use crate::nn::{embedding_table, glorot, Ctx, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};

/// year, month, day, hour, minute, second, relative index.
pub const TIME_FEATURES: usize = 7;

pub type TimeFeatures = [f64; TIME_FEATURES];

/// Calendar components scaled to `[0, 1]` plus the relative position inside
/// the window. The year is divided by the latest training year, so it can
/// exceed 1 on later data.
pub fn encode_time_features(ts: NaiveDateTime, position: usize, window_len: usize, max_train_year: i32) -> TimeFeatures {
    let rel = if window_len > 1 { position as f64 / (window_len - 1) as f64 } else { 0.0 };
    [
        ts.year() as f64 / max_train_year.max(1) as f64,
        (ts.month() - 1) as f64 / 11.0,
        (ts.day() - 1) as f64 / 30.0,
        ts.hour() as f64 / 23.0,
        ts.minute() as f64 / 59.0,
        ts.second() as f64 / 59.0,
        rel,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Token {
    pub time: TimeFeatures,
    pub value: f64,
    pub var: usize,
    pub given: bool,
}

/// `steps * vars` tokens in variable-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSequence {
    pub tokens: Vec<Token>,
    pub steps: usize,
    pub vars: usize,
}

impl FlatSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, step: usize, var: usize) -> usize {
        var * self.steps + step
    }

    /// Row-major `[steps, vars]` values and given flags.
    pub fn unflatten(&self) -> (Vec<f64>, Vec<bool>) {
        let mut values = vec![0.0; self.len()];
        let mut given = vec![false; self.len()];
        for (k, tok) in self.tokens.iter().enumerate() {
            let (var, step) = (k / self.steps, k % self.steps);
            values[step * self.vars + var] = tok.value;
            given[step * self.vars + var] = tok.given;
        }
        (values, given)
    }
}

/// Inverse of [`FlatSequence::unflatten`] for a `[steps, vars]` grid sharing
/// one time row per step.
pub fn flatten_grid(values: &[f64], given: &[bool], times: &[TimeFeatures], vars: usize) -> FlatSequence {
    let steps = times.len();
    let mut tokens = Vec::with_capacity(steps * vars);
    for var in 0..vars {
        for (step, time) in times.iter().enumerate() {
            tokens.push(Token {
                time: *time,
                value: values[step * vars + var],
                var,
                given: given[step * vars + var],
            });
        }
    }
    FlatSequence { tokens, steps, vars }
}

/// Time rows of the encoder (`c` steps) or decoder (`s + h` steps) input.
/// Positions count over the whole `c + h` window, so start tokens share
/// time features with the context steps they copy.
pub fn window_times(sample: &WindowSample, s: usize, role: Role, max_train_year: i32) -> Vec<TimeFeatures> {
    let (c, h) = (sample.context_len(), sample.horizon());
    let total = c + h;
    let all = sample.context_times.iter().chain(&sample.target_times);
    let (skip, take) = match role {
        Role::Encoder => (0, c),
        Role::Decoder => (c - s, s + h),
    };
    all.enumerate()
        .skip(skip)
        .take(take)
        .map(|(pos, &ts)| encode_time_features(ts, pos, total, max_train_year))
        .collect()
}

/// Row-major `[steps, N]` input values and given flags for `role`.
/// Decoder rows are the last `s` context rows followed by `h` unknown rows.
pub fn window_grid(sample: &WindowSample, s: usize, role: Role) -> Result<(Vec<f64>, Vec<bool>)> {
    let (c, h, n) = (sample.context_len(), sample.horizon(), sample.vars);
    if s > c {
        return Err(Error::config(format!("start token length {s} exceeds context length {c}")));
    }
    Ok(match role {
        Role::Encoder => (sample.context.clone(), sample.context_mask.clone()),
        Role::Decoder => {
            let mut values = sample.context[(c - s) * n..].to_vec();
            let mut given = sample.context_mask[(c - s) * n..].to_vec();
            values.resize((s + h) * n, 0.0);
            given.resize((s + h) * n, false);
            (values, given)
        }
    })
}

/// Flattens the encoder or decoder view of a window.
pub fn flatten(sample: &WindowSample, s: usize, role: Role, max_train_year: i32) -> Result<FlatSequence> {
    let (values, given) = window_grid(sample, s, role)?;
    let times = window_times(sample, s, role, max_train_year);
    Ok(flatten_grid(&values, &given, &times, sample.vars))
}

/// Which parts of the embedding sum are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingAblation {
    pub no_var_emb: bool,
    pub no_time_emb: bool,
    pub no_value_emb: bool,
}

/// Model-ready inputs of a batch of sequences.
///
/// Token rows are ordered sample by sample. `time` holds one row per
/// (sample, step) and `time_row[k]` points token `k` at its row. In
/// spatiotemporal layout each token carries one value; in temporal layout a
/// token is a whole step carrying all `N` values.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub steps: usize,
    /// Variable blocks per sample: `N` spatiotemporal, 1 temporal.
    pub blocks: usize,
    pub value_width: usize,
    pub time: Vec<f64>,
    pub time_row: Vec<usize>,
    pub values: Vec<f64>,
    pub var: Vec<usize>,
    pub given: Vec<usize>,
}

impl TokenBatch {
    pub fn tokens(&self) -> usize {
        self.time_row.len()
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.steps * self.blocks
    }

    pub fn spatiotemporal(seqs: &[FlatSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::contract("empty batch"))?;
        let (steps, vars) = (first.steps, first.vars);
        let mut b = Self {
            batch: seqs.len(),
            steps,
            blocks: vars,
            value_width: 1,
            time: Vec::with_capacity(seqs.len() * steps * TIME_FEATURES),
            time_row: Vec::new(),
            values: Vec::new(),
            var: Vec::new(),
            given: Vec::new(),
        };
        for (i, seq) in seqs.iter().enumerate() {
            if (seq.steps, seq.vars) != (steps, vars) {
                return Err(Error::dims("token batch", &[steps, vars], &[seq.steps, seq.vars]));
            }
            for step in 0..steps {
                b.time.extend_from_slice(&seq.tokens[step].time);
            }
            for (k, tok) in seq.tokens.iter().enumerate() {
                b.time_row.push(i * steps + k % steps);
                b.values.push(tok.value);
                b.var.push(tok.var);
                b.given.push(tok.given as usize);
            }
        }
        Ok(b)
    }

    /// One token per step whose value input is the whole `N`-wide row; given
    /// iff all `N` values at that step are given.
    pub fn temporal(samples: &[&WindowSample], s: usize, role: Role, max_train_year: i32) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
        let n = first.vars;
        let mut b = Self {
            batch: samples.len(),
            steps: 0,
            blocks: 1,
            value_width: n,
            time: Vec::new(),
            time_row: Vec::new(),
            values: Vec::new(),
            var: Vec::new(),
            given: Vec::new(),
        };
        for sample in samples {
            let (values, given) = window_grid(sample, s, role)?;
            let times = window_times(sample, s, role, max_train_year);
            b.steps = times.len();
            for (step, t) in times.iter().enumerate() {
                b.time.extend_from_slice(t);
                b.time_row.push(b.time_row.len());
                b.values.extend_from_slice(&values[step * n..(step + 1) * n]);
                b.var.push(0);
                b.given.push(given[step * n..(step + 1) * n].iter().all(|&g| g) as usize);
            }
        }
        Ok(b)
    }
}

/// Learned embedding tables and projections.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub t2v_freq: ParamId,
    pub t2v_phase: ParamId,
    /// `[7 * k_t, d]` rows of the value&time projection acting on time2vec.
    pub w_time: ParamId,
    /// `[value_width, d]` rows of the value&time projection acting on values.
    pub w_value: ParamId,
    pub bias: ParamId,
    pub var_table: Option<ParamId>,
    pub given_table: ParamId,
    pub time_dim: usize,
    pub d: usize,
}

impl Embedding {
    /// `vars` sizes the variable table (none in temporal layout, where
    /// `value_width = N`).
    pub fn new<F: Float>(store: &mut ParamStore<F>, d: usize, time_dim: usize, value_width: usize, vars: Option<usize>, rng: &mut impl Rng) -> Self {
        let fan_in = TIME_FEATURES * time_dim + value_width;
        let w = glorot::<F>(fan_in, d, rng);
        let (w_time, w_value) = w.data().split_at(TIME_FEATURES * time_dim * d);
        Self {
            t2v_freq: store.add(
                "emb.t2v.freq",
                Tensor::from_fn(&[TIME_FEATURES, time_dim], |_| F::from_f64(rng.random_range(-1.0..1.0))),
            ),
            t2v_phase: store.add(
                "emb.t2v.phase",
                Tensor::from_fn(&[TIME_FEATURES, time_dim], |_| F::from_f64(rng.random_range(-1.0..1.0))),
            ),
            w_time: store.add(
                "emb.proj.w_time",
                Tensor::new(&[TIME_FEATURES * time_dim, d], w_time.to_vec()).expect("projection split"),
            ),
            w_value: store.add("emb.proj.w_value", Tensor::new(&[value_width, d], w_value.to_vec()).expect("projection split")),
            bias: store.add("emb.proj.b", Tensor::zeros(&[d])),
            var_table: vars.map(|n| store.add("emb.var", embedding_table(n, d, rng))),
            given_table: store.add("emb.given", embedding_table(2, d, rng)),
            time_dim,
            d,
        }
    }

    /// Value&time projection plus the given embedding, `[tokens, d]`.
    pub fn value_time<F: Float>(&self, ctx: &mut Ctx<'_, F>, batch: &TokenBatch, ablation: EmbeddingAblation) -> Result<Var> {
        let rows = batch.tokens();
        let mut out = None;
        if !ablation.no_time_emb {
            let time = ctx
                .tape
                .constant(Tensor::from_f64(&[batch.time.len() / TIME_FEATURES, TIME_FEATURES], &batch.time)?);
            let t2v = ctx.tape.time2vec(time, ctx.p(self.t2v_freq), ctx.p(self.t2v_phase))?;
            let per_step = ctx.tape.matmul(t2v, ctx.p(self.w_time))?;
            out = Some(ctx.tape.gather_rows(per_step, &batch.time_row)?);
        }
        if !ablation.no_value_emb {
            let values = ctx.tape.constant(Tensor::from_f64(&[rows, batch.value_width], &batch.values)?);
            let v = ctx.tape.matmul(values, ctx.p(self.w_value))?;
            out = Some(match out {
                Some(t) => ctx.tape.add(t, v)?,
                None => v,
            });
        }
        let given = ctx.tape.gather_rows(ctx.p(self.given_table), &batch.given)?;
        let base = match out {
            Some(t) => ctx.tape.add(t, given)?,
            None => given,
        };
        ctx.tape.add_row(base, ctx.p(self.bias))
    }

    /// Variable-table rows for `var` indices, or `None` when there is no
    /// table or it is ablated.
    pub fn variable<F: Float>(&self, ctx: &mut Ctx<'_, F>, var: &[usize], ablation: EmbeddingAblation) -> Result<Option<Var>> {
        match self.var_table {
            Some(table) if !ablation.no_var_emb => {
                let n = ctx.tape.value(ctx.p(table)).rows();
                if let Some(&bad) = var.iter().find(|&&v| v >= n) {
                    return Err(Error::contract(format!("variable index {bad} out of range for {n} variables")));
                }
                Ok(Some(ctx.tape.gather_rows(ctx.p(table), var)?))
            }
            _ => Ok(None),
        }
    }

    /// Full embedding sum `[tokens, d]`.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, batch: &TokenBatch, ablation: EmbeddingAblation) -> Result<Var> {
        let base = self.value_time(ctx, batch, ablation)?;
        match self.variable(ctx, &batch.var, ablation)? {
            Some(v) => ctx.tape.add(base, v),
            None => Ok(base),
        }
    }

    /// Embeds one sequence outside training.
    pub fn embed<F: Float>(&self, store: &ParamStore<F>, seq: &FlatSequence, ablation: EmbeddingAblation) -> Result<Tensor<F>> {
        let batch = TokenBatch::spatiotemporal(std::slice::from_ref(seq))?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut ctx = Ctx::new(&mut tape, &params, false, &mut rng);
        let out = self.forward(&mut ctx, &batch, ablation)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataflow::{default_toy_start, generate_toy};

    fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, mo, d).unwrap().and_hms_opt(h, mi, s).unwrap()
    }

    #[test]
    fn time_features_at_start_of_year() {
        let f = encode_time_features(at(2000, 1, 1, 0, 0, 0), 0, 160, 2000);
        assert_eq!(f, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn time_features_at_end_of_year() {
        let f = encode_time_features(at(2000, 12, 31, 23, 59, 59), 159, 160, 2000);
        assert_eq!(&f[1..], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(encode_time_features(at(2000, 1, 1, 0, 0, 0), 0, 1, 2000)[6], 0.0);
    }

    fn sample(c: usize, h: usize, n: usize) -> WindowSample {
        generate_toy(n.max(2), c + h + 3, default_toy_start(), 64.0).unwrap().window(2, c, h)
    }

    #[test]
    fn encoder_layout_is_variable_major() {
        let w = sample(3, 1, 2);
        let seq = flatten(&w, 0, Role::Encoder, 2000).unwrap();
        let order: Vec<(usize, f64)> = seq.tokens.iter().map(|t| (t.var, t.value)).collect();
        let expected: Vec<(usize, f64)> = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
            .iter()
            .map(|&(v, t)| (v, w.context[t * 2 + v]))
            .collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn decoder_marks_horizon_unknown() {
        let w = sample(4, 2, 2);
        let seq = flatten(&w, 1, Role::Decoder, 2000).unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.tokens.iter().filter(|t| !t.given).count(), 4);
        // The start token copies the last context step.
        assert_eq!(seq.tokens[0].value, w.context[3 * 2]);
        assert!(seq.tokens[1].value == 0.0 && seq.tokens[2].value == 0.0);
        assert!(matches!(flatten(&w, 5, Role::Decoder, 2000), Err(Error::Config(_))));
    }

    #[test]
    fn missing_context_cell_is_not_given() {
        let mut w = sample(3, 1, 2);
        w.context[2] = 0.0;
        w.context_mask[2] = false;
        let seq = flatten(&w, 0, Role::Encoder, 2000).unwrap();
        assert_eq!((seq.tokens[1].value, seq.tokens[1].given), (0.0, false));
    }

    #[test]
    fn start_tokens_share_context_time_features() {
        let w = sample(5, 3, 2);
        let enc = flatten(&w, 0, Role::Encoder, 2000).unwrap();
        let dec = flatten(&w, 2, Role::Decoder, 2000).unwrap();
        assert_eq!(dec.tokens[0].time, enc.tokens[3].time);
        assert_eq!(dec.tokens[1].time, enc.tokens[4].time);
    }

    fn build(n: usize, d: usize) -> (ParamStore<f64>, Embedding) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, d, 3, 1, Some(n), &mut rng);
        (store, emb)
    }

    #[test]
    fn variable_rows_shift_embeddings() {
        let (store, emb) = build(3, 4);
        let mut seq = flatten(&sample(2, 1, 3), 0, Role::Encoder, 2000).unwrap();
        // Make token 0 (var 0) and token 2 (var 1) identical except for var.
        seq.tokens[2] = Token { var: 1, ..seq.tokens[0] };
        let out = emb.embed(&store, &seq, EmbeddingAblation::default()).unwrap();
        let table = store.get(emb.var_table.unwrap());
        for j in 0..4 {
            let diff = out.at(2, j) - out.at(0, j);
            assert!((diff - (table.at(1, j) - table.at(0, j))).abs() < 1e-12);
        }
        let ablated = emb
            .embed(
                &store,
                &seq,
                EmbeddingAblation {
                    no_var_emb: true,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(ablated.row(0), ablated.row(2));
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let (mut store, emb) = build(2, 4);
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let seq = flatten(&sample(3, 2, 2), 1, Role::Decoder, 2000).unwrap();
        let out = emb.embed(&store, &seq, EmbeddingAblation::default()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.shape(), [(1 + 2) * 2, 4]);
    }

    #[test]
    fn out_of_range_variable_is_rejected() {
        let (store, emb) = build(2, 4);
        let mut seq = flatten(&sample(2, 1, 2), 0, Role::Encoder, 2000).unwrap();
        seq.tokens[0].var = 2;
        assert!(matches!(emb.embed(&store, &seq, EmbeddingAblation::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn temporal_batch_has_one_token_per_step() {
        let w = generate_toy(20, 200, default_toy_start(), 64.0).unwrap().window(0, 128, 32);
        let b = TokenBatch::temporal(&[&w], 4, Role::Encoder, 2000).unwrap();
        assert_eq!((b.tokens(), b.value_width), (128, 20));
        let st = TokenBatch::spatiotemporal(&[flatten(&w, 4, Role::Encoder, 2000).unwrap()]).unwrap();
        assert_eq!(st.tokens(), 2560);
        let dec = TokenBatch::temporal(&[&w], 4, Role::Decoder, 2000).unwrap();
        assert_eq!(dec.given.iter().sum::<usize>(), 4);
    }

    #[test]
    fn embedding_gradients() {
        let (store, emb) = build(2, 3);
        let seq = flatten(&sample(3, 2, 2), 1, Role::Decoder, 2000).unwrap();
        let batch = TokenBatch::spatiotemporal(&[seq]).unwrap();
        for (i, base) in store.tensors().iter().enumerate() {
            let err = crate::tensor::gradient_check(
                |tape, x| {
                    let mut params = store.bind(tape, false);
                    params[i] = x;
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = Ctx::new(tape, &params, false, &mut rng);
                    let out = emb.forward(&mut ctx, &batch, EmbeddingAblation::default())?;
                    let sq = tape.square(out);
                    Ok(tape.sum(sq))
                },
                base,
                1e-5,
            );
            assert!(err < 1e-4, "{}: {err}", store.names()[i]);
        }
    }

    proptest! {
        #[test]
        fn flatten_round_trips(c in 1usize..6, h in 1usize..4, n in 2usize..5, seed in 0u64..100) {
            let mut w = sample(c, h, n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (v, m) in w.context.iter_mut().zip(w.context_mask.iter_mut()) {
                *m = rng.random_bool(0.8);
                if !*m { *v = 0.0; }
            }
            let seq = flatten(&w, 0, Role::Encoder, 2000).unwrap();
            let (values, given) = seq.unflatten();
            prop_assert_eq!(values, w.context.clone());
            prop_assert_eq!(given, w.context_mask.clone());
            // Tokens i*L + t share the time features of step t.
            for k in 0..seq.len() {
                prop_assert_eq!(seq.tokens[k].time, seq.tokens[k % c].time);
                prop_assert_eq!(seq.tokens[k].var, k / c);
            }
        }
    }
}
