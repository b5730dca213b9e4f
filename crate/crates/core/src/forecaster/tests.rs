use super::*;
use crate::dataflow::{default_toy_start, generate_toy, TOY_PERIOD};
use crate::nn::NormKind;
use crate::tensor::gradient_check;

fn tiny(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        ff_dim: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        start_token_len: 2,
        time_emb_dim: 2,
        attention,
        norm: NormKind::Layer,
        dropout: Dropout::default(),
        ..ModelConfig::toy()
    }
}

fn window(vars: usize, c: usize, h: usize) -> WindowSample {
    generate_toy(vars, c + h + 8, default_toy_start(), TOY_PERIOD).unwrap().window(3, c, h)
}

#[test]
fn toy_parameter_count_in_range() {
    let m = Forecaster::<f32>::build(ModelConfig::toy(), 20, 0).unwrap();
    let n = m.param_count();
    assert!((1_000_000..=3_000_000).contains(&n), "{n}");
}

#[test]
fn indivisible_heads_rejected() {
    let cfg = ModelConfig {
        heads: 3,
        ..ModelConfig::toy()
    };
    assert!(matches!(Forecaster::<f32>::build(cfg, 4, 0), Err(Error::Config(_))));
}

#[test]
fn temporal_mode_drops_local_layers_and_variable_table() {
    let st = Forecaster::<f32>::build(tiny(AttentionKind::Full), 3, 0).unwrap();
    let cfg = ModelConfig {
        mode: Mode::Temporal,
        ..tiny(AttentionKind::Full)
    };
    let t = Forecaster::<f32>::build(cfg, 3, 0).unwrap();
    assert!(t.config.ablation.no_local && t.config.ablation.no_var_emb);
    assert!(t.param_count() < st.param_count());
    assert!(t.store.find("emb.var").is_none());
    assert!(t.store.find("enc0.local.q.w").is_none());
}

#[test]
fn forecast_shape_and_positive_scale() {
    for mode in [Mode::Spatiotemporal, Mode::Temporal] {
        let cfg = ModelConfig {
            mode,
            ..tiny(AttentionKind::Performer)
        };
        let mut m = Forecaster::<f64>::build(cfg, 3, 1).unwrap();
        let w = window(3, 8, 4);
        let out = m.predict(&[&w, &w], 2000).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].mean.len(), 12);
        assert!(out[0].std.iter().all(|&s| s >= STD_FLOOR));
        assert_eq!(out[0], out[1]);
    }
}

#[test]
fn halving_convolutions_shorten_memory() {
    let cfg = ModelConfig {
        initial_convs: 1,
        intermediate_convs: 1,
        enc_layers: 2,
        ..tiny(AttentionKind::Full)
    };
    let mut m = Forecaster::<f64>::build(cfg.clone(), 2, 0).unwrap();
    let w = window(2, 8, 2);
    let batch = m.make_batch(&[&w], 2000).unwrap();
    let mut tape = Tape::new();
    let params = m.store.bind(&mut tape, false);
    let mut rng = stream(0, Stream::Dropout);
    let mut ctx = Ctx::new(&mut tape, &params, false, &mut rng);
    let out = m.forward(&mut ctx, &batch).unwrap();
    assert_eq!(out.enc_steps, 2);
    assert_eq!(out.enc_steps, cfg.memory_steps(8).unwrap());
    assert_eq!(tape.shape(out.encoded), &[2 * 2, 8]);
    assert!(cfg.memory_steps(6).is_err());
}

#[test]
fn exact_attention_rejected_past_limit() {
    let mut m = Forecaster::<f32>::build(tiny(AttentionKind::Full), 5, 0).unwrap();
    let w = window(5, 104, 2);
    assert!(matches!(m.predict(&[&w], 2000), Err(Error::Config(_))));
    let mut p = Forecaster::<f32>::build(tiny(AttentionKind::Performer), 5, 0).unwrap();
    assert!(p.predict(&[&w], 2000).is_ok());
}

#[test]
fn horizon_values_do_not_leak_into_forecasts() {
    let mut m = Forecaster::<f64>::build(tiny(AttentionKind::Full), 2, 4).unwrap();
    let w = window(2, 6, 3);
    let mut altered = w.clone();
    altered.target.iter_mut().for_each(|x| *x += 100.0);
    assert_eq!(m.predict(&[&w], 2000).unwrap(), m.predict(&[&altered], 2000).unwrap());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let model = Forecaster::<f64>::build(tiny(AttentionKind::Full), 2, 3).unwrap();
    let w = window(2, 4, 2);
    let batch = model.make_batch(&[&w], 2000).unwrap();
    let loss = |m: &mut Forecaster<f64>, tape: &mut Tape<f64>, params: &[Var]| -> Result<Var> {
        let mut rng = stream(0, Stream::Dropout);
        let mut ctx = Ctx::new(tape, params, true, &mut rng);
        let out = m.forward(&mut ctx, &batch)?;
        let target = tape.constant(Tensor::from_f64(&[2, 2], &batch.target)?);
        let e = tape.sub(out.mean, target)?;
        let e2 = tape.square(e);
        let s = tape.sum(e2);
        let lsum = tape.sum(out.std);
        tape.add(s, lsum)
    };
    let mut worst: f64 = 0.0;
    for i in 0..model.store.len() {
        let err = gradient_check(
            |tape, x| {
                let mut m = model.clone();
                let mut params = m.store.bind(tape, false);
                params[i] = x;
                loss(&mut m, tape, &params)
            },
            &model.store.tensors()[i],
            1e-5,
        );
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn checkpoint_round_trip_preserves_forecasts() {
    let cfg = ModelConfig {
        norm: NormKind::Batch,
        ..tiny(AttentionKind::Performer)
    };
    let mut m = Forecaster::<f32>::build(cfg.clone(), 2, 9).unwrap();
    let w = window(2, 6, 2);
    let meta = ModelMeta {
        config: m.config.clone(),
        names: vec!["a".into(), "b".into()],
        context_len: 6,
        horizon: 2,
        max_train_year: 2000,
        standardizer: Standardizer {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        },
        split: SplitSpec {
            train: 0.5,
            val: 0.2,
            test: 0.3,
        },
    };
    let c = m.to_container(&meta).unwrap();
    let (mut back, meta_back) = Forecaster::<f32>::from_container(&c).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(m.predict(&[&w], 2000).unwrap(), back.predict(&[&w], 2000).unwrap());
}

#[test]
fn local_attention_matrix_is_block_diagonal_and_stochastic() {
    let mut m = Forecaster::<f64>::build(tiny(AttentionKind::Performer), 3, 2).unwrap();
    let w = window(3, 6, 2);
    let a = m.attention_matrix(&w, 2000, 0, 1, Which::LocalSelf).unwrap();
    assert_eq!(a.shape(), &[18, 18]);
    for r in 0..18 {
        let sum: f64 = a.row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "row {r} sums to {sum}");
        for c in 0..18 {
            if r / 6 != c / 6 {
                assert_eq!(a.at(r, c), 0.0);
            }
        }
    }
    let g = m.attention_matrix(&w, 2000, 0, 0, Which::GlobalCross).unwrap();
    assert_eq!(g.shape(), &[3 * 4, 18]);
    assert!(m.attention_matrix(&w, 2000, 1, 0, Which::GlobalSelf).is_err());
    assert!(m.attention_matrix(&w, 2000, 0, 2, Which::GlobalSelf).is_err());
}

#[test]
fn destandardize_scales_mean_and_std() {
    let out = ForecastOutput {
        horizon: 1,
        vars: 2,
        mean: vec![1.0, -1.0],
        std: vec![0.5, 2.0],
    };
    let s = Standardizer {
        mean: vec![10.0, 0.0],
        std: vec![2.0, 3.0],
    };
    let d = out.destandardize(&s);
    assert_eq!(d.mean, vec![12.0, -3.0]);
    assert_eq!(d.std, vec![1.0, 6.0]);
}

fn permute_window(w: &WindowSample, perm: &[usize]) -> WindowSample {
    let n = w.vars;
    let pick = |m: &[f64]| -> Vec<f64> { (0..m.len()).map(|i| m[(i / n) * n + perm[i % n]]).collect() };
    let pick_mask = |m: &[bool]| -> Vec<bool> { (0..m.len()).map(|i| m[(i / n) * n + perm[i % n]]).collect() };
    WindowSample {
        context: pick(&w.context),
        context_mask: pick_mask(&w.context_mask),
        target: pick(&w.target),
        target_mask: pick_mask(&w.target_mask),
        ..w.clone()
    }
}

#[test]
fn permuting_variables_and_table_rows_permutes_forecasts() {
    let perm = [2, 0, 3, 1];
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        ..tiny(AttentionKind::Full)
    };
    let mut m = Forecaster::<f64>::build(cfg, 4, 11).unwrap();
    let w = window(4, 6, 3);
    let base = m.predict(&[&w], 2000).unwrap().remove(0);

    let mut p = m.clone();
    let id = p.store.find("emb.var").unwrap();
    let table = m.store.get(id).clone();
    for (i, &src) in perm.iter().enumerate() {
        p.store.get_mut(id).row_mut(i).copy_from_slice(table.row(src));
    }
    let moved = p.predict(&[&permute_window(&w, &perm)], 2000).unwrap().remove(0);
    for i in 0..base.mean.len() {
        let j = (i / 4) * 4 + perm[i % 4];
        assert!((moved.mean[i] - base.mean[j]).abs() < 1e-10, "mean {i}");
        assert!((moved.std[i] - base.std[j]).abs() < 1e-10, "std {i}");
    }
}

#[test]
fn model_without_attention_is_finite() {
    let mut cfg = tiny(AttentionKind::Performer);
    cfg.ablation.no_local = true;
    cfg.ablation.no_global = true;
    let mut m = Forecaster::<f64>::build(cfg, 3, 0).unwrap();
    assert!(m.store.names().iter().all(|n| !n.contains("local") && !n.contains("global")));
    let out = m.predict(&[&window(3, 8, 4)], 2000).unwrap().remove(0);
    assert!(out.mean.iter().chain(&out.std).all(|x| x.is_finite()));
}

#[test]
fn single_variable_local_and_global_see_the_same_tokens() {
    let mut m = Forecaster::<f64>::build(tiny(AttentionKind::Full), 1, 4).unwrap();
    let w = window(2, 8, 4);
    let w = WindowSample {
        vars: 1,
        context: w.context.iter().step_by(2).copied().collect(),
        context_mask: vec![true; 8],
        target: w.target.iter().step_by(2).copied().collect(),
        target_mask: vec![true; 4],
        ..w
    };
    let out = m.predict(&[&w], 2000).unwrap().remove(0);
    assert_eq!((out.mean.len(), out.vars), (4, 1));
    let local = m.attention_matrix(&w, 2000, 0, 1, Which::LocalSelf).unwrap();
    let global = m.attention_matrix(&w, 2000, 0, 1, Which::GlobalSelf).unwrap();
    assert_eq!(local.shape(), global.shape());
    assert_eq!(local.shape(), &[8, 8]);
}

#[test]
fn global_self_matrix_covers_the_halved_memory() {
    let cfg = ModelConfig {
        initial_convs: 1,
        ..tiny(AttentionKind::Full)
    };
    let mut m = Forecaster::<f64>::build(cfg, 3, 0).unwrap();
    let a = m.attention_matrix(&window(3, 8, 4), 2000, 0, 0, Which::GlobalSelf).unwrap();
    assert_eq!(a.shape(), &[12, 12]);
}

/// Plain row-major matrix helpers for the decoder oracle.
type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add_bias(mut a: Mat, b: &[f64]) -> Mat {
    a.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(x, y)| *x += y));
    a
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

struct Oracle<'a> {
    m: &'a Forecaster<f64>,
    heads: usize,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> &Tensor<f64> {
        self.m.store.get(self.m.store.find(name).unwrap_or_else(|| panic!("{name}")))
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let y = matmul(x, &mat(self.p(&format!("{name}.w"))));
        match self.m.store.find(&format!("{name}.b")) {
            Some(b) => add_bias(y, self.m.store.get(b).data()),
            None => y,
        }
    }

    fn norm(&self, x: &Mat, name: &str) -> Mat {
        let (g, b) = (self.p(&format!("{name}.gamma")).data(), self.p(&format!("{name}.beta")).data());
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + crate::nn::LN_EPS).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn attention(&self, x: &Mat, memory: Option<&Mat>, name: &str, groups: usize) -> Mat {
        let xn = self.norm(x, &format!("{name}.norm"));
        let z = memory.unwrap_or(&xn);
        let (q, k, v) = (
            self.linear(&xn, &format!("{name}.q")),
            self.linear(z, &format!("{name}.k")),
            self.linear(z, &format!("{name}.v")),
        );
        let d = q[0].len();
        let dh = d / self.heads;
        let (lq, lk) = (q.len() / groups, k.len() / groups);
        let mut out = vec![vec![0.0; d]; q.len()];
        for g in 0..groups {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in g * lq..(g + 1) * lq {
                    let scores: Vec<f64> = (g * lk..(g + 1) * lk)
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let total: f64 = e.iter().sum();
                    for (jj, j) in (g * lk..(g + 1) * lk).enumerate() {
                        for c in cols.clone() {
                            out[i][c] += e[jj] / total * v[j][c];
                        }
                    }
                }
            }
        }
        add(x, &self.linear(&out, &format!("{name}.o")))
    }

    fn feed_forward(&self, x: &Mat, name: &str) -> Mat {
        let h = self.linear(&self.norm(x, &format!("{name}.norm")), &format!("{name}.up"));
        let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        add(x, &self.linear(&h, &format!("{name}.down")))
    }
}

#[test]
fn decoder_matches_hand_composed_sublayers() {
    let mut m = Forecaster::<f64>::build(tiny(AttentionKind::Full), 2, 8).unwrap();
    let w = window(2, 4, 2);
    let batch = m.make_batch(&[&w], 2000).unwrap();
    let mut tape = Tape::new();
    let params = m.store.bind(&mut tape, false);
    let mut rng = stream(0, Stream::Dropout);
    let mut ctx = Ctx::new(&mut tape, &params, false, &mut rng);
    let (memory, _) = m.encode(&mut ctx, &batch.enc).unwrap();
    let embedded = m.embedding.forward(&mut ctx, &batch.dec, m.config.ablation.embedding()).unwrap();
    let decoded = m.decode(&mut ctx, &batch.dec, memory).unwrap();
    let (memory, embedded, decoded) = (mat(tape.value(memory)), mat(tape.value(embedded)), mat(tape.value(decoded)));

    let o = Oracle { m: &m, heads: 2 };
    let mut y = o.attention(&embedded, None, "dec0.local_self", 2);
    y = o.attention(&y, None, "dec0.global_self", 1);
    y = o.attention(&y, Some(&memory), "dec0.local_cross", 2);
    y = o.attention(&y, Some(&memory), "dec0.global_cross", 1);
    y = o.feed_forward(&y, "dec0.ff");
    y = o.norm(&y, "dec.norm");
    assert_eq!(y.len(), decoded.len());
    for (a, b) in y.iter().flatten().zip(decoded.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
