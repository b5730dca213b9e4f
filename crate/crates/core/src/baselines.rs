//! Linear autoregressive reference model.
//!
//! Each variable gets its own affine map from its last `c` values to the
//! next one. Forecasts roll the map forward, feeding every prediction back
//! into the context. Fitting runs Adam on teacher-forced one-step MSE, with
//! early stopping and plateau decay tracked per variable so that no
//! variable's fit depends on another's data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dataflow::{SplitSpec, Standardizer, WindowSample};
use crate::error::{Error, Result};
use crate::forecaster::ForecastOutput;
use crate::nn::{stream, Stream};
use crate::tensor::Tensor;
use crate::training::{Adam, HistoryRow, Predict, PreparedData, Schedule, TrainConfig, Verdict};

pub const CHECKPOINT_SECTION: &str = "linear-ar";

/// Weights `[N, c + 1]`: column `k < c` multiplies context step `k` (oldest
/// first) and column `c` is the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAr {
    pub context_len: usize,
    pub weights: Tensor<f64>,
    /// One-step residual spread per variable, reported as the forecast std.
    pub residual_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArMeta {
    pub names: Vec<String>,
    pub context_len: usize,
    pub horizon: usize,
    pub max_train_year: i32,
    pub standardizer: Standardizer,
    #[serde(default)]
    pub split: SplitSpec,
}

/// Teacher-forced one-step examples of one variable: inputs `[c]` and the
/// value that follows them. Unobserved inputs read as zero; examples with an
/// unobserved target are dropped.
fn one_step_examples(w: &WindowSample, var: usize, c: usize) -> Vec<(Vec<f64>, f64)> {
    let n = w.vars;
    let series: Vec<(f64, bool)> = (0..w.context_len())
        .map(|t| (w.context[t * n + var], w.context_mask[t * n + var]))
        .chain((0..w.horizon()).map(|t| (w.target[t * n + var], w.target_mask[t * n + var])))
        .map(|(v, m)| (if m { v } else { 0.0 }, m))
        .collect();
    (c..series.len())
        .filter(|&t| series[t].1)
        .map(|t| (series[t - c..t].iter().map(|s| s.0).collect(), series[t].0))
        .collect()
}

/// Mean squared one-step error of `w` and its gradient.
fn loss_and_grad(w: &[f64], examples: &[(Vec<f64>, f64)]) -> (f64, Vec<f64>) {
    let c = w.len() - 1;
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    for (x, y) in examples {
        let e = affine(w, x) - y;
        total += e * e;
        for k in 0..c {
            grad[k] += 2.0 * e * x[k];
        }
        grad[c] += 2.0 * e;
    }
    let n = examples.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

fn affine(w: &[f64], x: &[f64]) -> f64 {
    let c = w.len() - 1;
    x.iter().zip(&w[..c]).map(|(a, b)| a * b).sum::<f64>() + w[c]
}

/// Per-variable optimizer state.
struct VarFit {
    weights: Vec<Tensor<f64>>,
    adam: Adam,
    schedule: Schedule,
    best: Vec<f64>,
    done: bool,
}

impl LinearAr {
    pub fn zeros(vars: usize, context_len: usize) -> Self {
        Self {
            context_len,
            weights: Tensor::zeros(&[vars, context_len + 1]),
            residual_std: vec![1.0; vars],
        }
    }

    pub fn vars(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Rolls the model `horizon` steps past `context: [c, N]` (row-major),
    /// returning `[horizon, N]`.
    pub fn predict(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        let (n, c) = (self.vars(), self.context_len);
        if context.len() != c * n {
            return Err(Error::dims("linear_ar_predict", &[context.len()], &[c, n]));
        }
        let mut out = vec![0.0; horizon * n];
        for v in 0..n {
            let w = self.weights.row(v);
            let mut buf: Vec<f64> = (0..c).map(|t| context[t * n + v]).collect();
            for t in 0..horizon {
                let y = affine(w, &buf[buf.len() - c..]);
                out[t * n + v] = y;
                buf.push(y);
            }
        }
        Ok(out)
    }

    /// Fits one affine map per variable on the training windows of `data`,
    /// validating on its validation windows. Returns the best weights seen
    /// by each variable's own schedule and the joint history.
    pub fn fit(data: &PreparedData, config: &TrainConfig, observer: &mut dyn FnMut(&HistoryRow)) -> Result<(Self, Vec<HistoryRow>)> {
        config.validate()?;
        let c = data.context_len;
        let n = data.frame.vars();
        let train = data.windows(data.regions.train.clone(), config.train_stride);
        let val = data.windows(data.regions.val.clone(), config.eval_stride);
        if train.is_empty() || val.is_empty() {
            return Err(Error::config("training and validation regions each need at least one window"));
        }
        let val_examples: Vec<Vec<(Vec<f64>, f64)>> = (0..n).map(|v| val.iter().flat_map(|w| one_step_examples(w, v, c)).collect()).collect();
        let mut fits: Vec<VarFit> = (0..n)
            .map(|_| {
                let weights = vec![Tensor::zeros(&[c + 1])];
                VarFit {
                    adam: Adam::new(&weights, config.lr, config.l2),
                    best: vec![0.0; c + 1],
                    weights,
                    schedule: Schedule::new(config.patience, config.plateau_patience),
                    done: false,
                }
            })
            .collect();

        let batches = train.len().div_ceil(config.batch_size);
        let eval_every = ((config.eval_interval * batches as f64).round() as usize).max(1);
        let mut rng = stream(config.seed, Stream::Shuffle);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let (mut steps, mut loss_acc, mut since_eval) = (0usize, 0.0, 0usize);

        'epochs: for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                steps += 1;
                let mut step_loss = 0.0;
                for (v, fit) in fits.iter_mut().enumerate() {
                    let examples: Vec<(Vec<f64>, f64)> = chunk.iter().flat_map(|&i| one_step_examples(&train[i], v, c)).collect();
                    let (l, g) = loss_and_grad(fit.weights[0].data(), &examples);
                    step_loss += l / n as f64;
                    if !fit.done {
                        let g = Tensor::from_f64(&[c + 1], &g)?;
                        fit.adam.step(&mut fit.weights, &[Some(g)]);
                    }
                }
                if !step_loss.is_finite() {
                    return Err(Error::Diverged {
                        step: steps,
                        last_finite_loss: None,
                    });
                }
                loss_acc += step_loss;
                since_eval += 1;
                let budget_done = config.max_steps.is_some_and(|m| steps >= m);
                if steps % eval_every != 0 && !budget_done {
                    continue;
                }
                let mut val_loss = 0.0;
                for (v, fit) in fits.iter_mut().enumerate() {
                    let (l, _) = loss_and_grad(fit.weights[0].data(), &val_examples[v]);
                    val_loss += l / n as f64;
                    if fit.done {
                        continue;
                    }
                    match fit.schedule.observe(l) {
                        Verdict::Improved => fit.best = fit.weights[0].data().to_vec(),
                        Verdict::Decay => fit.adam.lr *= config.plateau_factor,
                        Verdict::Stop => fit.done = true,
                        Verdict::Wait => {}
                    }
                }
                let row = HistoryRow {
                    step: steps,
                    epoch,
                    train_loss: loss_acc / since_eval as f64,
                    val_loss,
                    lr: fits.iter().filter(|f| !f.done).map(|f| f.adam.lr).fold(0.0, f64::max),
                    probe_acc: None,
                };
                observer(&row);
                history.push(row);
                (loss_acc, since_eval) = (0.0, 0);
                if budget_done || fits.iter().all(|f| f.done) {
                    break 'epochs;
                }
            }
        }

        let mut model = Self::zeros(n, c);
        for (v, fit) in fits.iter().enumerate() {
            model.weights.row_mut(v).copy_from_slice(&fit.best);
            let examples: Vec<(Vec<f64>, f64)> = train.iter().flat_map(|w| one_step_examples(w, v, c)).collect();
            let (mse, _) = loss_and_grad(&fit.best, &examples);
            model.residual_std[v] = mse.sqrt().max(crate::forecaster::STD_FLOOR);
        }
        Ok((model, history))
    }

    pub fn to_container(&self, meta: &ArMeta) -> Result<Container> {
        let json = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut c = Container::new(CHECKPOINT_SECTION, json);
        c.push("weights", &self.weights);
        c.push("residual_std", &Tensor::<f64>::from_f64(&[self.vars()], &self.residual_std)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<(Self, ArMeta)> {
        c.expect_section(CHECKPOINT_SECTION)?;
        let meta: ArMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let weights: Tensor<f64> = c.get("weights")?;
        let n = meta.names.len();
        if weights.shape() != [n, meta.context_len + 1] {
            return Err(Error::Checkpoint(format!("weights have shape {:?}", weights.shape())));
        }
        let residual_std = c.get::<f64>("residual_std")?.data().to_vec();
        let model = Self {
            context_len: meta.context_len,
            weights,
            residual_std,
        };
        Ok((model, meta))
    }
}

impl Predict for LinearAr {
    fn predict_windows(&mut self, windows: &[&WindowSample], _max_train_year: i32) -> Result<Vec<ForecastOutput>> {
        windows
            .iter()
            .map(|w| {
                if w.vars != self.vars() || w.context_len() != self.context_len {
                    return Err(Error::config(format!(
                        "window has {} variables and context {}, model expects {} and {}",
                        w.vars,
                        w.context_len(),
                        self.vars(),
                        self.context_len
                    )));
                }
                let context: Vec<f64> = w.context.iter().zip(&w.context_mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
                let h = w.horizon();
                Ok(ForecastOutput {
                    horizon: h,
                    vars: w.vars,
                    mean: self.predict(&context, h)?,
                    std: (0..h * w.vars).map(|i| self.residual_std[i % w.vars]).collect(),
                })
            })
            .collect()
    }
}
