//! Masked losses and metrics, Adam, the early-stopping training loop and
//! the detached variable-identity probe.
//!
//! Losses are taken in standardized units over horizon cells only; reported
//! metrics are computed after mapping forecasts back to data units.

mod loss;
mod metrics;
mod optim;
mod probe;

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::Loss;
pub use metrics::{compute_metric, Metric, MetricReport, MAPE_FLOOR};
pub use optim::{clip_grad_norm, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use probe::{accuracy, Probe};

use crate::dataflow::{chronological_split, window_starts, Regions, SeriesFrame, SplitSpec, Standardizer, WindowSample};
use crate::error::{Error, Result};
use crate::forecaster::{discard_start, AttentionKind, ForecastOutput, Forecaster, ForwardOut, Mode, ModelBatch};
use crate::nn::{stream, Ctx, Stream};
use crate::tensor::{Float, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Optimizer step budget across all epochs; `None` for no cap.
    pub max_steps: Option<usize>,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Fraction of an epoch between validation passes, in `(0, 1]`.
    pub eval_interval: f64,
    pub loss: Loss,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub probe: bool,
    pub probe_lr: f64,
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            l2: 0.0,
            max_epochs: 50,
            max_steps: None,
            patience: 5,
            plateau_factor: 0.2,
            plateau_patience: 2,
            eval_interval: 1.0,
            loss: Loss::Mse,
            seed: 0,
            clip_norm: None,
            probe: true,
            probe_lr: 1e-2,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.plateau_patience == 0 {
            return Err(Error::config("patience values must be at least 1"));
        }
        if !(self.eval_interval > 0.0 && self.eval_interval <= 1.0) {
            return Err(Error::config(format!("eval_interval {} must lie in (0, 1]", self.eval_interval)));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::config("batch_size and strides must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.l2 >= 0.0 && self.probe_lr >= 0.0) {
            return Err(Error::config("learning rates and l2 must be non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::config(format!("plateau_factor {} must lie in (0, 1]", self.plateau_factor)));
        }
        Ok(())
    }
}

/// A standardized series with its split and window geometry.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub frame: SeriesFrame,
    pub standardizer: Standardizer,
    pub regions: Regions,
    pub context_len: usize,
    pub horizon: usize,
    pub max_train_year: i32,
}

impl PreparedData {
    /// Splits `raw` chronologically and standardizes it with training-region
    /// statistics.
    pub fn new(raw: &SeriesFrame, context_len: usize, horizon: usize, split: SplitSpec) -> Result<Self> {
        let regions = chronological_split(raw.len(), split, context_len + horizon)?;
        let standardizer = Standardizer::fit(raw, regions.train.clone())?;
        Ok(Self {
            frame: standardizer.apply_frame(raw),
            max_train_year: raw.max_year(regions.train.clone()),
            standardizer,
            regions,
            context_len,
            horizon,
        })
    }

    pub fn windows(&self, region: Range<usize>, stride: usize) -> Vec<WindowSample> {
        window_starts(region, self.context_len, self.horizon, stride)
            .into_iter()
            .map(|s| self.frame.window(s, self.context_len, self.horizon))
            .collect()
    }
}

/// One row of the history log, written once per evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub probe_acc: Option<f64>,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Weights with the lowest validation loss.
    pub best: Forecaster<F>,
    pub best_val: f64,
    pub history: Vec<HistoryRow>,
    /// Training loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Probe accuracy of every optimizer step; empty without a probe.
    pub step_probe_acc: Vec<f64>,
    pub stopped_early: bool,
}

/// Loss over the horizon rows of a full `[batch * (s + h), N]` decoder
/// output; start-token rows of predictions and targets are dropped first.
pub fn sequence_loss<F: Float>(tape: &mut Tape<F>, out: &ForwardOut, batch: &ModelBatch, loss: Loss) -> Result<Var> {
    let (b, s, h, n) = (batch.batch, batch.start, batch.horizon, batch.vars);
    let mean = discard_start(tape, out.seq_mean, b, s, h)?;
    let std = discard_start(tape, out.seq_std, b, s, h)?;
    let l = s + h;
    let keep = |i: usize| (i / n) % l >= s;
    let target: Vec<f64> = batch.seq_target.iter().enumerate().filter(|&(i, _)| keep(i)).map(|(_, &x)| x).collect();
    let mask: Vec<bool> = batch.seq_mask.iter().enumerate().filter(|&(i, _)| keep(i)).map(|(_, &x)| x).collect();
    tape.masked_loss(mean, std, &target, &mask, loss)
}

/// Variable index of every encoder output row, `[batch * blocks * steps]`.
pub fn token_labels(rows: usize, blocks: usize, steps: usize) -> Vec<usize> {
    (0..rows).map(|r| (r / steps) % blocks).collect()
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub probe_acc: Option<f64>,
}

/// Mutable state of a training run between steps.
pub struct Trainer<F> {
    pub model: Forecaster<F>,
    pub adam: Adam,
    pub probe: Option<Probe<F>>,
    config: TrainConfig,
    dropout_rng: rand_chacha::ChaCha8Rng,
    redraw_rng: rand_chacha::ChaCha8Rng,
    steps: usize,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Forecaster<F>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let probe = (config.probe && model.config.mode == Mode::Spatiotemporal).then(|| {
            let mut rng = stream(config.seed, Stream::Probe);
            Probe::new(model.config.d_model, model.vars, config.probe_lr, &mut rng)
        });
        Ok(Self {
            adam: Adam::new(model.store.tensors(), config.lr, config.l2),
            model,
            probe,
            dropout_rng: stream(config.seed, Stream::Dropout),
            redraw_rng: stream(config.seed, Stream::Redraw),
            config: config.clone(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, backward and one Adam update on `batch`, then a probe update
    /// on the detached encoder output. Features are redrawn every
    /// `redraw_interval` steps.
    pub fn step(&mut self, batch: &ModelBatch) -> Result<StepResult> {
        let mut tape = Tape::new();
        let params = self.model.store.bind(&mut tape, true);
        let mut ctx = Ctx::new(&mut tape, &params, true, &mut self.dropout_rng);
        let out = self.model.forward(&mut ctx, batch)?;
        let loss_var = sequence_loss(&mut tape, &out, batch, self.config.loss)?;
        let loss = tape.value(loss_var).data()[0].to_f64();
        self.steps += 1;
        if !loss.is_finite() {
            return Ok(StepResult { loss, probe_acc: None });
        }
        let probe_acc = match self.probe.as_mut() {
            Some(probe) => {
                let tokens = tape.value(out.encoded);
                let labels = token_labels(tokens.rows(), batch.enc.blocks, out.enc_steps);
                Some(probe.step(tokens, &labels)?)
            }
            None => None,
        };
        tape.backward(loss_var)?;
        let mut grads: Vec<_> = params.iter().map(|&p| tape.take_grad(p)).collect();
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        self.adam.step(self.model.store.tensors_mut(), &grads);
        let redraw = self.model.config.performer.redraw_interval;
        if self.model.config.attention == AttentionKind::Performer && redraw > 0 && self.steps % redraw == 0 {
            self.model.redraw_features(&mut self.redraw_rng);
        }
        Ok(StepResult { loss, probe_acc })
    }
}

/// Mean evaluation-mode loss over `windows`, weighted by observed cells.
pub fn validation_loss<F: Float>(model: &mut Forecaster<F>, windows: &[WindowSample], max_train_year: i32, batch_size: usize, loss: Loss) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("validation region holds no windows"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let batch = model.make_batch(&refs, max_train_year)?;
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape, false);
        let mut rng = stream(0, Stream::Dropout);
        let mut ctx = Ctx::new(&mut tape, &params, false, &mut rng);
        let out = model.forward(&mut ctx, &batch)?;
        let l = sequence_loss(&mut tape, &out, &batch, loss)?;
        let cells = batch.target_mask.iter().filter(|&&m| m).count();
        total += tape.value(l).data()[0].to_f64() * cells as f64;
        count += cells;
    }
    Ok(total / count as f64)
}

/// What the schedule decides after one validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    /// Scale the learning rate by the plateau factor.
    Decay,
    Stop,
}

/// Early stopping and plateau decay over a stream of validation losses.
/// Only a strict decrease counts as improvement.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub best: f64,
    patience: usize,
    plateau_patience: usize,
    stale: usize,
    plateau: usize,
}

impl Schedule {
    pub fn new(patience: usize, plateau_patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            patience,
            plateau_patience,
            stale: 0,
            plateau: 0,
        }
    }

    pub fn observe(&mut self, val: f64) -> Verdict {
        if val < self.best {
            self.best = val;
            (self.stale, self.plateau) = (0, 0);
            return Verdict::Improved;
        }
        self.stale += 1;
        self.plateau += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else if self.plateau >= self.plateau_patience {
            self.plateau = 0;
            Verdict::Decay
        } else {
            Verdict::Wait
        }
    }
}

/// Trains with shuffled mini-batches, validation every `eval_interval`
/// epochs, plateau learning-rate decay and early stopping. `observer` sees
/// every history row as it is produced.
pub fn train<F: Float>(model: Forecaster<F>, data: &PreparedData, config: &TrainConfig, observer: &mut dyn FnMut(&HistoryRow)) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let train_windows = data.windows(data.regions.train.clone(), config.train_stride);
    let val_windows = data.windows(data.regions.val.clone(), config.eval_stride);
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::config("training and validation regions each need at least one window"));
    }
    let batches = train_windows.len().div_ceil(config.batch_size);
    let eval_every = ((config.eval_interval * batches as f64).round() as usize).max(1);
    let mut trainer = Trainer::new(model, config)?;
    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    let mut best = trainer.model.clone();
    let mut schedule = Schedule::new(config.patience, config.plateau_patience);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut step_probe_acc = Vec::new();
    let (mut loss_acc, mut probe_acc, mut probe_n, mut since_eval) = (0.0, 0.0, 0usize, 0usize);
    let mut last_finite = None;
    let mut stopped_early = false;

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&WindowSample> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let batch = trainer.model.make_batch(&refs, data.max_train_year)?;
            let r = trainer.step(&batch)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    step: trainer.steps(),
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(r.loss);
            step_losses.push(r.loss);
            loss_acc += r.loss;
            since_eval += 1;
            if let Some(a) = r.probe_acc {
                step_probe_acc.push(a);
                probe_acc += a;
                probe_n += 1;
            }
            let budget_done = config.max_steps.is_some_and(|m| trainer.steps() >= m);
            if trainer.steps() % eval_every != 0 && !budget_done {
                continue;
            }
            let val = validation_loss(&mut trainer.model, &val_windows, data.max_train_year, config.batch_size, config.loss)?;
            let row = HistoryRow {
                step: trainer.steps(),
                epoch,
                train_loss: loss_acc / since_eval as f64,
                val_loss: val,
                lr: trainer.adam.lr,
                probe_acc: (probe_n > 0).then(|| probe_acc / probe_n as f64),
            };
            observer(&row);
            history.push(row);
            (loss_acc, probe_acc, probe_n, since_eval) = (0.0, 0.0, 0, 0);
            match schedule.observe(val) {
                Verdict::Improved => best = trainer.model.clone(),
                Verdict::Stop => {
                    stopped_early = true;
                    break 'epochs;
                }
                Verdict::Decay => trainer.adam.lr *= config.plateau_factor,
                Verdict::Wait => {}
            }
            if budget_done {
                break 'epochs;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_val: schedule.best,
        history,
        step_losses,
        step_probe_acc,
        stopped_early,
    })
}

/// Anything that maps standardized windows to standardized forecasts.
pub trait Predict {
    fn predict_windows(&mut self, windows: &[&WindowSample], max_train_year: i32) -> Result<Vec<ForecastOutput>>;
}

impl<F: Float> Predict for Forecaster<F> {
    fn predict_windows(&mut self, windows: &[&WindowSample], max_train_year: i32) -> Result<Vec<ForecastOutput>> {
        self.predict(windows, max_train_year)
    }
}

/// Forecasts every window of `region` and scores them in data units, pooling
/// all observed cells.
pub fn evaluate(model: &mut dyn Predict, data: &PreparedData, region: Range<usize>, stride: usize, batch_size: usize) -> Result<MetricReport> {
    let windows = data.windows(region, stride);
    if windows.is_empty() {
        return Err(Error::config("evaluation region holds no windows"));
    }
    let (mut mean, mut std, mut target, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        for (w, f) in chunk.iter().zip(model.predict_windows(&refs, data.max_train_year)?) {
            let f = f.destandardize(&data.standardizer);
            let mut y = w.target.clone();
            data.standardizer.invert(&mut y);
            mean.extend(f.mean);
            std.extend(f.std);
            target.extend(y);
            mask.extend(w.target_mask.iter().copied());
        }
    }
    MetricReport::compute(&mean, &std, &target, &mask)
}
