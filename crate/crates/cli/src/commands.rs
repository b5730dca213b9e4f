use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use stfm_core::baselines::{self, ArMeta, LinearAr};
use stfm_core::checkpoint::Container;
use stfm_core::dataflow::{
    chronological_split, default_toy_start, generate_toy, load_csv, SeriesFrame, SplitSpec, Standardizer, WindowSample, TIME_FORMAT, TOY_PERIOD,
};
use stfm_core::forecaster::{self, ForecastOutput, Forecaster, ModelMeta, Which};
use stfm_core::tensor::Tensor;
use stfm_core::training::{evaluate, train, write_history, MetricReport, Predict, PreparedData};
use stfm_core::{Error, Result};

use crate::config::{ModelKind, RunConfig};

pub const CHECKPOINT_FILE: &str = "best.stfm";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

pub fn toy_gen(vars: usize, steps: usize, out: &Path) -> Result<()> {
    generate_toy(vars, steps, default_toy_start(), TOY_PERIOD)?.write_csv(out)
}

pub fn train_run(cfg: &RunConfig) -> Result<()> {
    let data_path = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no data file given (set `data` or pass --data)".into()))?;
    let raw = load_csv(data_path)?;
    let data = PreparedData::new(&raw, cfg.context_len, cfg.target_len, cfg.split)?;
    cfg.train.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut progress = |r: &stfm_core::training::HistoryRow| {
        eprintln!(
            "step {} epoch {} train_loss {:.6} val_loss {:.6} lr {:.3e}{}",
            r.step,
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            r.probe_acc.map(|a| format!(" probe_acc {a:.4}")).unwrap_or_default()
        )
    };
    let mut lines = vec![format!("model={}", cfg.model_kind.name())];
    let (history, report, container) = match cfg.model_kind {
        ModelKind::Forecaster => {
            let model = Forecaster::<f32>::build(cfg.model.clone(), raw.vars(), cfg.train.seed)?;
            lines.push(format!("mode={}", model.config.mode.name()));
            lines.push(format!("params={}", model.param_count()));
            let mut outcome = train(model, &data, &cfg.train, &mut progress)?;
            let report = evaluate(&mut outcome.best, &data, data.regions.test.clone(), 1, EVAL_BATCH)?;
            let meta = ModelMeta {
                config: outcome.best.config.clone(),
                names: raw.names.clone(),
                context_len: cfg.context_len,
                horizon: cfg.target_len,
                max_train_year: data.max_train_year,
                standardizer: data.standardizer.clone(),
                split: cfg.split,
            };
            lines.push(format!("best_val_loss={}", outcome.best_val));
            lines.push(format!("stopped_early={}", outcome.stopped_early));
            (outcome.history, report, outcome.best.to_container(&meta)?)
        }
        ModelKind::LinearAr => {
            let (mut model, history) = LinearAr::fit(&data, &cfg.train, &mut progress)?;
            lines.push(format!("params={}", model.weights.len()));
            let report = evaluate(&mut model, &data, data.regions.test.clone(), 1, EVAL_BATCH)?;
            let meta = ArMeta {
                names: raw.names.clone(),
                context_len: cfg.context_len,
                horizon: cfg.target_len,
                max_train_year: data.max_train_year,
                standardizer: data.standardizer.clone(),
                split: cfg.split,
            };
            (history, report, model.to_container(&meta)?)
        }
    };
    container.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    write_history(&cfg.out_dir.join(HISTORY_FILE), &history)?;
    let text = lines.iter().map(|l| format!("{l}\n")).collect::<String>() + &report.to_key_values();
    fs::write(cfg.out_dir.join(REPORT_FILE), text)?;
    print!("{}", report.to_key_values());
    Ok(())
}

/// A loaded checkpoint of either model family.
pub enum Loaded {
    Forecaster(Box<Forecaster<f32>>, ModelMeta),
    LinearAr(LinearAr, ArMeta),
}

/// Geometry shared by both checkpoint families.
struct Geometry<'a> {
    names: &'a [String],
    context_len: usize,
    horizon: usize,
    max_train_year: i32,
    standardizer: &'a Standardizer,
    split: SplitSpec,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        match c.section.as_str() {
            forecaster::CHECKPOINT_SECTION => {
                let (m, meta) = Forecaster::from_container(&c)?;
                Ok(Loaded::Forecaster(Box::new(m), meta))
            }
            baselines::CHECKPOINT_SECTION => {
                let (m, meta) = LinearAr::from_container(&c)?;
                Ok(Loaded::LinearAr(m, meta))
            }
            other => Err(Error::Checkpoint(format!("unknown model family `{other}`"))),
        }
    }

    fn geometry(&self) -> Geometry<'_> {
        match self {
            Loaded::Forecaster(_, m) => Geometry {
                names: &m.names,
                context_len: m.context_len,
                horizon: m.horizon,
                max_train_year: m.max_train_year,
                standardizer: &m.standardizer,
                split: m.split,
            },
            Loaded::LinearAr(_, m) => Geometry {
                names: &m.names,
                context_len: m.context_len,
                horizon: m.horizon,
                max_train_year: m.max_train_year,
                standardizer: &m.standardizer,
                split: m.split,
            },
        }
    }

    fn predictor(&mut self) -> &mut dyn Predict {
        match self {
            Loaded::Forecaster(m, _) => m.as_mut(),
            Loaded::LinearAr(m, _) => m,
        }
    }

    /// Standardizes `raw` with the checkpoint's training statistics after
    /// checking that its variables match.
    fn prepare(&self, raw: &SeriesFrame) -> Result<PreparedData> {
        let g = self.geometry();
        if raw.vars() != g.names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} variables but the data has {}",
                g.names.len(),
                raw.vars()
            )));
        }
        if raw.names != g.names {
            return Err(Error::Config(format!("variable names differ: checkpoint {:?}, data {:?}", g.names, raw.names)));
        }
        Ok(PreparedData {
            frame: g.standardizer.apply_frame(raw),
            standardizer: g.standardizer.clone(),
            regions: chronological_split(raw.len(), g.split, g.context_len + g.horizon)?,
            context_len: g.context_len,
            horizon: g.horizon,
            max_train_year: g.max_train_year,
        })
    }
}

pub fn eval(ckpt: &Path, data_path: &Path, out: Option<&Path>) -> Result<MetricReport> {
    let mut loaded = Loaded::open(ckpt)?;
    let data = loaded.prepare(&load_csv(data_path)?)?;
    let report = evaluate(loaded.predictor(), &data, data.regions.test.clone(), 1, EVAL_BATCH)?;
    if let Some(out) = out {
        fs::write(out, report.to_key_values())?;
    }
    Ok(report)
}

/// Forecast window starting at row `start`, or one past the end of the data
/// when `start` is `None`. Future timestamps continue the final spacing.
fn forecast_window(data: &PreparedData, start: Option<usize>) -> Result<WindowSample> {
    let (c, h, frame) = (data.context_len, data.horizon, &data.frame);
    match start {
        Some(s) if s + c + h <= frame.len() => Ok(frame.window(s, c, h)),
        Some(s) => Err(Error::Config(format!(
            "window at row {s} needs {} rows, the data has {}",
            s + c + h,
            frame.len()
        ))),
        None => {
            if frame.len() < c.max(2) {
                return Err(Error::Config(format!(
                    "forecasting needs at least {} rows, the data has {}",
                    c.max(2),
                    frame.len()
                )));
            }
            let s = frame.len() - c;
            let mut w = frame.window(s, c, 0);
            let n = frame.vars();
            let last = frame.timestamps[frame.len() - 1];
            let step = last - frame.timestamps[frame.len() - 2];
            w.target = vec![0.0; h * n];
            w.target_mask = vec![false; h * n];
            w.target_times = (1..=h as i32).map(|k| last + step * k).collect();
            Ok(w)
        }
    }
}

pub fn forecast(ckpt: &Path, data_path: &Path, out: &Path, start: Option<usize>) -> Result<()> {
    let mut loaded = Loaded::open(ckpt)?;
    let data = loaded.prepare(&load_csv(data_path)?)?;
    let window = forecast_window(&data, start)?;
    let f: ForecastOutput = loaded
        .predictor()
        .predict_windows(&[&window], data.max_train_year)?
        .remove(0)
        .destandardize(&data.standardizer);
    let mut w = csv::Writer::from_path(out).map_err(csv_error)?;
    let names = &data.frame.names;
    let header: Vec<String> = std::iter::once("time".to_string())
        .chain(names.iter().flat_map(|n| [format!("{n}_mean"), format!("{n}_std")]))
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for (t, time) in window.target_times.iter().enumerate() {
        let mut row = vec![time.format(TIME_FORMAT).to_string()];
        for v in 0..f.vars {
            row.push(f.mean[t * f.vars + v].to_string());
            row.push(f.std[t * f.vars + v].to_string());
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("{other:?}")),
    }
}

pub struct AttnRequest<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub window: usize,
    pub layer: usize,
    pub head: usize,
    pub which: Which,
    pub out: &'a Path,
    pub pgm: Option<&'a Path>,
}

pub fn attn(req: &AttnRequest) -> Result<Tensor<f32>> {
    let loaded = Loaded::open(req.ckpt)?;
    let data = loaded.prepare(&load_csv(req.data)?)?;
    let Loaded::Forecaster(mut model, meta) = loaded else {
        return Err(Error::Config("attention maps need a forecaster checkpoint".into()));
    };
    let window = forecast_window(&data, Some(req.window))?;
    let m = model.attention_matrix(&window, meta.max_train_year, req.layer, req.head, req.which)?;
    let mut out = BufWriter::new(File::create(req.out)?);
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    if let Some(path) = req.pgm {
        write_pgm(&m, path)?;
    }
    Ok(m)
}

/// Grayscale P2 image of a matrix, scaled per row: 0 is white and the row
/// maximum is black.
pub fn write_pgm(m: &Tensor<f32>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "P2\n{} {}\n255", m.cols(), m.rows())?;
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(0.0f32, f32::max);
        let px: Vec<String> = row
            .iter()
            .map(|&x| {
                let shade = if max > 0.0 { (x.max(0.0) / max * 255.0).round() as u32 } else { 0 };
                (255 - shade.min(255)).to_string()
            })
            .collect();
        writeln!(out, "{}", px.join(" "))?;
    }
    out.flush()?;
    Ok(())
}
