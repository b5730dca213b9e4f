//! Series frames, the synthetic toy dataset, CSV ingestion, per-variable
//! standardization, chronological splits and context/target windows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Timestamped multivariate series. `values` and `mask` are row-major
/// `[T, N]`; unobserved cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub names: Vec<String>,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Vec<f64>, mask: Vec<bool>, names: Vec<String>) -> Result<Self> {
        let (t, n) = (timestamps.len(), names.len());
        if n == 0 || t == 0 || values.len() != t * n || mask.len() != t * n {
            return Err(Error::contract(format!(
                "frame of {t} timestamps and {n} variables needs {} values and mask cells, got {} and {}",
                t * n,
                values.len(),
                mask.len()
            )));
        }
        if let Some(row) = (1..t).find(|&r| timestamps[r] <= timestamps[r - 1]) {
            return Err(Error::Ingest {
                row,
                column: Some("time".into()),
                msg: format!("timestamp {} does not follow {}", timestamps[row], timestamps[row - 1]),
            });
        }
        let values = values.into_iter().zip(&mask).map(|(v, &m)| if m { v } else { 0.0 }).collect();
        Ok(Self {
            timestamps,
            values,
            mask,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn vars(&self) -> usize {
        self.names.len()
    }

    pub fn value(&self, t: usize, var: usize) -> f64 {
        self.values[t * self.vars() + var]
    }

    pub fn observed(&self, t: usize, var: usize) -> bool {
        self.mask[t * self.vars() + var]
    }

    /// Context of `c` steps starting at `start`, followed by `h` target steps.
    pub fn window(&self, start: usize, c: usize, h: usize) -> WindowSample {
        let n = self.vars();
        let ctx = start * n..(start + c) * n;
        let tgt = (start + c) * n..(start + c + h) * n;
        WindowSample {
            start,
            context: self.values[ctx.clone()].to_vec(),
            context_mask: self.mask[ctx].to_vec(),
            target: self.values[tgt.clone()].to_vec(),
            target_mask: self.mask[tgt].to_vec(),
            context_times: self.timestamps[start..start + c].to_vec(),
            target_times: self.timestamps[start + c..start + c + h].to_vec(),
            vars: n,
        }
    }

    /// Writes the frame in the ingestion CSV format.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "time")?;
        for name in &self.names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for t in 0..self.len() {
            write!(out, "{}", self.timestamps[t].format(TIME_FORMAT))?;
            for v in 0..self.vars() {
                if self.observed(t, v) {
                    write!(out, ",{}", self.value(t, v))?;
                } else {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Largest calendar year among the timestamps in `rows`.
    pub fn max_year(&self, rows: Range<usize>) -> i32 {
        use chrono::Datelike;
        self.timestamps[rows].iter().map(|t| t.year()).max().unwrap_or(1)
    }
}

/// `Y[t][i] = sin(2 pi i t / period) + (1 / (D + 1)) * sum_{j != i} sin(2 pi j t / period)`
/// for 1-based series indices, on daily timestamps from `start`.
pub fn generate_toy(d: usize, t: usize, start: NaiveDateTime, period: f64) -> Result<SeriesFrame> {
    if d < 2 || t < 1 {
        return Err(Error::config(format!("toy data needs at least 2 variables and 1 step, got {d} and {t}")));
    }
    let coupling = 1.0 / (d as f64 + 1.0);
    let mut values = Vec::with_capacity(t * d);
    for step in 0..t {
        let waves: Vec<f64> = (1..=d).map(|j| (2.0 * std::f64::consts::PI * j as f64 * step as f64 / period).sin()).collect();
        let total: f64 = waves.iter().sum();
        values.extend(waves.iter().map(|&own| own + coupling * (total - own)));
    }
    let timestamps = (0..t).map(|s| start + Duration::days(s as i64)).collect();
    let names = (0..d).map(|i| format!("y{i}")).collect();
    SeriesFrame::new(timestamps, values, vec![true; t * d], names)
}

pub fn default_toy_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

pub const TOY_VARS: usize = 20;
pub const TOY_STEPS: usize = 2000;
pub const TOY_PERIOD: f64 = 64.0;

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .ok()
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

/// Reads a `time,<name_1>,...,<name_N>` CSV. Blank cells are missing.
/// Rows in errors count data rows from 1.
pub fn load_csv(path: &Path) -> Result<SeriesFrame> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.get(0).map(str::trim) != Some("time") || header.len() < 2 {
        return Err(Error::Ingest {
            row: 0,
            column: None,
            msg: "header must be `time,<name_1>,...,<name_N>`".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let (mut timestamps, mut values, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_error)?;
        if record.len() != names.len() + 1 {
            return Err(Error::Ingest {
                row,
                column: None,
                msg: format!("expected {} fields, found {}", names.len() + 1, record.len()),
            });
        }
        let time = record[0].trim();
        let ts = parse_time(time).ok_or_else(|| Error::Ingest {
            row,
            column: Some("time".into()),
            msg: format!("`{time}` is not an ISO-8601 date or datetime"),
        })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Ingest {
                    row,
                    column: Some("time".into()),
                    msg: format!("timestamp {ts} does not follow {prev}"),
                });
            }
        }
        timestamps.push(ts);
        for (cell, name) in record.iter().skip(1).zip(&names) {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(0.0);
                mask.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: Some(name.clone()),
                msg: format!("`{cell}` is not a number"),
            })?;
            values.push(v);
            mask.push(true);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Ingest {
            row: 1,
            column: None,
            msg: "no data rows".into(),
        });
    }
    SeriesFrame::new(timestamps, values, mask, names)
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Ingest {
            row,
            column: None,
            msg: format!("{other:?}"),
        },
    }
}

/// Per-variable affine standardization fitted on observed training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for zero-variance variables.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(frame: &SeriesFrame, rows: Range<usize>) -> Result<Self> {
        let n = frame.vars();
        let (mut mean, mut std) = (vec![0.0; n], vec![1.0; n]);
        for v in 0..n {
            let obs: Vec<f64> = rows.clone().filter(|&t| frame.observed(t, v)).map(|t| frame.value(t, v)).collect();
            if obs.is_empty() {
                return Err(Error::config(format!("variable `{}` has no observed training cells", frame.names[v])));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean[v] = m;
            if var.sqrt() > 1e-12 * m.abs().max(1.0) {
                std[v] = var.sqrt();
            }
        }
        Ok(Self { mean, std })
    }

    pub fn vars(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a row-major `[rows, N]` matrix in place; masked cells are
    /// set to 0.
    pub fn apply(&self, values: &mut [f64], mask: &[bool]) {
        let n = self.vars();
        for (i, (x, &m)) in values.iter_mut().zip(mask).enumerate() {
            let v = i % n;
            *x = if m { (*x - self.mean[v]) / self.std[v] } else { 0.0 };
        }
    }

    pub fn invert(&self, values: &mut [f64]) {
        let n = self.vars();
        for (i, x) in values.iter_mut().enumerate() {
            *x = *x * self.std[i % n] + self.mean[i % n];
        }
    }

    pub fn apply_frame(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut out = frame.clone();
        self.apply(&mut out.values, &frame.mask);
        out
    }

    pub fn invert_frame(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut out = frame.clone();
        self.invert(&mut out.values);
        for (x, &m) in out.values.iter_mut().zip(&frame.mask) {
            if !m {
                *x = 0.0;
            }
        }
        out
    }
}

/// Chronological train/validation/test fractions; test is the final segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.60,
            val: 0.15,
            test: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Regions {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `0..len` into contiguous regions, each holding at least one
/// window of `window_len = c + h` steps.
pub fn chronological_split(len: usize, spec: SplitSpec, window_len: usize) -> Result<Regions> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|&f| f <= 0.0 || !f.is_finite()) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1 (validation is required for early stopping), got {} / {} / {}",
            spec.train, spec.val, spec.test
        )));
    }
    let train_end = (spec.train * len as f64).round() as usize;
    let val_end = ((spec.train + spec.val) * len as f64).round() as usize;
    let regions = Regions {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..len,
    };
    for (name, r) in [("train", &regions.train), ("validation", &regions.val), ("test", &regions.test)] {
        if r.len() < window_len {
            return Err(Error::config(format!("{name} region has {} steps but one window needs {window_len}", r.len())));
        }
    }
    Ok(regions)
}

/// One context window and the horizon that follows it. Matrices are
/// row-major `[steps, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    pub context: Vec<f64>,
    pub context_mask: Vec<bool>,
    pub target: Vec<f64>,
    pub target_mask: Vec<bool>,
    pub context_times: Vec<NaiveDateTime>,
    pub target_times: Vec<NaiveDateTime>,
    pub vars: usize,
}

impl WindowSample {
    pub fn context_len(&self) -> usize {
        self.context_times.len()
    }

    pub fn horizon(&self) -> usize {
        self.target_times.len()
    }
}

/// Start indices of windows inside `region`: `floor((len - c - h) / stride) + 1`
/// of them, or none if the region is shorter than one window.
pub fn window_starts(region: Range<usize>, c: usize, h: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    if region.len() < c + h {
        return Vec::new();
    }
    (region.start..=region.end - c - h).step_by(stride).collect()
}

pub fn sample_windows(frame: &SeriesFrame, region: Range<usize>, c: usize, h: usize, stride: usize) -> impl Iterator<Item = WindowSample> + '_ {
    window_starts(region, c, h, stride).into_iter().map(move |s| frame.window(s, c, h))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toy(d: usize, t: usize) -> SeriesFrame {
        generate_toy(d, t, default_toy_start(), TOY_PERIOD).unwrap()
    }

    #[test]
    fn toy_starts_at_zero() {
        let f = toy(5, 3);
        assert!((0..5).all(|v| f.value(0, v) == 0.0));
    }

    #[test]
    fn toy_formula_at_quarter_period() {
        let f = toy(2, 20);
        let expected = 1.0 + (1.0 / 3.0) * std::f64::consts::PI.sin();
        assert!((f.value(16, 0) - expected).abs() < 1e-15);
        assert!((f.value(16, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toy_default_shape_and_dates() {
        let f = toy(TOY_VARS, TOY_STEPS);
        assert_eq!((f.len(), f.vars()), (2000, 20));
        assert!(f.mask.iter().all(|&m| m));
        assert_eq!(f.timestamps[1] - f.timestamps[0], Duration::days(1));
        assert_eq!(f.timestamps[0], default_toy_start());
    }

    #[test]
    fn toy_is_periodic() {
        let f = toy(20, 300);
        for t in 0..300 - 64 {
            for v in 0..20 {
                assert!((f.value(t, v) - f.value(t + 64, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "time,a,b\n2020-01-01,1.5,2\n2020-01-02T06:00:00,,3\n2020-01-03,4,-1e-3\n").unwrap();
        let f = load_csv(&path).unwrap();
        assert_eq!(f.names, ["a", "b"]);
        assert_eq!(f.mask.iter().filter(|&&m| !m).count(), 1);
        assert!(!f.observed(1, 0));
        assert_eq!(f.value(1, 0), 0.0);
        assert_eq!(f.value(2, 1), -1e-3);
        let out = dir.path().join("e.csv");
        f.write_csv(&out).unwrap();
        assert_eq!(load_csv(&out).unwrap(), f);
    }

    #[test]
    fn csv_duplicate_timestamp_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "time,a\n2020-01-01,1\n2020-01-02,2\n2020-01-02,3\n").unwrap();
        match load_csv(&path) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "time,a,b\n2020-01-01,1,2\n2020-01-02,x,2\n").unwrap();
        match load_csv(&path) {
            Err(Error::Ingest { row, column, .. }) => assert_eq!((row, column.as_deref()), (2, Some("a"))),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv(&dir.path().join("none.csv")), Err(Error::MissingFile(_))));
    }

    fn frame_from(values: Vec<f64>, n: usize) -> SeriesFrame {
        let t = values.len() / n;
        let ts = (0..t).map(|i| default_toy_start() + Duration::days(i as i64)).collect();
        SeriesFrame::new(ts, values, vec![true; t * n], (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn standardizer_constant_variable() {
        let f = frame_from(vec![7.0; 4], 1);
        let s = Standardizer::fit(&f, 0..4).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (7.0, 1.0));
        assert!(s.apply_frame(&f).values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn standardizer_population_statistics() {
        let f = frame_from(vec![0.0, 2.0], 1);
        let s = Standardizer::fit(&f, 0..2).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert_eq!(s.apply_frame(&f).values, [-1.0, 1.0]);
    }

    #[test]
    fn standardizer_needs_observations() {
        let ts = vec![default_toy_start()];
        let f = SeriesFrame::new(ts, vec![1.0], vec![false], vec!["a".into()]).unwrap();
        assert!(matches!(Standardizer::fit(&f, 0..1), Err(Error::Config(_))));
    }

    #[test]
    fn split_arithmetic() {
        let r = chronological_split(2000, SplitSpec::default(), 160).unwrap();
        assert_eq!(
            r,
            Regions {
                train: 0..1200,
                val: 1200..1500,
                test: 1500..2000
            }
        );
        let no_val = SplitSpec {
            train: 0.75,
            val: 0.0,
            test: 0.25,
        };
        assert!(matches!(chronological_split(2000, no_val, 160), Err(Error::Config(_))));
        assert!(matches!(chronological_split(100, SplitSpec::default(), 160), Err(Error::Config(_))));
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(0..160, 128, 32, 1).len(), 1);
        assert_eq!(window_starts(0..162, 128, 32, 1).len(), 3);
        assert_eq!(window_starts(0..200, 128, 32, 10).len(), 5);
    }

    #[test]
    fn windows_are_adjacent() {
        let f = toy(3, 50);
        let w = f.window(5, 4, 2);
        assert_eq!(w.context_times[3] + Duration::days(1), w.target_times[0]);
        assert_eq!(w.context[0..3], f.values[15..18]);
        assert_eq!(w.target[0..3], f.values[27..30]);
    }

    proptest! {
        #[test]
        fn windows_stay_inside_their_region(start in 0usize..50, len in 0usize..200, c in 1usize..20, h in 1usize..10, stride in 1usize..7) {
            let region = start..start + len;
            let starts = window_starts(region.clone(), c, h, stride);
            let expected = if len >= c + h { (len - c - h) / stride + 1 } else { 0 };
            prop_assert_eq!(starts.len(), expected);
            for s in starts {
                prop_assert!(s >= region.start && s + c + h <= region.end);
            }
        }

        #[test]
        fn standardize_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 30)) {
            let f = frame_from(values, 3);
            let s = Standardizer::fit(&f, 0..6).unwrap();
            let back = s.invert_frame(&s.apply_frame(&f));
            for (a, b) in back.values.iter().zip(&f.values) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn standardized_training_region_has_unit_moments(values in proptest::collection::vec(-50f64..50.0, 40)) {
            let f = frame_from(values, 2);
            let s = Standardizer::fit(&f, 0..15).unwrap();
            let g = s.apply_frame(&f);
            for v in 0..2 {
                let xs: Vec<f64> = (0..15).map(|t| g.value(t, v)).collect();
                let m = xs.iter().sum::<f64>() / 15.0;
                let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 15.0).sqrt();
                prop_assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
            }
        }
    }
}
