//! Series ingestion, chronological splitting, standardization and windowing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{config_err, Error, Result};

/// A multichannel series stored time-major: `values[t * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    len: usize,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, channel_names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let n = channel_names.len();
        if n == 0 || values.len() % n != 0 {
            return Err(config_err!(
                "{} values do not fill {} channels",
                values.len(),
                n
            ));
        }
        let len = values.len() / n;
        if len < 2 {
            return Err(config_err!("series needs at least 2 time steps, got {len}"));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != len {
                return Err(config_err!("{} timestamps for {} rows", ts.len(), len));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(config_err!(
                "non-finite value at row {}, channel {}",
                i / n + 1,
                channel_names[i % n]
            ));
        }
        Ok(RawSeries {
            values,
            len,
            channel_names,
            timestamps,
        })
    }

    pub fn univariate(values: Vec<f64>, name: &str) -> Result<Self> {
        Self::new(values, vec![name.to_string()], None)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.at(t, c)).collect()
    }

    /// Rows `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let n = self.channels();
        RawSeries {
            values: self.values[start * n..end * n].to_vec(),
            len: end - start,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
        }
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![self.len, self.channels()], self.values.clone()).expect("series shape")
    }

    /// Writes a header row (`date` first when timestamps exist) followed by one row per step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = Vec::new();
        if self.timestamps.is_some() {
            header.push("date");
        }
        header.extend(self.channel_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for t in 0..self.len {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                row.push(ts[t].clone());
            }
            row.extend((0..self.channels()).map(|c| format!("{}", self.at(t, c))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a headed CSV. With `has_date_column`, the first column is kept as timestamps.
/// Rows in errors are 1-based data rows (the header is not counted).
pub fn load_csv(path: &Path, has_date_column: bool) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let skip = usize::from(has_date_column);
    if headers.len() <= skip {
        return Err(Error::Load {
            path: path.to_path_buf(),
            row: 0,
            column: String::new(),
            reason: "no numeric columns in header".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(skip).map(str::to_string).collect();
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Load {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            reason: e.to_string(),
        })?;
        if has_date_column {
            stamps.push(record.get(0).unwrap_or_default().to_string());
        }
        for (c, name) in names.iter().enumerate() {
            let cell = record.get(c + skip).unwrap_or_default().trim();
            let v: f64 = cell.parse().map_err(|_| Error::Load {
                path: path.to_path_buf(),
                row,
                column: name.clone(),
                reason: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    row,
                    column: name.clone(),
                    reason: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    let timestamps = has_date_column.then_some(stamps);
    RawSeries::new(values, names, timestamps).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        row: 0,
        column: String::new(),
        reason: e.to_string(),
    })
}

/// Train / validation / test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = SplitSpec { train, val, test };
        s.validate()?;
        Ok(s)
    }

    /// The ETT convention.
    pub fn ett() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(config_err!("split fractions must all be > 0, got {:?}", parts));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions sum to {total}, expected 1"));
        }
        Ok(())
    }
}

/// Row boundaries: train `[0, train_end)`, val `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitBounds {
    /// Rows a split's windows are drawn from. Validation and test windows reach
    /// back `lookback` rows across their start boundary for history context.
    pub fn window_rows(&self, split: Split, lookback: usize) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end.saturating_sub(lookback), self.val_end),
            Split::Test => (self.val_end.saturating_sub(lookback), self.len),
        }
    }
}

fn floor_fraction(frac: f64, len: usize) -> usize {
    // guard against 0.6 * 100 = 60.000000000000007 style representation error
    (frac * len as f64 + 1e-9).floor() as usize
}

/// Chronological split by cumulative fractions. Each split must hold at least one
/// `lookback + horizon` window.
pub fn split(len: usize, spec: &SplitSpec, lookback: usize, horizon: usize) -> Result<SplitBounds> {
    spec.validate()?;
    let bounds = SplitBounds {
        train_end: floor_fraction(spec.train, len),
        val_end: floor_fraction(spec.train + spec.val, len),
        len,
    };
    let need = lookback + horizon;
    for s in [Split::Train, Split::Val, Split::Test] {
        let (a, b) = bounds.window_rows(s, lookback);
        if b - a < need {
            return Err(config_err!(
                "{:?} segment has {} rows, needs at least {} for one window",
                s,
                b - a,
                need
            ));
        }
    }
    Ok(bounds)
}

/// Per-channel standardization fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Scaler {
    /// Population statistics over `train` rows, std floored at [`STD_FLOOR`].
    pub fn fit(train: &RawSeries) -> Self {
        let n = train.channels();
        let t = train.len() as f64;
        let mut mean = vec![0.0; n];
        for row in train.values.chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t);
        let mut var = vec![0.0; n];
        for row in train.values.chunks(n) {
            for c in 0..n {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / t).sqrt().max(STD_FLOOR)).collect();
        Scaler { mean, std }
    }

    pub fn transform(&self, series: &RawSeries) -> RawSeries {
        let n = series.channels();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % n]) / self.std[i % n])
            .collect();
        RawSeries {
            values,
            ..series.clone()
        }
    }

    pub fn inverse(&self, series: &RawSeries) -> RawSeries {
        let n = series.channels();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % n] + self.mean[i % n])
            .collect();
        RawSeries {
            values,
            ..series.clone()
        }
    }

    pub fn inverse_value(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Paired history/future windows over a (scaled) segment.
///
/// Window `i` has history rows `[o_i, o_i + L)` and future rows `[o_i + L, o_i + L + H)`
/// of `series`, where `o_i = i * stride`. Channels are treated independently: a batch of
/// windows becomes `windows × channels` univariate samples.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    series: RawSeries,
    lookback: usize,
    horizon: usize,
    origins: Vec<usize>,
    /// Row of `series[0]` in the full, unsplit series.
    pub offset: usize,
}

pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || len < lookback + horizon {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize, stride: usize) -> Result<WindowDataset> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(config_err!("lookback, horizon and stride must be positive"));
    }
    let n = window_count(series.len(), lookback, horizon, stride);
    if n == 0 {
        return Err(config_err!(
            "segment of {} rows is too short for lookback {} + horizon {}",
            series.len(),
            lookback,
            horizon
        ));
    }
    Ok(WindowDataset {
        series: series.clone(),
        lookback,
        horizon,
        origins: (0..n).map(|i| i * stride).collect(),
        offset: 0,
    })
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    /// History of window `i`, channel `c`.
    pub fn x(&self, i: usize, c: usize) -> Vec<f64> {
        let o = self.origins[i];
        (o..o + self.lookback).map(|t| self.series.at(t, c)).collect()
    }

    /// Future of window `i`, channel `c`.
    pub fn y(&self, i: usize, c: usize) -> Vec<f64> {
        let o = self.origins[i] + self.lookback;
        (o..o + self.horizon).map(|t| self.series.at(t, c)).collect()
    }

    /// Channel-independent batch: rows ordered window-major, then channel.
    /// Returns `(x: [B·N, L], y: [B·N, H])`.
    pub fn batch(&self, windows: &[usize]) -> (Array, Array) {
        let n = self.channels();
        let rows = windows.len() * n;
        let mut xs = Vec::with_capacity(rows * self.lookback);
        let mut ys = Vec::with_capacity(rows * self.horizon);
        for &i in windows {
            for c in 0..n {
                xs.extend(self.x(i, c));
                ys.extend(self.y(i, c));
            }
        }
        (
            Array::new(vec![rows, self.lookback], xs).expect("batch x"),
            Array::new(vec![rows, self.horizon], ys).expect("batch y"),
        )
    }

    /// Absolute row (in the unsplit series) of the first future step of window `i`.
    pub fn future_start(&self, i: usize) -> usize {
        self.offset + self.origins[i] + self.lookback
    }
}

/// A scaled, split dataset ready for training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub bounds: SplitBounds,
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

impl PreparedData {
    pub fn split(&self, s: Split) -> &WindowDataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Split, fit the scaler on train rows, scale everything, and window each split.
pub fn prepare(series: &RawSeries, spec: &SplitSpec, lookback: usize, horizon: usize, stride: usize) -> Result<PreparedData> {
    let bounds = split(series.len(), spec, lookback, horizon)?;
    let scaler = Scaler::fit(&series.slice(0, bounds.train_end));
    let scaled = scaler.transform(series);
    let window = |s: Split, stride: usize| -> Result<WindowDataset> {
        let (a, b) = bounds.window_rows(s, lookback);
        let mut w = make_windows(&scaled.slice(a, b), lookback, horizon, stride)?;
        w.offset = a;
        Ok(w)
    };
    Ok(PreparedData {
        train: window(Split::Train, stride)?,
        // evaluation splits are always dense
        val: window(Split::Val, 1)?,
        test: window(Split::Test, 1)?,
        scaler,
        bounds,
    })
}

/// Two-tone sinusoid with noise whose std alternates between regimes of fixed length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub amp1: f64,
    pub amp2: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub window_period: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            amp1: 1.0,
            amp2: 0.5,
            omega1: 2.0 * std::f64::consts::PI / 48.0,
            omega2: 2.0 * std::f64::consts::PI / 17.0,
            sigma1: 1.0,
            sigma2: 0.1,
            window_period: 200,
            length: 4000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return Err(config_err!("noise std must be non-negative"));
        }
        if self.window_period == 0 {
            return Err(config_err!("window_period must be positive"));
        }
        if self.length < 2 {
            return Err(config_err!("synthetic length must be at least 2"));
        }
        Ok(())
    }

    pub fn ground_truth(&self, t: usize) -> f64 {
        let x = t as f64;
        self.amp1 * (self.omega1 * x).sin() + self.amp2 * (self.omega2 * x).sin()
    }

    /// 0 for the `sigma1` regimes, 1 for the `sigma2` regimes.
    pub fn regime(&self, t: usize) -> usize {
        (t / self.window_period) % 2
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        if self.regime(t) == 0 {
            self.sigma1
        } else {
            self.sigma2
        }
    }
}

pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let values = (0..cfg.length)
        .map(|t| cfg.ground_truth(t) + cfg.sigma_at(t) * unit.sample(&mut rng))
        .collect();
    let stamps = (0..cfg.length).map(|t| t.to_string()).collect();
    RawSeries::new(values, vec!["y".to_string()], Some(stamps))
}
