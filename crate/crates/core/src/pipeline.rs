//! Data ingestion, windowing, normalization, synthetic series, the Adam
//! training loop with early stopping, and evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autograd::{Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const DATETIME_FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"];
const DATE_FORMAT: &str = "%Y-%m-%d";

/// How the first CSV column was written, so forecasts can be stamped alike.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeFormat {
    /// Calendar time with a chrono format string.
    DateTime(String),
    Rfc3339,
    /// Plain numbers.
    Numeric,
}

/// Parsed time axis in seconds (or raw units for numeric stamps).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAxis {
    pub format: TimeFormat,
    pub values: Vec<f64>,
}

fn parse_time(s: &str) -> Option<(f64, TimeFormat)> {
    for f in DATETIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some((t.and_utc().timestamp() as f64, TimeFormat::DateTime((*f).to_string())));
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, DATE_FORMAT) {
        let t = d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64;
        return Some((t, TimeFormat::DateTime(DATE_FORMAT.to_string())));
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some((t.timestamp() as f64, TimeFormat::Rfc3339));
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| (v, TimeFormat::Numeric))
}

impl TimeAxis {
    /// Median spacing of the stamps; 1 when fewer than two.
    pub fn interval(&self) -> f64 {
        let mut gaps: Vec<f64> = self.values.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return 1.0;
        }
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    }

    /// `count` stamps continuing after the last one at the median spacing.
    pub fn extrapolate(&self, count: usize) -> Vec<String> {
        let last = self.values.last().copied().unwrap_or(0.0);
        let step = self.interval();
        (1..=count).map(|i| self.format_value(last + step * i as f64)).collect()
    }

    pub fn format_value(&self, v: f64) -> String {
        match &self.format {
            TimeFormat::Numeric => format!("{v}"),
            TimeFormat::DateTime(f) => DateTime::from_timestamp(v.round() as i64, 0)
                .map(|t| t.naive_utc().format(f).to_string())
                .unwrap_or_else(|| format!("{v}")),
            TimeFormat::Rfc3339 => DateTime::from_timestamp(v.round() as i64, 0)
                .map(|t| t.to_rfc3339())
                .unwrap_or_else(|| format!("{v}")),
        }
    }
}

/// A multivariate series with its time axis and feature names.
#[derive(Clone, Debug)]
pub struct Series {
    pub time: TimeAxis,
    pub names: Vec<String>,
    pub values: Tensor,
}

/// Reads a CSV whose first column is a timestamp and whose remaining columns
/// are numeric features. Rows and columns in errors are 1-based, counting the
/// header as row 1.
pub fn load_csv(path: &Path) -> Result<Series> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: headers.len(),
            message: "need a timestamp column and at least one feature".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let d = names.len();
    let mut data = Vec::new();
    let mut stamps = Vec::new();
    let mut format = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(d + 1),
                message: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let ts = rec.get(0).unwrap_or("").trim();
        let Some((t, f)) = parse_time(ts) else {
            return Err(Error::Parse { row, column: 1, message: format!("unparseable timestamp {ts:?}") });
        };
        format.get_or_insert(f);
        stamps.push(t);
        for c in 0..d {
            let cell = rec.get(c + 1).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::Parse { row, column: c + 2, message: "missing value".into() });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 2,
                message: format!("not a number: {cell:?}"),
            })?;
            data.push(v);
        }
    }
    if stamps.is_empty() {
        return Err(Error::Parse { row: 2, column: 1, message: "no data rows".into() });
    }
    if let Some(i) = stamps.windows(2).position(|w| w[1] <= w[0]) {
        log::warn!("{}: timestamps not increasing at data row {}", path.display(), i + 3);
    }
    Ok(Series {
        time: TimeAxis { format: format.expect("at least one row"), values: stamps.clone() },
        names,
        values: Tensor::new(&[stamps.len(), d], data)?,
    })
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per column; a zero deviation
    /// becomes 1.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let [t, d] = x.dims2("Normalizer::fit")?;
        let mut mean = vec![0.0; d];
        for r in 0..t {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += x.data()[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; d];
        for r in 0..t {
            for c in 0..d {
                let e = x.data()[r * d + c] - mean[c];
                var[c] += e * e;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / t as f64).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let [_, d] = x.dims2("Normalizer")?;
        if d != self.dim() {
            return Err(Error::Shape { op: "Normalizer", detail: format!("{d} features vs {} statistics", self.dim()) });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }
}

/// One (input, target) pair in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub input_len: usize,
    pub pred_len: usize,
    pub norm: Normalizer,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    /// Row ranges of the three splits in the raw series.
    pub bounds: [(usize, usize); 3],
}

impl WindowedDataset {
    pub fn split(&self, s: Split) -> &[Window] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

/// Contiguous chronological split by `ratios` (normalized to sum 1), then
/// stride-1 windows inside each split, normalized with train statistics.
pub fn make_windows(series: &Tensor, input_len: usize, pred_len: usize, ratios: [f64; 3]) -> Result<WindowedDataset> {
    let [t, _] = series.dims2("make_windows")?;
    let need = input_len + pred_len;
    if t < need {
        return Err(Error::SeriesTooShort { len: t, need });
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument(format!("bad split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let train_end = ((t as f64) * ratios[0] / total).round() as usize;
    let val_end = ((t as f64) * (ratios[0] + ratios[1]) / total).round() as usize;
    let bounds = [(0, train_end), (train_end, val_end), (val_end, t)];
    if train_end == 0 {
        return Err(Error::SeriesTooShort { len: t, need });
    }
    let norm = Normalizer::fit(&series.slice_first(0, train_end)?)?;
    let normalized = norm.normalize(series)?;
    let windows = |(lo, hi): (usize, usize)| -> Result<Vec<Window>> {
        if hi < lo + need {
            return Ok(Vec::new());
        }
        (lo..=hi - need)
            .map(|s| {
                Ok(Window {
                    start: s,
                    input: normalized.slice_first(s, s + input_len)?,
                    target: normalized.slice_first(s + input_len, s + need)?,
                })
            })
            .collect()
    };
    Ok(WindowedDataset {
        input_len,
        pred_len,
        train: windows(bounds[0])?,
        val: windows(bounds[1])?,
        test: windows(bounds[2])?,
        norm,
        bounds,
    })
}

/// One additive component of a synthetic feature.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    /// `amplitude·sin(2π·freq·t + phase)`, `freq` in cycles per step.
    Sinusoid { freq: f64, amplitude: f64, phase: f64 },
    LinearTrend { slope: f64 },
    LevelShift { at: usize, by: f64 },
    Noise { sigma: f64 },
    /// Continuous piecewise-linear trend whose slope alternates between
    /// `slope_a` and `slope_b` every `period/2` steps.
    Regimes { period: usize, slope_a: f64, slope_b: f64 },
}

/// Per-feature component lists, written `sin(f,a,p)+trend(s);noise(σ)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SynthSpec {
    pub features: Vec<Vec<Component>>,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sinusoid { freq, amplitude, phase } => write!(f, "sin({freq},{amplitude},{phase})"),
            Self::LinearTrend { slope } => write!(f, "trend({slope})"),
            Self::LevelShift { at, by } => write!(f, "shift({at},{by})"),
            Self::Noise { sigma } => write!(f, "noise({sigma})"),
            Self::Regimes { period, slope_a, slope_b } => write!(f, "regimes({period},{slope_a},{slope_b})"),
        }
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let feats: Vec<String> = self
            .features
            .iter()
            .map(|cs| {
                if cs.is_empty() {
                    "zero".to_string()
                } else {
                    cs.iter().map(Component::to_string).collect::<Vec<_>>().join("+")
                }
            })
            .collect();
        write!(f, "{}", feats.join(";"))
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad synthetic component {s:?}"));
        let s = s.trim();
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<&str> = args.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> { nums.get(i).and_then(|v| v.parse().ok()).ok_or_else(bad) };
        let int = |i: usize| -> Result<usize> { nums.get(i).and_then(|v| v.parse().ok()).ok_or_else(bad) };
        let arity = |n: usize| if nums.len() == n { Ok(()) } else { Err(bad()) };
        Ok(match name.trim() {
            "sin" => {
                arity(3)?;
                Self::Sinusoid { freq: num(0)?, amplitude: num(1)?, phase: num(2)? }
            }
            "trend" => {
                arity(1)?;
                Self::LinearTrend { slope: num(0)? }
            }
            "shift" => {
                arity(2)?;
                Self::LevelShift { at: int(0)?, by: num(1)? }
            }
            "noise" => {
                arity(1)?;
                Self::Noise { sigma: num(0)? }
            }
            "regimes" => {
                arity(3)?;
                let period = int(0)?;
                if period < 2 {
                    return Err(bad());
                }
                Self::Regimes { period, slope_a: num(1)?, slope_b: num(2)? }
            }
            _ => return Err(bad()),
        })
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let features = s
            .split(';')
            .map(|feat| {
                let feat = feat.trim();
                if feat == "zero" {
                    return Ok(Vec::new());
                }
                feat.split('+').map(str::parse).collect::<Result<Vec<Component>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if features.is_empty() {
            return Err(Error::Config("synthetic spec has no features".into()));
        }
        Ok(Self { features })
    }
}

/// Sums each feature's components over `t = 0..len`. Noise for feature `j`
/// is drawn from stream `j` of a ChaCha generator keyed by `seed`.
pub fn synth_series(spec: &SynthSpec, len: usize, seed: u64) -> Result<Tensor> {
    let d = spec.features.len();
    if d == 0 || len == 0 {
        return Err(Error::InvalidArgument("synthetic series needs a feature and a positive length".into()));
    }
    let mut out = Tensor::zeros(&[len, d]);
    for (j, comps) in spec.features.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for c in comps {
            for t in 0..len {
                let tf = t as f64;
                let v = match *c {
                    Component::Sinusoid { freq, amplitude, phase } => {
                        amplitude * (2.0 * std::f64::consts::PI * freq * tf + phase).sin()
                    }
                    Component::LinearTrend { slope } => slope * tf,
                    Component::LevelShift { at, by } => {
                        if t >= at {
                            by
                        } else {
                            0.0
                        }
                    }
                    Component::Noise { sigma } => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z
                    }
                    Component::Regimes { period, slope_a, slope_b } => regime_value(t, period, slope_a, slope_b),
                };
                let cur = out.get(&[t, j]);
                out.set(&[t, j], cur + v);
            }
        }
    }
    Ok(out)
}

fn regime_value(t: usize, period: usize, a: f64, b: f64) -> f64 {
    let half_a = period / 2;
    let half_b = period - half_a;
    let cycles = t / period;
    let within = t % period;
    let base = cycles as f64 * (a * half_a as f64 + b * half_b as f64);
    if within < half_a {
        base + a * within as f64
    } else {
        base + a * half_a as f64 + b * (within - half_a) as f64
    }
}

/// Anything that maps a normalized `I×d` window to an `O×d` forecast.
pub trait Forecaster: Sync {
    fn forecast(&self, input: &Tensor) -> Result<Tensor>;
}

impl Forecaster for Model {
    fn forecast(&self, input: &Tensor) -> Result<Tensor> {
        self.predict(input)
    }
}

/// Repeats the last observed row over the horizon.
pub struct RepeatLast {
    pub pred_len: usize,
}

impl Forecaster for RepeatLast {
    fn forecast(&self, input: &Tensor) -> Result<Tensor> {
        let n = input.shape()[0];
        let last = input.slice_first(n - 1, n)?;
        let rows: Vec<&Tensor> = (0..self.pred_len).map(|_| &last).collect();
        Tensor::concat_first(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over every window and feature.
pub fn evaluate<F: Forecaster + ?Sized>(model: &F, windows: &[Window]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::EmptySample);
    }
    let per: Vec<(f64, f64, usize)> = windows
        .par_iter()
        .map(|w| {
            let p = model.forecast(&w.input)?;
            p.check_same(&w.target, "evaluate")?;
            let (mut se, mut ae) = (0.0, 0.0);
            for (a, b) in p.data().iter().zip(w.target.data()) {
                se += (a - b) * (a - b);
                ae += (a - b).abs();
            }
            Ok((se, ae, p.numel()))
        })
        .collect::<Result<_>>()?;
    let (se, ae, n) = per.iter().fold((0.0, 0.0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    Ok(Metrics { mse: se / n as f64, mae: ae / n as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Caps training windows drawn per epoch (after shuffling); 0 uses all.
    pub max_batches: usize,
    /// Record real wall-clock time in the history instead of 0.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            patience: 3,
            max_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            max_batches: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("train.patience, train.batch_size and train.max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0,1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = store.param(id).grad.clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Patience-based early stopping on strictly decreasing validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad: 0, epoch: 0 }
    }

    pub fn observe(&mut self, val: f64) -> StopDecision {
        self.epoch += 1;
        if val < self.best {
            self.best = val;
            self.best_epoch = self.epoch;
            self.bad = 0;
            StopDecision::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,wall_ms\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.12e},{:.12e},{}\n", e.epoch, e.train_mse, e.val_mse, e.wall_ms));
        }
        s
    }
}

/// Mean-squared-error gradient of one window.
fn window_grads(model: &Model, store: &ParamStore, w: &Window) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let y = model.forward_with(&mut g, store, &w.input)?;
    let t = g.constant(w.target.clone());
    let loss = g.mse(y, t)?;
    Ok((g.value(loss).item(), g.backward(loss, store)?))
}

/// Trains `model` in place with Adam on mean window MSE, evaluating the
/// validation split after every epoch and restoring the best parameters.
pub fn train(model: &mut Model, data: &WindowedDataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        if split.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{name} split has no windows of length {}",
                data.input_len + data.pred_len
            )));
        }
    }
    let initial_val_mse = evaluate(model, &data.val)?.mse;
    let mut adam = Adam::new(&model.store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.store.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if cfg.max_batches > 0 {
            batches.truncate(cfg.max_batches);
        }
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in batches {
            let store = &model.store;
            let m: &Model = model;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| window_grads(m, store, &data.train[i]))
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(&model.store);
            for (l, gr) in &results {
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += l;
                total.add_assign(gr)?;
            }
            count += results.len();
            total.scale(1.0 / results.len() as f64);
            model.store.zero_grad();
            model.store.accumulate(&total)?;
            adam.step(&mut model.store);
        }
        let train_mse = loss_sum / count as f64;
        let val_mse = evaluate(model, &data.val)?.mse;
        if !val_mse.is_finite() || !train_mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let wall_ms = if cfg.record_timing { started.elapsed().as_millis() as u64 } else { 0 };
        epochs.push(EpochRecord { epoch, train_mse, val_mse, wall_ms });
        log::info!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        match stopper.observe(val_mse) {
            StopDecision::Improved => best = model.store.clone(),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }
    model.store = best;
    Ok(History { initial_val_mse, epochs, best_epoch: stopper.best_epoch, best_val_mse: stopper.best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::spectral::rfft;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_small_file() {
        let f = write_tmp("date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n");
        let s = load_csv(f.path()).unwrap();
        assert_eq!(s.values.shape(), &[3, 2]);
        assert_eq!(s.values.data(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(s.names, vec!["a", "b"]);
        assert_eq!(s.time.interval(), 3600.0);
        assert_eq!(s.time.extrapolate(2), vec!["2020-01-01 03:00:00", "2020-01-01 04:00:00"]);
    }

    #[test]
    fn csv_blank_cell_names_location() {
        let f = write_tmp("date,a,b\n1,1,2\n2,,4\n");
        match load_csv(f.path()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("date,a\nyesterday,1\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { row: 2, column: 1, .. })));
    }

    #[test]
    fn csv_ett_header() {
        let mut s = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for h in 0..4 {
            s.push_str(&format!("2016-07-01 0{h}:00:00,1,2,3,4,5,6,{}\n", 30 + h));
        }
        let series = load_csv(write_tmp(&s).path()).unwrap();
        assert_eq!(series.values.shape(), &[4, 7]);
        assert_eq!(series.names[6], "OT");
        assert_eq!(series.values.get(&[2, 6]), 32.0);
    }

    #[test]
    fn non_monotonic_stamps_only_warn() {
        let f = write_tmp("t,a\n3,1\n1,2\n");
        assert!(load_csv(f.path()).is_ok());
    }

    #[test]
    fn window_counts_and_normalization() {
        let x = Tensor::new(&[6, 1], (0..6).map(f64::from).collect()).unwrap();
        let ds = make_windows(&x, 4, 2, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (1, 0, 0));
        assert!(make_windows(&x, 4, 3, DEFAULT_SPLIT).is_err());

        let x = synth_series(&"sin(0.05,2,0)+noise(0.3);trend(0.01)+noise(1)".parse().unwrap(), 500, 3).unwrap();
        let ds = make_windows(&x, 24, 12, DEFAULT_SPLIT).unwrap();
        assert_eq!(ds.bounds, [(0, 350), (350, 400), (400, 500)]);
        assert_eq!(ds.train.len(), 350 - 36 + 1);
        assert_eq!(ds.val.len(), 50 - 36 + 1);
        assert_eq!(ds.test.len(), 100 - 36 + 1);
        let train = ds.norm.normalize(&x.slice_first(0, 350).unwrap()).unwrap();
        let stats = Normalizer::fit(&train).unwrap();
        for c in 0..2 {
            assert!(stats.mean[c].abs() < 1e-10);
            assert!((stats.std[c] - 1.0).abs() < 1e-10);
        }
        // val/test use the train statistics, not their own
        let own = Normalizer::fit(&x.slice_first(400, 500).unwrap()).unwrap();
        assert_ne!(own, ds.norm);
        let w = &ds.test[0];
        let raw = x.slice_first(400, 424).unwrap();
        assert!(w.input.max_abs_diff(&ds.norm.normalize(&raw).unwrap()) < 1e-15);
    }

    #[test]
    fn constant_feature_gets_unit_std() {
        let x = Tensor::full(&[10, 1], 4.0);
        let n = Normalizer::fit(&x).unwrap();
        assert_eq!(n.std, vec![1.0]);
        let y = Tensor::randn(&[5, 1], 3.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(n.denormalize(&n.normalize(&y).unwrap()).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn synth_single_sinusoid_has_one_bin() {
        let spec: SynthSpec = "sin(0.125,1.5,0.3)".parse().unwrap();
        let x = synth_series(&spec, 64, 0).unwrap();
        let s = rfft(&x).unwrap();
        for l in 0..33 {
            let mag = s.at(l, 0).norm();
            if l == 8 {
                assert!((mag - 1.5 * 32.0).abs() < 1e-9);
            } else {
                assert!(mag < 1e-9, "bin {l}: {mag}");
            }
        }
        let z = synth_series(&"zero".parse().unwrap(), 10, 0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let spec: SynthSpec = "noise(1)+shift(5,2)".parse().unwrap();
        assert_eq!(synth_series(&spec, 20, 9).unwrap(), synth_series(&spec, 20, 9).unwrap());
        assert_ne!(synth_series(&spec, 20, 9).unwrap(), synth_series(&spec, 20, 10).unwrap());
    }

    #[test]
    fn synth_spec_round_trips() {
        let text = "sin(0.01,1,0)+trend(0.002)+shift(100,-0.5);noise(0.1)+regimes(40,0.05,-0.02);zero";
        let spec: SynthSpec = text.parse().unwrap();
        assert_eq!(spec.to_string(), text);
        assert!("sin(1,2)".parse::<SynthSpec>().is_err());
        assert!("wave(1)".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn regimes_are_continuous_piecewise_linear() {
        let x = synth_series(&"regimes(10,1,-0.5)".parse().unwrap(), 30, 0).unwrap();
        let d: Vec<f64> = x.data().windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(&d[..10], &[1., 1., 1., 1., 1., -0.5, -0.5, -0.5, -0.5, -0.5]);
        assert_eq!(x.get(&[10, 0]), 2.5);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        // loss = p², grad 2p = 4
        store.param(id);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        store.backward(&g, l).unwrap();
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store);
        // m̂ = 4, v̂ = 16, step = lr·4/(4+eps)
        let want = 2.0 - 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((store.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_trace() {
        let mut es = EarlyStopping::new(3);
        let vals = [1.0, 0.9, 0.95, 0.96, 0.97];
        let got: Vec<StopDecision> = vals.iter().map(|&v| es.observe(v)).collect();
        use StopDecision::*;
        assert_eq!(got, vec![Improved, Improved, Wait, Wait, Stop]);
        assert_eq!(es.best_epoch, 2);
    }

    #[test]
    fn evaluate_closed_forms_and_loop_oracle() {
        struct Shift(f64);
        impl Forecaster for Shift {
            fn forecast(&self, input: &Tensor) -> Result<Tensor> {
                Ok(Tensor::full(&[2, 1], input.get(&[0, 0]) + self.0))
            }
        }
        let ws: Vec<Window> = (0..3)
            .map(|i| Window {
                start: i,
                input: Tensor::full(&[4, 1], i as f64),
                target: Tensor::full(&[2, 1], i as f64),
            })
            .collect();
        assert_eq!(evaluate(&Shift(0.0), &ws).unwrap(), Metrics { mse: 0.0, mae: 0.0 });
        assert_eq!(evaluate(&Shift(0.5), &ws).unwrap(), Metrics { mse: 0.25, mae: 0.5 });
        assert!(matches!(evaluate(&Shift(0.0), &[]), Err(Error::EmptySample)));

        let cfg = ModelConfig { input_len: 8, pred_len: 4, raw_dim: 2, model_dim: 4, modes: 3, moe_kernels: vec![3], ..ModelConfig::default() };
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws: Vec<Window> = (0..3)
            .map(|i| Window {
                start: i,
                input: Tensor::randn(&[8, 2], 1.0, &mut rng),
                target: Tensor::randn(&[4, 2], 1.0, &mut rng),
            })
            .collect();
        let (mut se, mut ae, mut n) = (0.0, 0.0, 0.0);
        for w in &ws {
            let p = model.predict(&w.input).unwrap();
            for t in 0..4 {
                for c in 0..2 {
                    let e = p.get(&[t, c]) - w.target.get(&[t, c]);
                    se += e * e;
                    ae += e.abs();
                    n += 1.0;
                }
            }
        }
        let m = evaluate(&model, &ws).unwrap();
        assert!((m.mse - se / n).abs() < 1e-12 && (m.mae - ae / n).abs() < 1e-12);
    }

    fn tiny_setup() -> (Model, WindowedDataset, TrainConfig) {
        let spec: SynthSpec = "sin(0.0625,1,0)+noise(0.05)".parse().unwrap();
        let x = synth_series(&spec, 400, 1).unwrap();
        let ds = make_windows(&x, 16, 8, DEFAULT_SPLIT).unwrap();
        let cfg = ModelConfig {
            input_len: 16,
            pred_len: 8,
            raw_dim: 1,
            model_dim: 4,
            modes: 4,
            encoder_layers: 1,
            moe_kernels: vec![3, 5],
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig { learning_rate: 3e-3, batch_size: 8, max_epochs: 3, max_batches: 4, ..TrainConfig::default() };
        (Model::new(cfg).unwrap(), ds, tcfg)
    }

    #[test]
    fn training_is_reproducible_and_restores_best() {
        let (mut m1, ds, tcfg) = tiny_setup();
        let (mut m2, _, _) = tiny_setup();
        let h1 = train(&mut m1, &ds, &tcfg).unwrap();
        let h2 = train(&mut m2, &ds, &tcfg).unwrap();
        assert_eq!(h1.to_csv(), h2.to_csv());
        let best = h1.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h1.best_val_mse, best);
        assert_eq!(evaluate(&m1, &ds.val).unwrap().mse, best);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (mut m, ds, _) = tiny_setup();
        let tcfg = TrainConfig { learning_rate: 1e300, batch_size: 8, max_epochs: 3, max_batches: 4, ..TrainConfig::default() };
        match train(&mut m, &ds, &tcfg) {
            Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
