//! Hourly traffic prediction with a sigmoid multilayer perceptron trained by
//! per-sample error backpropagation.
//!
//! Each layer computes `out = sigmoid(W^T in - threshold)`. For a sample with
//! target `y` the error is `E = 1/2 sum (y_hat - y)^2`; the output-layer
//! term is `g_j = y_hat_j (1 - y_hat_j)(y_j - y_hat_j)` and a hidden layer
//! gets `e_h = b_h (1 - b_h) sum_j w_hj g_j`. Weights move by
//! `eta * g_j * b_h` and thresholds by `-eta * g_j`.
//!
//! Traffic prediction trains 24 independent hour models. For every hour the
//! previous five days of a station are the input and the following day is
//! the target; all stations are pooled into one training set by default.
//! (Only the feed-forward network is implemented; there is no recurrent
//! variant.)

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{TrafficMatrix, HOURS_PER_DAY};
use crate::error::{Error, Result};

/// Days of history fed to the network.
pub const INPUT_DAYS: usize = 5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected sigmoid network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[l][i * out + j]` connects unit `i` of layer `l` to unit `j`
    /// of layer `l + 1`.
    weights: Vec<Vec<f64>>,
    thresholds: Vec<Vec<f64>>,
}

/// `dE/dparam`, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            thresholds: net.thresholds.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.flat_mut().zip(other.flat()) {
            *a += b;
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.thresholds)
            .flat_map(|(w, t)| w.iter().chain(t.iter()).copied())
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.thresholds.iter_mut())
            .flat_map(|(w, t)| w.iter_mut().chain(t.iter_mut()))
    }
}

impl Mlp {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {layer_sizes:?}")));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            thresholds: layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Parameters uniform in [-0.5, 0.5].
    pub fn random<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(layer_sizes)?;
        for p in net.params_mut() {
            *p = rng.random_range(-0.5..=0.5);
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn thresholds(&self) -> &[Vec<f64>] {
        &self.thresholds
    }

    pub fn weight_mut(&mut self, layer: usize, from: usize, to: usize) -> &mut f64 {
        let out = self.layer_sizes[layer + 1];
        &mut self.weights[layer][from * out + to]
    }

    pub fn threshold_mut(&mut self, layer: usize, unit: usize) -> &mut f64 {
        &mut self.thresholds[layer][unit]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.thresholds.iter().map(Vec::len).sum::<usize>()
    }

    /// All parameters, layer by layer, weights before thresholds.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.thresholds)
            .flat_map(|(w, t)| w.iter().chain(t.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.thresholds.iter_mut())
            .flat_map(|(w, t)| w.iter_mut().chain(t.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.layer_sizes[0] {
            return Err(Error::domain(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.layer_sizes[0]
            )));
        }
        Ok(())
    }

    /// Outputs of every layer, the input included.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(input.to_vec());
        for (l, (w, t)) in self.weights.iter().zip(&self.thresholds).enumerate() {
            let prev = &acts[l];
            let out = self.layer_sizes[l + 1];
            let mut next = vec![0.0; out];
            for (i, &a) in prev.iter().enumerate() {
                let row = &w[i * out..(i + 1) * out];
                for (n, &wij) in next.iter_mut().zip(row) {
                    *n += wij * a;
                }
            }
            for (n, &th) in next.iter_mut().zip(t) {
                *n = sigmoid(*n - th);
            }
            acts.push(next);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.activations(input).pop().expect("at least one layer"))
    }

    /// `E = 1/2 sum (y_hat - y)^2` for one sample.
    pub fn error(&self, input: &[f64], target: &[f64]) -> Result<f64> {
        let out = self.forward(input)?;
        self.check_target(target)?;
        Ok(0.5 * out.iter().zip(target).map(|(o, y)| (o - y).powi(2)).sum::<f64>())
    }

    fn check_target(&self, target: &[f64]) -> Result<()> {
        let l = *self.layer_sizes.last().expect("nonempty");
        if target.len() != l {
            return Err(Error::domain(format!("target has {} values, network emits {l}", target.len())));
        }
        Ok(())
    }

    /// Error of one sample and its gradient with respect to every parameter.
    pub fn gradients(&self, input: &[f64], target: &[f64]) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        self.check_target(target)?;
        let acts = self.activations(input);
        let output = acts.last().expect("nonempty");
        let error = 0.5 * output.iter().zip(target).map(|(o, y)| (o - y).powi(2)).sum::<f64>();

        let mut grads = Gradients::zeros_like(self);
        // Output layer: g_j = y_hat (1 - y_hat)(y - y_hat).
        let mut delta: Vec<f64> = output
            .iter()
            .zip(target)
            .map(|(&o, &y)| o * (1.0 - o) * (y - o))
            .collect();

        for l in (0..self.weights.len()).rev() {
            let below = &acts[l];
            let out = self.layer_sizes[l + 1];
            for (i, &b) in below.iter().enumerate() {
                for (j, &d) in delta.iter().enumerate() {
                    grads.weights[l][i * out + j] = -d * b;
                }
            }
            for (j, &d) in delta.iter().enumerate() {
                grads.thresholds[l][j] = d;
            }
            if l > 0 {
                // e_h = b_h (1 - b_h) sum_j w_hj g_j
                let w = &self.weights[l];
                delta = below
                    .iter()
                    .enumerate()
                    .map(|(h, &b)| {
                        let back: f64 = delta.iter().enumerate().map(|(j, &d)| w[h * out + j] * d).sum();
                        b * (1.0 - b) * back
                    })
                    .collect();
            }
        }
        Ok((error, grads))
    }

    /// One gradient step on a single sample. Returns the error before the
    /// update.
    pub fn backprop_step(&mut self, input: &[f64], target: &[f64], learning_rate: f64) -> Result<f64> {
        let (error, grads) = self.gradients(input, target)?;
        if learning_rate != 0.0 {
            for (p, g) in self.params_mut().zip(grads.flat()) {
                *p -= learning_rate * g;
            }
        }
        Ok(error)
    }

    fn all_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    fn write_text(&self, out: &mut String) {
        let sizes: Vec<String> = self.layer_sizes.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "layers {}", sizes.join(" "));
        for (l, (w, t)) in self.weights.iter().zip(&self.thresholds).enumerate() {
            let _ = writeln!(out, "weights {l} {}", join_floats(w));
            let _ = writeln!(out, "thresholds {l} {}", join_floats(t));
        }
    }
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    /// Per-sample gradient descent.
    Sgd,
    /// Resilient backprop on the epoch gradient (iRprop-).
    Rprop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once the mean per-sample error of an epoch drops
    /// below this.
    pub error_threshold: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub method: TrainMethod,
    /// Stop on validation error when a validation set is supplied.
    pub early_stopping: bool,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.3,
            max_epochs: 300,
            error_threshold: 1e-5,
            seed: 42,
            shuffle: true,
            method: TrainMethod::Sgd,
            early_stopping: false,
            patience: 20,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::validation(format!(
                "learning rate must lie in (0, 1), got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        Sample { input, target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    EpochLimit,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample error of each epoch.
    pub errors: Vec<f64>,
    pub stop: StopReason,
}

pub fn train(net: &mut Mlp, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_validation(net, data, &[], cfg)
}

/// Like [`train`]; with `cfg.early_stopping` and a nonempty validation set
/// the parameters with the best validation error are kept and training ends
/// after `cfg.patience` epochs without improvement.
pub fn train_with_validation(
    net: &mut Mlp,
    data: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    for s in data.iter().chain(validation) {
        net.check_input(&s.input)?;
        net.check_target(&s.target)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rprop = RpropState::new(net);
    let mut errors = Vec::new();
    let watch_validation = cfg.early_stopping && !validation.is_empty();
    let mut best: Option<(f64, Mlp)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        match cfg.method {
            TrainMethod::Sgd => {
                for &i in &order {
                    total += net.backprop_step(&data[i].input, &data[i].target, cfg.learning_rate)?;
                }
            }
            TrainMethod::Rprop => {
                let mut batch = Gradients::zeros_like(net);
                for &i in &order {
                    let (e, g) = net.gradients(&data[i].input, &data[i].target)?;
                    total += e;
                    batch.add(&g);
                }
                rprop.step(net, &batch);
            }
        }
        if !net.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let mean = total / data.len() as f64;
        errors.push(mean);

        if watch_validation {
            let val = mean_error(net, validation)?;
            if best.as_ref().map_or(true, |(b, _)| val < *b) {
                best = Some((val, net.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    *net = best.expect("set on first epoch").1;
                    return Ok(TrainReport {
                        errors,
                        stop: StopReason::EarlyStopping,
                    });
                }
            }
        }
        if mean < cfg.error_threshold {
            return Ok(TrainReport {
                errors,
                stop: StopReason::Threshold,
            });
        }
    }
    if let Some((_, b)) = best {
        *net = b;
    }
    Ok(TrainReport {
        errors,
        stop: StopReason::EpochLimit,
    })
}

/// Mean per-sample `E` over a data set.
pub fn mean_error(net: &Mlp, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in data {
        total += net.error(&s.input, &s.target)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean squared output error (no 1/2 factor) over a data set.
pub fn mse(net: &Mlp, data: &[Sample]) -> Result<f64> {
    let outputs = net.layer_sizes.last().copied().unwrap_or(1) as f64;
    Ok(2.0 * mean_error(net, data)? / outputs)
}

struct RpropState {
    steps: Vec<f64>,
    prev: Vec<f64>,
}

impl RpropState {
    const INCREASE: f64 = 1.2;
    const DECREASE: f64 = 0.5;
    const INITIAL: f64 = 0.07;
    const MAX: f64 = 50.0;
    const MIN: f64 = 1e-9;

    fn new(net: &Mlp) -> Self {
        RpropState {
            steps: vec![Self::INITIAL; net.num_params()],
            prev: vec![0.0; net.num_params()],
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        for (((p, g), step), prev) in net
            .params_mut()
            .zip(grads.flat())
            .zip(self.steps.iter_mut())
            .zip(self.prev.iter_mut())
        {
            let mut g = g;
            let sign = g * *prev;
            if sign > 0.0 {
                *step = (*step * Self::INCREASE).min(Self::MAX);
            } else if sign < 0.0 {
                *step = (*step * Self::DECREASE).max(Self::MIN);
                g = 0.0;
            }
            *p -= g.signum() * *step * (g != 0.0) as u8 as f64;
            *prev = g;
        }
    }
}

/// Per-feature min-max scaling to [0, 1]. Constant features map to 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Fits per-column bounds over the rows of `series`.
    pub fn fit(series: &[Vec<f64>]) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::domain("cannot fit a normalizer on no data"))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for row in series {
            if row.len() != min.len() {
                return Err(Error::domain("ragged rows in normalizer input"));
            }
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    /// One feature spanning every value given.
    pub fn fit_scalar(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("cannot fit a normalizer on no data"));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Normalizer {
            min: vec![min],
            max: vec![max],
        })
    }

    pub fn apply_value(&self, feature: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    pub fn invert_value(&self, feature: usize, y: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            lo + y * (hi - lo)
        } else {
            lo
        }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &x)| self.apply_value(j, x)).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &y)| self.invert_value(j, y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    /// Hidden layer widths; the input has [`INPUT_DAYS`] units, the output one.
    pub hidden: Vec<usize>,
    /// Days of history used, counted from day 1. `None` uses every day.
    pub history_days: Option<usize>,
    pub train: TrainConfig,
    /// Fractions of the pooled samples for training and validation; the
    /// remainder is the test set.
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// One network per (hour, station) instead of per hour.
    pub per_station: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            hidden: vec![20, 10],
            history_days: Some(INPUT_DAYS + 1),
            train: TrainConfig::default(),
            train_fraction: 0.8,
            validation_fraction: 0.1,
            per_station: false,
        }
    }
}

/// A trained network for one hour (and optionally one station).
#[derive(Debug, Clone, PartialEq)]
pub struct HourModel {
    pub hour: usize,
    pub station: Option<u32>,
    pub net: Mlp,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourReport {
    pub hour: usize,
    pub station: Option<u32>,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub final_train_error: f64,
    /// Normalized-scale MSE on the held-out test windows (NaN if none).
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Day index the values are for.
    pub day: usize,
    pub station_ids: Vec<u32>,
    /// `values[station][hour - 1]`, bytes.
    pub values: Vec<[f64; HOURS_PER_DAY]>,
    pub reports: Vec<HourReport>,
    pub model: PredictorModel,
}

/// Builds `INPUT_DAYS -> next day` windows of one station at one hour.
fn station_windows(traffic: &TrafficMatrix, station: usize, hour: usize, days: usize, norm: &Normalizer) -> Vec<Sample> {
    (1..=days - INPUT_DAYS)
        .map(|start| {
            let input = (start..start + INPUT_DAYS)
                .map(|d| norm.apply_value(0, traffic.get(station, d, hour)))
                .collect();
            let target = vec![norm.apply_value(0, traffic.get(station, start + INPUT_DAYS, hour))];
            Sample::new(input, target)
        })
        .collect()
}

fn rng_for(seed: u64, hour: usize, station: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = ((station.map_or(0, |s| s as u64 + 1)) << 8) | hour as u64;
    rng.set_stream(stream);
    rng
}

fn fit_one(
    traffic: &TrafficMatrix,
    hour: usize,
    stations: &[usize],
    days: usize,
    cfg: &PredictConfig,
) -> Result<(HourModel, HourReport)> {
    let values: Vec<f64> = stations
        .iter()
        .flat_map(|&s| (1..=days).map(move |d| traffic.get(s, d, hour)))
        .collect();
    let normalizer = Normalizer::fit_scalar(&values)?;
    let mut samples: Vec<Sample> = stations
        .iter()
        .flat_map(|&s| station_windows(traffic, s, hour, days, &normalizer))
        .collect();

    let single = (stations.len() == 1).then(|| stations[0]);
    let mut rng = rng_for(cfg.train.seed, hour, single);
    samples.shuffle(&mut rng);
    let n = samples.len();
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n);
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).min(n - n_train);
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);

    let mut sizes = vec![INPUT_DAYS];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = Mlp::random(&sizes, &mut rng)?;
    let train_cfg = TrainConfig {
        seed: rng.random(),
        ..cfg.train.clone()
    };
    let report = train_with_validation(&mut net, &samples, &validation, &train_cfg)?;
    let test_mse = if test.is_empty() { f64::NAN } else { mse(&net, &test)? };

    let station = single.map(|s| traffic.station_ids()[s]);
    Ok((
        HourModel {
            hour,
            station: if cfg.per_station { station } else { None },
            net,
            normalizer,
        },
        HourReport {
            hour,
            station: if cfg.per_station { station } else { None },
            train_samples: samples.len(),
            validation_samples: validation.len(),
            test_samples: test.len(),
            epochs: report.errors.len(),
            final_train_error: report.errors.last().copied().unwrap_or(f64::NAN),
            test_mse,
        },
    ))
}

/// Trains the hour models on the configured history and predicts the day
/// after it for every station.
pub fn predict_next_day(traffic: &TrafficMatrix, cfg: &PredictConfig) -> Result<Prediction> {
    let available = traffic.days();
    let days = cfg.history_days.unwrap_or(available);
    if days < INPUT_DAYS + 1 || days > available {
        return Err(Error::InsufficientHistory {
            required: days.max(INPUT_DAYS + 1),
            available,
        });
    }
    if traffic.num_stations() == 0 {
        return Err(Error::domain("no stations to predict"));
    }
    if cfg.hidden.contains(&0) {
        return Err(Error::validation("hidden layer widths must be >= 1"));
    }
    cfg.train.validate()?;

    let all: Vec<usize> = (0..traffic.num_stations()).collect();
    let jobs: Vec<(usize, Vec<usize>)> = (1..=HOURS_PER_DAY)
        .flat_map(|h| {
            if cfg.per_station {
                all.iter().map(|&s| (h, vec![s])).collect::<Vec<_>>()
            } else {
                vec![(h, all.clone())]
            }
        })
        .collect();
    let fitted: Vec<(HourModel, HourReport)> = jobs
        .par_iter()
        .map(|(h, stations)| fit_one(traffic, *h, stations, days, cfg))
        .collect::<Result<_>>()?;
    let (models, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let model = PredictorModel { models };
    let values = model.predict_from(traffic, days)?;
    Ok(Prediction {
        day: days + 1,
        station_ids: traffic.station_ids().to_vec(),
        values,
        reports,
        model,
    })
}

/// The set of hour models produced by [`predict_next_day`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub models: Vec<HourModel>,
}

const MODEL_MAGIC: &str = "skyplan-mlp-predictor v1";

impl PredictorModel {
    fn find(&self, hour: usize, station: u32) -> Option<&HourModel> {
        self.models
            .iter()
            .find(|m| m.hour == hour && m.station == Some(station))
            .or_else(|| self.models.iter().find(|m| m.hour == hour && m.station.is_none()))
    }

    /// Predicts day `last_day + 1` from days `last_day - 4 ..= last_day`.
    pub fn predict_from(&self, traffic: &TrafficMatrix, last_day: usize) -> Result<Vec<[f64; HOURS_PER_DAY]>> {
        if last_day < INPUT_DAYS || last_day > traffic.days() {
            return Err(Error::InsufficientHistory {
                required: INPUT_DAYS.max(last_day),
                available: traffic.days(),
            });
        }
        let mut out = vec![[0.0; HOURS_PER_DAY]; traffic.num_stations()];
        for (s, row) in out.iter_mut().enumerate() {
            let id = traffic.station_ids()[s];
            for hour in 1..=HOURS_PER_DAY {
                let m = self
                    .find(hour, id)
                    .ok_or_else(|| Error::domain(format!("no model for hour {hour}, station {id}")))?;
                let input: Vec<f64> = (last_day + 1 - INPUT_DAYS..=last_day)
                    .map(|d| m.normalizer.apply_value(0, traffic.get(s, d, hour)))
                    .collect();
                let y = m.net.forward(&input)?[0];
                row[hour - 1] = m.normalizer.invert_value(0, y).max(0.0);
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_MAGIC}");
        let _ = writeln!(out, "models {}", self.models.len());
        for m in &self.models {
            let station = m.station.map_or("*".to_string(), |s| s.to_string());
            let _ = writeln!(out, "model hour={} station={station}", m.hour);
            let _ = writeln!(out, "normalizer {:?} {:?}", m.normalizer.min[0], m.normalizer.max[0]);
            m.net.write_text(&mut out);
            let _ = writeln!(out, "end");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l.trim()));
        let bad = |line: u64, msg: &str| Error::Parse {
            path: "predictor model".into(),
            line,
            message: msg.into(),
        };
        match lines.next() {
            Some((_, l)) if l == MODEL_MAGIC => {}
            _ => return Err(bad(1, "missing model header")),
        }
        let (ln, count_line) = lines.next().ok_or_else(|| bad(2, "missing model count"))?;
        let count: usize = count_line
            .strip_prefix("models ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(ln, "expected `models <n>`"))?;

        let floats = |ln: u64, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(ln, "invalid number")))
                .collect()
        };

        let mut models = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, head) = lines.next().ok_or_else(|| bad(0, "truncated model file"))?;
            let rest = head.strip_prefix("model hour=").ok_or_else(|| bad(ln, "expected model header"))?;
            let (hour, station) = rest.split_once(" station=").ok_or_else(|| bad(ln, "expected station"))?;
            let hour: usize = hour.parse().map_err(|_| bad(ln, "invalid hour"))?;
            let station = match station {
                "*" => None,
                s => Some(s.parse().map_err(|_| bad(ln, "invalid station"))?),
            };

            let (ln, norm) = lines.next().ok_or_else(|| bad(ln, "truncated model"))?;
            let nv = floats(ln, norm.strip_prefix("normalizer ").ok_or_else(|| bad(ln, "expected normalizer"))?)?;
            if nv.len() != 2 {
                return Err(bad(ln, "normalizer needs min and max"));
            }
            let (ln, layers) = lines.next().ok_or_else(|| bad(ln, "truncated model"))?;
            let sizes: Vec<usize> = layers
                .strip_prefix("layers ")
                .ok_or_else(|| bad(ln, "expected layers"))?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(ln, "invalid layer size")))
                .collect::<Result<_>>()?;
            let mut net = Mlp::zeros(&sizes)?;
            for l in 0..sizes.len() - 1 {
                let (ln, w) = lines.next().ok_or_else(|| bad(ln, "truncated model"))?;
                let w = floats(ln, w.strip_prefix(&format!("weights {l} ")).ok_or_else(|| bad(ln, "expected weights"))?)?;
                let (ln, t) = lines.next().ok_or_else(|| bad(ln, "truncated model"))?;
                let t = floats(ln, t.strip_prefix(&format!("thresholds {l} ")).ok_or_else(|| bad(ln, "expected thresholds"))?)?;
                if w.len() != net.weights[l].len() || t.len() != net.thresholds[l].len() {
                    return Err(bad(ln, "parameter count does not match layer sizes"));
                }
                net.weights[l] = w;
                net.thresholds[l] = t;
            }
            match lines.next() {
                Some((_, "end")) => {}
                Some((ln, _)) => return Err(bad(ln, "expected end")),
                None => return Err(bad(0, "truncated model file")),
            }
            models.push(HourModel {
                hour,
                station,
                net,
                normalizer: Normalizer {
                    min: vec![nv[0]],
                    max: vec![nv[1]],
                },
            });
        }
        Ok(PredictorModel { models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn xor() -> Vec<Sample> {
        [([0.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([1.0, 0.0], 1.0), ([1.0, 1.0], 0.0)]
            .iter()
            .map(|(x, y)| Sample::new(x.to_vec(), vec![*y]))
            .collect()
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn one_one_one_hand_evaluation() {
        let mut net = Mlp::zeros(&[1, 1, 1]).unwrap();
        *net.weight_mut(0, 0, 0) = 1.0;
        *net.weight_mut(1, 0, 0) = 1.0;
        let out = net.forward(&[0.0]).unwrap()[0];
        assert_relative_eq!(out, 1.0 / (1.0 + (-0.5f64).exp()), max_relative = 1e-15);
        assert_relative_eq!(out, 0.6224593312018546, max_relative = 1e-12);
    }

    #[test]
    fn hidden_permutation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(&[3, 4, 2], &mut rng).unwrap();
        let mut swapped = net.clone();
        let (a, b) = (1, 3);
        for i in 0..3 {
            let (wa, wb) = (net.weights[0][i * 4 + a], net.weights[0][i * 4 + b]);
            *swapped.weight_mut(0, i, a) = wb;
            *swapped.weight_mut(0, i, b) = wa;
        }
        swapped.thresholds[0].swap(a, b);
        for j in 0..2 {
            let (wa, wb) = (net.weights[1][a * 2 + j], net.weights[1][b * 2 + j]);
            *swapped.weight_mut(1, a, j) = wb;
            *swapped.weight_mut(1, b, j) = wa;
        }
        let x = [0.3, -0.7, 0.9];
        let (p, q) = (net.forward(&x).unwrap(), swapped.forward(&x).unwrap());
        for (u, v) in p.iter().zip(&q) {
            assert_relative_eq!(u, v, max_relative = 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let net = Mlp::zeros(&[2, 2, 1]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Domain(_))));
        assert!(net.clone().backprop_step(&[1.0, 2.0], &[1.0, 1.0], 0.1).is_err());
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::zeros(&[2, 0, 1]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::random(&[2, 3, 1], &mut rng).unwrap();
        let before = net.clone();
        let e = net.backprop_step(&[0.2, 0.8], &[0.9], 0.0).unwrap();
        assert_eq!(net, before);
        assert_relative_eq!(e, before.error(&[0.2, 0.8], &[0.9]).unwrap());
    }

    #[test]
    fn exact_target_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Mlp::random(&[2, 3, 1], &mut rng).unwrap();
        let y = net.forward(&[0.1, 0.4]).unwrap();
        let before = net.clone();
        let e = net.backprop_step(&[0.1, 0.4], &y, 0.5).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(net, before);
    }

    /// Central differences on `E`, evaluated through `forward` only.
    fn numeric_gradient(net: &Mlp, x: &[f64], y: &[f64], index: usize, h: f64) -> f64 {
        let mut plus = net.clone();
        let mut minus = net.clone();
        *plus.params_mut().nth(index).unwrap() += h;
        *minus.params_mut().nth(index).unwrap() -= h;
        (plus.error(x, y).unwrap() - minus.error(x, y).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences_2_3_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut net = Mlp::random(&[2, 3, 1], &mut rng).unwrap();
            for p in net.params_mut() {
                *p *= 4.0;
            }
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let y = [rng.random::<f64>()];
            let (_, g) = net.gradients(&x, &y).unwrap();
            for (i, a) in g.flat().enumerate() {
                let n = numeric_gradient(&net, &x, &y, i, 1e-5);
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-10, "param {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn small_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mut net = Mlp::random(&[3, 5, 2], &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random()).collect();
            let before = net.backprop_step(&x, &y, 1e-4).unwrap();
            assert!(net.error(&x, &y).unwrap() <= before);
        }
    }

    #[test]
    fn infinite_threshold_stops_after_one_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::random(&[2, 4, 1], &mut rng).unwrap();
        let cfg = TrainConfig { error_threshold: f64::INFINITY, ..Default::default() };
        let report = train(&mut net, &xor(), &cfg).unwrap();
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.stop, StopReason::Threshold);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { max_epochs: 200, ..Default::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut net = Mlp::random(&[2, 4, 1], &mut rng).unwrap();
            train(&mut net, &xor(), &cfg).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn xor_seed_42_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Mlp::random(&[2, 4, 1], &mut rng).unwrap();
        let cfg = TrainConfig { learning_rate: 0.5, max_epochs: 20_000, error_threshold: 1e-3, seed: 42, ..Default::default() };
        let report = train(&mut net, &xor(), &cfg).unwrap();
        let m = mse(&net, &xor()).unwrap();
        eprintln!("xor: {} epochs, mse {m}", report.errors.len());
        assert!(m < 0.05);
    }

    #[test]
    fn rprop_reduces_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Mlp::random(&[2, 4, 1], &mut rng).unwrap();
        let cfg = TrainConfig { method: TrainMethod::Rprop, max_epochs: 2000, error_threshold: 1e-4, ..Default::default() };
        let report = train(&mut net, &xor(), &cfg).unwrap();
        assert!(report.errors.last().unwrap() < &report.errors[0]);
        assert!(mse(&net, &xor()).unwrap() < 0.05);
    }

    #[test]
    fn early_stopping_restores_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<Sample> = (0..40)
            .map(|i| {
                let x = i as f64 / 40.0;
                Sample::new(vec![x], vec![0.2 + 0.6 * x])
            })
            .collect();
        let noisy_val: Vec<Sample> = data.iter().map(|s| Sample::new(s.input.clone(), vec![0.5])).collect();
        let mut net = Mlp::random(&[1, 4, 1], &mut rng).unwrap();
        let cfg = TrainConfig { early_stopping: true, patience: 5, max_epochs: 500, error_threshold: 0.0, ..Default::default() };
        let report = train_with_validation(&mut net, &data, &noisy_val, &cfg).unwrap();
        assert_eq!(report.stop, StopReason::EarlyStopping);
        assert!(report.errors.len() < 500);
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let data = vec![Sample::new(vec![f64::INFINITY], vec![1.0])];
        let err = train(&mut net, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut net = Mlp::zeros(&[2, 1]).unwrap();
        for cfg in [
            TrainConfig { learning_rate: 1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { max_epochs: 0, ..Default::default() },
        ] {
            assert!(train(&mut net, &xor(), &cfg).is_err());
        }
        assert!(train(&mut net, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit_scalar(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!([2.0, 4.0, 6.0].map(|x| n.apply_value(0, x)), [0.0, 0.5, 1.0]);
        let c = Normalizer::fit_scalar(&[7.0, 7.0, 7.0]).unwrap();
        assert_eq!([7.0; 3].map(|x| c.apply_value(0, x)), [0.5; 3]);
        assert_eq!(c.invert_value(0, 0.5), 7.0);

        let rows = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![2.0, 10.0]];
        let m = Normalizer::fit(&rows).unwrap();
        assert_eq!(m.apply(&[2.0, 10.0]), vec![0.5, 0.5]);
        assert!(Normalizer::fit(&[]).is_err());
        assert!(Normalizer::fit_scalar(&[]).is_err());
    }

    fn flat_traffic(stations: usize, days: usize, value: impl Fn(usize, usize, usize) -> f64) -> TrafficMatrix {
        let mut m = TrafficMatrix::filled((1..=stations as u32).collect(), days, 0.0);
        for s in 0..stations {
            for d in 1..=days {
                for h in 1..=HOURS_PER_DAY {
                    m.set(s, d, h, value(s, d, h));
                }
            }
        }
        m
    }

    fn quick() -> PredictConfig {
        PredictConfig {
            train: TrainConfig { max_epochs: 40, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn constant_history_predicts_constant() {
        let m = flat_traffic(6, 6, |_, _, _| 1234.0);
        let p = predict_next_day(&m, &quick()).unwrap();
        assert_eq!(p.day, 7);
        for row in &p.values {
            for &v in row {
                assert!((v - 1234.0).abs() <= 0.05 * 1234.0);
            }
        }
    }

    #[test]
    fn insufficient_history() {
        let m = flat_traffic(2, 5, |_, _, _| 1.0);
        assert!(matches!(
            predict_next_day(&m, &quick()),
            Err(Error::InsufficientHistory { required: 6, available: 5 })
        ));
        let m = flat_traffic(2, 6, |_, _, _| 1.0);
        let cfg = PredictConfig { history_days: Some(8), ..quick() };
        assert!(predict_next_day(&m, &cfg).is_err());
    }

    #[test]
    fn hour_models_are_independent() {
        let base = |s: usize, d: usize, h: usize| 1000.0 + 37.0 * h as f64 + 11.0 * s as f64 + 3.0 * ((d * h) % 5) as f64;
        let m = flat_traffic(5, 6, base);
        // hour h of the permuted matrix carries hour sigma(h) of the original
        let sigma = |h: usize| (h * 7) % 24 + 1;
        let permuted = flat_traffic(5, 6, |s, d, h| base(s, d, sigma(h)));
        let cfg = quick();
        let a = predict_next_day(&m, &cfg).unwrap();
        let b = predict_next_day(&permuted, &cfg).unwrap();
        // same data at a different hour index trains with a different RNG
        // stream, so compare trained-model behavior rather than bytes
        for s in 0..5 {
            for h in 1..=24 {
                let (x, y) = (b.values[s][h - 1], a.values[s][sigma(h) - 1]);
                assert!((x - y).abs() <= 0.05 * y, "station {s} hour {h}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_and_model_round_trips() {
        let m = flat_traffic(4, 6, |s, d, h| 500.0 + (s * 13 + d * 7 + h * 3) as f64);
        let cfg = quick();
        let a = predict_next_day(&m, &cfg).unwrap();
        let b = predict_next_day(&m, &cfg).unwrap();
        assert_eq!(a, b);

        let text = a.model.to_text();
        let back = PredictorModel::from_text(&text).unwrap();
        assert_eq!(back, a.model);
        assert_eq!(back.predict_from(&m, 6).unwrap(), a.values);
        assert!(PredictorModel::from_text("garbage").is_err());
    }

    #[test]
    fn per_station_mode() {
        let m = flat_traffic(3, 6, |s, _, _| 100.0 * (s + 1) as f64);
        let cfg = PredictConfig { per_station: true, ..quick() };
        let p = predict_next_day(&m, &cfg).unwrap();
        assert_eq!(p.model.models.len(), 72);
        for (s, row) in p.values.iter().enumerate() {
            assert!((row[0] - 100.0 * (s + 1) as f64).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn forward_outputs_in_unit_interval(seed in 0u64..1000, x in prop::collection::vec(-50.0f64..50.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::random(&[3, 6, 2], &mut rng).unwrap();
            for y in net.forward(&x).unwrap() {
                prop_assert!(y > 0.0 && y < 1.0);
            }
        }

        #[test]
        fn normalizer_round_trip(v in prop::collection::vec(-1e6f64..1e6, 2..30)) {
            let n = Normalizer::fit_scalar(&v).unwrap();
            prop_assume!(n.max[0] > n.min[0]);
            for &x in &v {
                let y = n.apply_value(0, x);
                prop_assert!((0.0..=1.0).contains(&y));
                prop_assert!((n.invert_value(0, y) - x).abs() <= 1e-12 * x.abs().max(n.max[0] - n.min[0]));
            }
        }
    }
}
