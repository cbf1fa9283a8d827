//! Backpropagation through time, cost functions and evaluation.
//!
//! Training minimizes `0.5 * (y - y_hat)^2` averaged over samples with plain
//! stochastic gradient descent. Each window is an independent sequence: the
//! cell state starts at zero on every window and gradients flow through all
//! `T` steps.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flightdata::{Sample, WindowedDataset};
use crate::lstm::{LstmError, Network, Workspace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in epoch {epoch} at sample {sample} (parameter {param})")]
    NonFiniteGradient { epoch: usize, sample: usize, param: usize },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("network expects windows of {network} steps, dataset has {dataset}")]
    WindowMismatch { network: usize, dataset: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed training report: {0}")]
    BadReport(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// One update per sample, in dataset order unless shuffled.
    PerSample,
    /// One update per epoch with the mean gradient.
    FullBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub batch: BatchMode,
    /// Rescale each update's gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 575, learning_rate: 0.001, seed: 0, shuffle: false, batch: BatchMode::PerSample, clip_norm: None }
    }
}

impl TrainConfig {
    /// A learning rate of exactly zero is accepted and leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("bad clip norm {c}")));
            }
        }
        Ok(())
    }
}

/// `0.5 * sum((y - y_hat)^2) / N`
pub fn mse_cost(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let s: f64 = predictions.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(0.5 * s / predictions.len() as f64)
}

/// `sum(|y - y_hat|) / N`
pub fn mae_cost(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let s: f64 = predictions.iter().zip(targets).map(|(p, y)| (y - p).abs()).sum();
    Ok(s / predictions.len() as f64)
}

fn check_lengths(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(TrainError::LengthMismatch(p.len(), y.len()));
    }
    if p.is_empty() {
        return Err(TrainError::Empty);
    }
    Ok(())
}

fn check_window(net: &Network, data: &WindowedDataset) -> Result<()> {
    if net.window_len() != data.window_len {
        return Err(TrainError::WindowMismatch { network: net.window_len(), dataset: data.window_len });
    }
    Ok(())
}

/// Reusable forward/backward buffers for one network.
pub struct Trainer {
    ws: Workspace,
    /// Backward never writes the slots of masked parameters, so they stay 0
    /// and whole-vector updates leave masked weights untouched.
    grad: Vec<f64>,
}

impl Trainer {
    pub fn new(net: &Network) -> Self {
        Self { ws: Workspace::new(net), grad: vec![0.0; net.params().len()] }
    }

    fn clear(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Clears the gradient buffer, then adds the gradient of one sample's
    /// cost. Returns the cost.
    fn sample_gradient(&mut self, net: &Network, s: &Sample) -> Result<f64> {
        self.clear();
        self.accumulate(net, s)
    }

    fn accumulate(&mut self, net: &Network, s: &Sample) -> Result<f64> {
        let pred = net.forward_ws(&s.x, &mut self.ws)?;
        let err = pred - s.y;
        net.backward_ws(&s.x, &mut self.ws, err, &mut self.grad);
        Ok(0.5 * err * err)
    }

    /// Forward, backward and update for one sample without materializing
    /// the gradient.
    fn fused_step(&mut self, net: &mut Network, s: &Sample, lr: f64, epoch: usize, sample: usize) -> Result<f64> {
        let pred = net.forward_ws(&s.x, &mut self.ws)?;
        let err = pred - s.y;
        if !net.sgd_step_ws(&s.x, &mut self.ws, err, lr) {
            let param = net.params().iter().position(|p| !p.is_finite()).unwrap_or(0);
            return Err(TrainError::NonFiniteGradient { epoch, sample, param });
        }
        Ok(0.5 * err * err)
    }

    /// Analytic gradient of `0.5 * (y - y_hat)^2` for one sample.
    pub fn gradient(&mut self, net: &Network, s: &Sample) -> Result<(f64, Vec<f64>)> {
        let cost = self.sample_gradient(net, s)?;
        Ok((cost, self.grad.clone()))
    }

    fn apply(&mut self, net: &mut Network, cfg: &TrainConfig, scale: f64, epoch: usize, sample: usize) -> Result<()> {
        let sq = sum_squares(&self.grad);
        if !sq.is_finite() {
            let param = self.grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
            return Err(TrainError::NonFiniteGradient { epoch, sample, param });
        }
        let mut lr = cfg.learning_rate * scale;
        if let Some(clip) = cfg.clip_norm {
            let norm = sq.sqrt() * scale;
            if norm > clip {
                lr *= clip / norm;
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (p, g) in net.params_mut().iter_mut().zip(&self.grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// One pass over `data`. Returns the mean sample cost of the epoch; in
    /// per-sample mode each sample's cost is taken before its own update.
    pub fn epoch(&mut self, net: &mut Network, data: &WindowedDataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
        check_window(net, data)?;
        if data.is_empty() {
            return Err(TrainError::Empty);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        match cfg.batch {
            BatchMode::PerSample if cfg.clip_norm.is_none() && cfg.learning_rate > 0.0 => {
                for &k in &order {
                    total += self.fused_step(net, &data.samples[k], cfg.learning_rate, epoch, k)?;
                }
            }
            BatchMode::PerSample => {
                for &k in &order {
                    total += self.sample_gradient(net, &data.samples[k])?;
                    self.apply(net, cfg, 1.0, epoch, k)?;
                }
            }
            BatchMode::FullBatch => {
                self.clear();
                for &k in &order {
                    total += self.accumulate(net, &data.samples[k])?;
                }
                self.apply(net, cfg, 1.0 / data.len() as f64, epoch, data.len())?;
            }
        }
        Ok(total / data.len() as f64)
    }
}

fn sum_squares(v: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let chunks = v.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|g| g * g).sum();
    for c in chunks {
        for (l, g) in lanes.iter_mut().zip(c) {
            *l += g * g;
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// One training epoch; see [`Trainer::epoch`].
pub fn backprop_epoch(net: &mut Network, data: &WindowedDataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    Trainer::new(net).epoch(net, data, cfg, epoch)
}

pub fn predict(net: &Network, data: &WindowedDataset) -> Result<Vec<f64>> {
    check_window(net, data)?;
    let mut ws = Workspace::new(net);
    data.samples.iter().map(|s| Ok(net.forward_ws(&s.x, &mut ws)?)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub mae: f64,
}

/// Forward passes only; both error measures over every sample.
pub fn evaluate(net: &Network, data: &WindowedDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let preds = predict(net, data)?;
    let targets = data.targets();
    Ok(Evaluation { mse: mse_cost(&preds, &targets)?, mae: mae_cost(&preds, &targets)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training cost of each epoch.
    pub cost_history: Vec<f64>,
    pub final_train_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub wall_time_s: f64,
}

/// Trains for `cfg.epochs` epochs and evaluates on both datasets.
pub fn train(net: &mut Network, train_data: &WindowedDataset, test_data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_window(net, test_data)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(net);
    let mut cost_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let cost = trainer.epoch(net, train_data, cfg, epoch)?;
        log::debug!("epoch {epoch}: cost {cost:.6e}");
        cost_history.push(cost);
    }
    let final_train_mse = evaluate(net, train_data)?.mse;
    let test = evaluate(net, test_data)?;
    Ok(TrainReport {
        cost_history,
        final_train_mse,
        test_mse: test.mse,
        test_mae: test.mae,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

impl TrainReport {
    /// `epoch,cost` rows followed by a `#` summary line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,cost")?;
        for (e, c) in self.cost_history.iter().enumerate() {
            writeln!(f, "{},{}", e + 1, c)?;
        }
        writeln!(
            f,
            "# final_train_mse={},test_mse={},test_mae={},wall_time_s={}",
            self.final_train_mse, self.test_mse, self.test_mae, self.wall_time_s
        )?;
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let bad = |m: &str| TrainError::BadReport(m.to_string());
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "epoch,cost" => {}
            _ => return Err(bad("missing epoch,cost header")),
        }
        let mut report = TrainReport {
            cost_history: Vec::new(),
            final_train_mse: f64::NAN,
            test_mse: f64::NAN,
            test_mae: f64::NAN,
            wall_time_s: f64::NAN,
        };
        let mut summary = false;
        for line in lines {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.trim().split(',') {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("summary entry without '='"))?;
                    let v: f64 = v.parse().map_err(|_| bad("summary value is not a number"))?;
                    match k.trim() {
                        "final_train_mse" => report.final_train_mse = v,
                        "test_mse" => report.test_mse = v,
                        "test_mae" => report.test_mae = v,
                        "wall_time_s" => report.wall_time_s = v,
                        other => return Err(bad(&format!("unknown summary key {other}"))),
                    }
                }
                summary = true;
            } else if !line.is_empty() {
                let (_, c) = line.split_once(',').ok_or_else(|| bad("row without a comma"))?;
                report.cost_history.push(c.trim().parse().map_err(|_| bad("cost is not a number"))?);
            }
        }
        if !summary {
            return Err(bad("missing summary line"));
        }
        Ok(report)
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |g_a - g_n| / max(1e-12, |g_a| + |g_n|)` over the checked parameters.
    pub max_relative_error: f64,
    /// Parameter index where the maximum occurred.
    pub worst_param: usize,
    pub max_abs_error: f64,
    /// The relative error restricted to parameters with
    /// `|g_a| + |g_n| >= RESOLVED_GRADIENT`. Below that, rounding in the
    /// forward pass (about 1e-16 of the output, divided by `2 * eps`)
    /// dominates the central difference.
    pub max_relative_error_resolved: f64,
    pub checked: usize,
}

/// Smallest gradient magnitude the resolved error considers.
pub const RESOLVED_GRADIENT: f64 = 1e-5;

/// Trainable parameters checked exhaustively before falling back to a subset.
pub const GRAD_CHECK_EXHAUSTIVE: usize = 2000;

/// Compares the analytic gradient of one sample's cost with central
/// differences of step `eps`. Networks with more than
/// [`GRAD_CHECK_EXHAUSTIVE`] trainable parameters are checked on a random
/// subset of that size drawn with `seed`.
pub fn gradient_check(net: &Network, sample: &Sample, eps: f64, seed: u64) -> Result<GradCheck> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(TrainError::InvalidConfig(format!("finite-difference step {eps} outside [1e-8, 1e-3]")));
    }
    let mut trainer = Trainer::new(net);
    let (_, analytic) = trainer.gradient(net, sample)?;
    let mut idx: Vec<usize> = (0..net.params().len()).filter(|&i| net.trainable()[i]).collect();
    if idx.len() > GRAD_CHECK_EXHAUSTIVE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(GRAD_CHECK_EXHAUSTIVE);
        idx.sort_unstable();
    }
    let mut probe = net.clone();
    let mut ws = Workspace::new(net);
    let mut cost = |p: &Network| -> Result<f64> {
        let e = p.forward_ws(&sample.x, &mut ws)? - sample.y;
        Ok(0.5 * e * e)
    };
    let mut worst = GradCheck {
        max_relative_error: 0.0,
        worst_param: 0,
        max_abs_error: 0.0,
        max_relative_error_resolved: 0.0,
        checked: idx.len(),
    };
    for &i in &idx {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = cost(&probe)?;
        probe.params_mut()[i] = orig - eps;
        let minus = cost(&probe)?;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let mag = analytic[i].abs() + numeric.abs();
        let rel = abs / mag.max(1e-12);
        worst.max_abs_error = worst.max_abs_error.max(abs);
        if mag >= RESOLVED_GRADIENT {
            worst.max_relative_error_resolved = worst.max_relative_error_resolved.max(rel);
        }
        if rel > worst.max_relative_error {
            worst.max_relative_error = rel;
            worst.worst_param = i;
        }
    }
    Ok(worst)
}
