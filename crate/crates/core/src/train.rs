//! Maximum-likelihood training: minibatch SGD with heavy-ball momentum,
//! step-wise learning-rate decay and global gradient clipping.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GradientSet, LuNet, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("data dimension {got} does not match network dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyData,
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metrics sink: {0}")]
    Sink(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    /// Rescale all entries when the global L2 norm exceeds the threshold.
    Euclidean,
    /// Rescale all entries when the largest magnitude exceeds the threshold.
    MaxAbs,
    /// Clamp each entry to `[-threshold, threshold]` independently.
    Clamp,
    /// Rescale all entries when the sum of magnitudes exceeds the threshold.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub clip: ClipKind,
    pub clip_threshold: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mixture(40)
    }
}

impl TrainConfig {
    /// Settings of the 2-D Gaussian-mixture experiment. Clipping is by the
    /// global L2 norm: with learning rate 1.0 and unit initial diagonals, the
    /// max-abs rule can move a diagonal entry of `U` exactly onto zero in the
    /// first step.
    pub fn mixture(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr0: 1.0,
            lr_decay: 0.9,
            decay_every: 1,
            momentum: 0.9,
            clip: ClipKind::Euclidean,
            clip_threshold: 1.0,
            gamma: 1.0,
            seed: 0,
        }
    }

    /// Settings of the image experiments.
    pub fn images(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr0: 0.6,
            lr_decay: 0.5,
            decay_every: 3,
            momentum: 0.9,
            clip: ClipKind::Euclidean,
            clip_threshold: 1.0,
            gamma: 100.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be non-negative, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.clip_threshold > 0.0) {
            return fail(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }
}

/// Momentum buffers shaped like the gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: GradientSet,
}

impl OptimizerState {
    pub fn new(net: &LuNet) -> Self {
        Self {
            velocity: GradientSet::zeros_like(net),
        }
    }
}

/// Clips in place and returns the norm the rule is keyed on, measured
/// before clipping.
pub fn clip_gradients(grads: &mut GradientSet, kind: ClipKind, threshold: f64) -> f64 {
    match kind {
        ClipKind::Euclidean => {
            let norm = grads.l2_norm();
            if norm > threshold {
                grads.scale(threshold / norm);
            }
            norm
        }
        ClipKind::MaxAbs => {
            let norm = grads.max_abs();
            if norm > threshold {
                grads.scale(threshold / norm);
            }
            norm
        }
        ClipKind::L1 => {
            let norm = grads.iter().map(|g| g.abs()).sum::<f64>();
            if norm > threshold {
                grads.scale(threshold / norm);
            }
            norm
        }
        ClipKind::Clamp => {
            let norm = grads.max_abs();
            grads.iter_mut().for_each(|g| *g = g.clamp(-threshold, threshold));
            norm
        }
    }
}

/// `v <- momentum v + g`, then `params <- params - lr v`.
pub fn sgd_momentum_step(
    net: &mut LuNet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) {
    update_velocity(state, grads, momentum);
    apply_velocity(net, state, lr);
}

/// `v <- momentum v + g`.
pub fn update_velocity(state: &mut OptimizerState, grads: &GradientSet, momentum: f64) {
    assert!(
        grads.matches_shape_of(&state.velocity),
        "gradient shape does not match optimizer state"
    );
    for (v, g) in state.velocity.iter_mut().zip(grads.iter()) {
        *v = momentum * *v + g;
    }
}

/// `params <- params - lr v`.
pub fn apply_velocity(net: &mut LuNet, state: &OptimizerState, lr: f64) {
    assert!(
        state.velocity.matches_shape(net),
        "optimizer state shape does not match network"
    );
    for (layer, v) in net.layers_mut().iter_mut().zip(&state.velocity.layers) {
        for (p, v) in layer.blocks_mut().into_iter().zip(v.blocks()) {
            for (p, v) in p.iter_mut().zip(v) {
                *p -= lr * v;
            }
        }
    }
}

pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.decay_every.max(1)) as i32;
    config.lr0 * config.lr_decay.powi(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean negative log-likelihood per training sample, in nats, accumulated
    /// over the epoch's minibatches.
    pub train_nll: f64,
    pub wallclock_s: f64,
}

pub trait MetricSink {
    fn record(&mut self, metrics: &EpochMetrics) -> io::Result<()>;
}

/// Discards metrics.
pub struct NoMetrics;

impl MetricSink for NoMetrics {
    fn record(&mut self, _: &EpochMetrics) -> io::Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&EpochMetrics)> MetricSink for F {
    fn record(&mut self, metrics: &EpochMetrics) -> io::Result<()> {
        self(metrics);
        Ok(())
    }
}

/// Writes `epoch,lr,train_nll_nats,wallclock_s` rows.
pub struct CsvMetrics<W: Write> {
    out: W,
    wrote_header: bool,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            wrote_header: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricSink for CsvMetrics<W> {
    fn record(&mut self, m: &EpochMetrics) -> io::Result<()> {
        if !self.wrote_header {
            writeln!(self.out, "epoch,lr,train_nll_nats,wallclock_s")?;
            self.wrote_header = true;
        }
        writeln!(
            self.out,
            "{},{},{},{:.3}",
            m.epoch, m.lr, m.train_nll, m.wallclock_s
        )?;
        self.out.flush()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_train_nll(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.train_nll)
    }
}

/// Trains `net` in place on `data`.
pub fn fit(
    net: &mut LuNet,
    data: &[Vec<f64>],
    config: &TrainConfig,
    sink: &mut dyn MetricSink,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if let Some(bad) = data.iter().find(|x| x.len() != net.dim()) {
        return Err(TrainError::DimensionMismatch {
            expected: net.dim(),
            got: bad.len(),
        });
    }

    let start = Instant::now();
    let mut state = OptimizerState::new(net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut nll_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
            let diverged = |reason: String| TrainError::Diverged {
                epoch,
                batch: b,
                reason,
            };
            let mut step = match net.backward_detailed(&batch, config.gamma) {
                Ok(step) => step,
                Err(e @ (ModelError::NonFinite { .. } | ModelError::NearSingularDiagonal { .. })) => {
                    return Err(diverged(e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            if !step.loss.is_finite() || step.grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite loss or gradient".into()));
            }
            nll_sum += step.nll;
            clip_gradients(&mut step.grads, config.clip, config.clip_threshold);
            sgd_momentum_step(net, &step.grads, &mut state, lr, config.momentum);
        }

        let metrics = EpochMetrics {
            epoch,
            lr,
            train_nll: nll_sum / data.len() as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        sink.record(&metrics)?;
        report.epochs.push(metrics);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllUnit {
    Nats,
    BitsPerPixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllSummary {
    pub mean: f64,
    /// Sample standard deviation of the per-sample values.
    pub std: f64,
    pub per_sample: Vec<f64>,
}

/// Per-sample negative log-likelihood, in nats or in bits per dimension.
///
/// For bits per pixel, `corrections[n]` is added to the nats value of sample
/// `n` before conversion; it carries the log-determinant of the data
/// preprocessing so the result refers to the dequantized pixel space.
pub fn evaluate_nll(
    net: &LuNet,
    data: &[Vec<f64>],
    unit: NllUnit,
    corrections: Option<&[f64]>,
) -> Result<NllSummary, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if let Some(c) = corrections {
        if c.len() != data.len() {
            return Err(TrainError::DimensionMismatch {
                expected: data.len(),
                got: c.len(),
            });
        }
    }
    let log_densities = net.log_density_batch(data)?;
    let per_sample: Vec<f64> = log_densities
        .iter()
        .enumerate()
        .map(|(n, lp)| match unit {
            NllUnit::Nats => -lp,
            NllUnit::BitsPerPixel => {
                let c = corrections.map_or(0.0, |c| c[n]);
                (-lp + c) / (net.dim() as f64 * std::f64::consts::LN_2)
            }
        })
        .collect();
    let (mean, std) = mean_std(&per_sample);
    Ok(NllSummary {
        mean,
        std,
        per_sample,
    })
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
