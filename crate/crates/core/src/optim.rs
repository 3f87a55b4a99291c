//! Mini-batch training with Adam and a reduce-on-plateau learning rate.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::densenet::{Mode, Model, Parameter};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{self, ClassWeights};
use crate::scalar::Scalar;
use crate::seed::{self, derive_seed};
use crate::tensor::Tensor;

/// Relative improvement an epoch loss must make over the best so far.
pub const PLATEAU_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `params`, with the usual defaults
    /// (β1 0.9, β2 0.999, ε 1e-8).
    pub fn new(params: &[Parameter<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Parameter<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidShape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::InvalidShape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericInstability(format!("gradient of {} contains {bad}", p.name)));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::one() - T::of(state.beta1.powi(t));
    let c2 = T::one() - T::of(state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.epsilon));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// `false` trains with plain (unit-weight) cross-entropy.
    pub weighted_loss: bool,
    pub clamp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            initial_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_patience: 1,
            min_lr: 1e-5,
            seed: 0,
            weighted_loss: true,
            clamp_eps: loss::DEFAULT_CLAMP_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.initial_lr) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < min_lr ({}) <= initial_lr ({})",
                self.min_lr, self.initial_lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_decay_factor {} outside (0,1)",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }
}

/// Sizes of the mini-batches covering `n` samples; the last may be partial.
pub fn batch_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    (0..n.div_ceil(batch_size))
        .map(|b| batch_size.min(n - b * batch_size))
        .collect()
}

/// Order in which epoch `epoch` visits the dataset.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ seed::SHUFFLE, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` in a freshly shuffled order; returns the mean
/// per-batch loss.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    weights: &ClassWeights<T>,
    config: &TrainConfig,
    state: &mut AdamState<T>,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let unit;
    let weights = if config.weighted_loss {
        weights
    } else {
        unit = ClassWeights::unit(weights.num_classes());
        &unit
    };
    let order = epoch_order(data.len(), config.seed, epoch);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ seed::DROPOUT, epoch as u64));
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut g = Graph::new();
    for idx in order.chunks(config.batch_size) {
        let (batch, labels) = data.batch(idx)?;
        g.reset();
        let fp = model.forward(&mut g, &batch, Mode::Train { rng: &mut dropout_rng })?;
        let l = loss::weighted_bce(&mut g, fp.probabilities, &labels, weights, config.clamp_eps)?;
        let value = g.value(l)?.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NumericInstability(format!("loss {value} in epoch {epoch}")));
        }
        let grads = g.backward(l)?;
        let grads: Vec<Tensor<T>> = fp
            .param_vars
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
            .collect();
        adam_step(model.params_mut(), &grads, state, lr)?;
        model.apply_batch_stats(&fp.batch_stats);
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Reduce-on-plateau: decays when the trailing run of epochs that failed to
/// beat the best earlier loss (by relative [`PLATEAU_THRESHOLD`]) exceeds
/// `lr_patience`; the count restarts after each decay.
pub fn lr_schedule_update(history: &[f64], current_lr: f64, config: &TrainConfig) -> f64 {
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for &l in history {
        if l < best * (1.0 - PLATEAU_THRESHOLD) || best.is_infinite() {
            best = best.min(l);
            stall = 0;
        } else {
            stall += 1;
        }
    }
    let period = config.lr_patience + 1;
    if stall > config.lr_patience && (stall - period) % period == 0 {
        (current_lr * config.lr_decay_factor).max(config.min_lr)
    } else {
        current_lr
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Runs `config.epochs` epochs, calling `on_epoch` after each.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    weights: &ClassWeights<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut state = AdamState::new(model.params());
    let mut lr = config.initial_lr;
    let mut history = Vec::with_capacity(config.epochs);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mean_loss = train_epoch(model, data, weights, config, &mut state, epoch, lr)?;
        history.push(mean_loss);
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model)?;
        logs.push(log);
        lr = lr_schedule_update(&history, lr, config);
    }
    Ok(logs)
}

pub fn write_training_log<W: Write>(logs: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss", "lr", "wall_seconds"])?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            l.mean_loss.to_string(),
            l.lr.to_string(),
            format!("{:.3}", l.wall_seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(())
}
