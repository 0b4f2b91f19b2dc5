use rand::seq::SliceRandom;
use rand::Rng;

use super::net::{make_batch, unet_logits, NetParams};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::rng::{self, Rng as StreamRng};
use crate::scalar::Scalar;
use crate::tensorcore::{Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer and schedule settings for one M step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub batch_size: usize,
    pub iters_per_recursion: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_decay: 0.9,
            lr_decay_every: 3000,
            batch_size: 8,
            iters_per_recursion: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Step-decayed learning rate `lr0 * decay^floor(step / every)`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((step / cfg.lr_decay_every) as i32)
}

/// One bias-corrected ADAM update. The step counter is incremented before the update and
/// the learning rate is taken at the incremented step.
pub fn adam_step<T: Scalar>(params: &mut NetParams<T>, grads: &[Tensor<T>], cfg: &TrainConfig) {
    params.t += 1;
    let lr = learning_rate(cfg, params.t);
    adam_update(
        &mut params.tensors,
        &mut params.m,
        &mut params.v,
        grads,
        params.t,
        lr,
    );
}

pub(crate) fn adam_update<T: Scalar>(
    tensors: &mut [Tensor<T>],
    m: &mut [Tensor<T>],
    v: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    t: u64,
    lr: f64,
) {
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::of(1.0 - ADAM_BETA1.powi(t as i32));
    let c2 = T::of(1.0 - ADAM_BETA2.powi(t as i32));
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (((p, m), v), g) in tensors.iter_mut().zip(m).zip(v).zip(grads) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data());
        for (((p, m), v), &g) in it {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Cycles through a dataset in seeded shuffled epochs, without replacement within an epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(len: usize, rng: StreamRng) -> Self {
        BatchSampler {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Collect gradients for `vars` in order, zero-filling parameters the loss does not reach.
pub(crate) fn collect_grads<T: Scalar>(
    tape: &Tape<T>,
    loss: Var,
    vars: &[Var],
) -> Result<Vec<Tensor<T>>> {
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect())
}

/// Loss trace of an M step.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean loss over the last `n` iterations.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let k = n.min(self.losses.len());
        Some(self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64)
    }
}

/// One training iteration on a mini-batch: forward with dropout, masked cross-entropy,
/// backward, ADAM.
pub fn train_iteration<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetParams<T>,
    images: &[&Image],
    targets: &[&LabelMap],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let batch = make_batch::<T>(&params.config, images, Some(targets))?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(batch.input);
    let logits = unet_logits(&mut tape, &params.config, &vars, x, true, rng)?;
    let loss = tape.masked_cross_entropy(logits, &batch.targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = collect_grads(&tape, loss, &vars)?;
    adam_step(params, &grads, cfg);
    Ok(value)
}

/// Train for `cfg.iters_per_recursion` mini-batch steps, continuing from the incoming
/// parameters. `stream` names the RNG stream derived from `cfg.seed`.
pub fn train_m_step<T: Scalar>(
    params: &mut NetParams<T>,
    dataset: &[(Image, LabelMap)],
    cfg: &TrainConfig,
    stream: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.iters_per_recursion == 0 {
        return Ok(report);
    }
    if dataset.is_empty() {
        return Err(Error::Input("M step on an empty dataset".into()));
    }
    let mut sampler = BatchSampler::new(dataset.len(), rng::stream(cfg.seed, &format!("{stream}/shuffle")));
    let mut drop_rng = rng::stream(cfg.seed, &format!("{stream}/dropout"));
    for it in 0..cfg.iters_per_recursion {
        let idx = sampler.next_batch(cfg.batch_size);
        let images: Vec<&Image> = idx.iter().map(|&i| &dataset[i].0).collect();
        let targets: Vec<&LabelMap> = idx.iter().map(|&i| &dataset[i].1).collect();
        let loss = train_iteration(params, &images, &targets, cfg, &mut drop_rng)
            .map_err(|e| e.context(format!("M-step iteration {it}")))?;
        report.losses.push(loss);
    }
    Ok(report)
}
