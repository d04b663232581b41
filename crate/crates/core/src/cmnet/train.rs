use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::net::{self, Mode};
use super::params::{CmnetParams, Gradients, FIRST_DENSE};
use crate::error::{Error, Result};
use crate::features::{Dataset, Planes};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Adaptive moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain mini-batch gradient descent.
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::adam()),
            "sgd" => Some(Optimizer::Sgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Update only the dense layers.
    pub freeze_conv: bool,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            freeze_conv: false,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidParams("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParams("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean train-mode loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, params: &CmnetParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, params: &mut CmnetParams, grads: &Gradients, first_tensor: usize) {
        self.step += 1;
        let lr = self.lr;
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate().skip(first_tensor) {
            let g = grads[i];
            match self.kind {
                Optimizer::Sgd => p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &d), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mini-batch training with a seeded shuffle each epoch.
///
/// With `freeze_conv` the convolution tensors are never written; their
/// (deterministic) output is computed once for the whole set and only the
/// dense layers are fitted on it.
pub fn train(
    params: &CmnetParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(CmnetParams, TrainReport)> {
    config.validate()?;
    params.arch.validate()?;
    if data.m() != params.arch.input_dim {
        return Err(Error::ArchMismatch {
            expected: format!("M = {}", data.m()),
            found: params.arch.to_string(),
        });
    }
    let mut params = params.clone();
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &params);
    let mut shuffle_rng = rng::substream(config.seed, &[tag::OFFLINE_TRAIN, 0]);
    let mut dropout_rng = rng::substream(config.seed, &[tag::OFFLINE_TRAIN, 1]);
    let labels: Vec<u8> = data.examples().iter().map(|e| e.label).collect();
    let planes: Vec<&Planes> = data.examples().iter().map(|e| &e.planes).collect();

    let cached = if config.freeze_conv {
        Some(feature_table(&params, &planes)?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (batch_loss, grads) = match &cached {
                Some(table) => {
                    let feat = table.select(Axis(0), chunk);
                    net::backward_head(&params, feat, &batch_labels, Mode::Train, &mut dropout_rng)?
                }
                None => {
                    let batch: Vec<&Planes> = chunk.iter().map(|&i| planes[i]).collect();
                    net::backward(&params, &batch, &batch_labels, Mode::Train, &mut dropout_rng, false)?
                }
            };
            total += batch_loss * chunk.len() as f64;
            let first = if config.freeze_conv { FIRST_DENSE } else { 0 };
            opt.apply(&mut params, &grads, first);
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {} loss {mean:.6}", epoch_losses.len() + 1);
        epoch_losses.push(mean);
    }
    if !params.all_finite() {
        return Err(Error::InvalidParams(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok((params, TrainReport { epoch_losses }))
}

/// Convolution features of every example, computed in fixed-size chunks.
pub fn feature_table(params: &CmnetParams, planes: &[&Planes]) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let mut table = Array2::zeros((planes.len(), params.arch.flatten_len()));
    for (i, chunk) in planes.chunks(CHUNK).enumerate() {
        let feat = net::conv_features(params, chunk)?;
        table
            .slice_mut(ndarray::s![i * CHUNK..i * CHUNK + chunk.len(), ..])
            .assign(&feat);
    }
    Ok(table)
}
