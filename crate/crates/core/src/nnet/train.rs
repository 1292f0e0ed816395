use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentParams};
use super::loss::cross_entropy_with_denominator;
use super::optim::{lr_at, sgd_step, SgdState, SwaState};
use super::{Model, Tensor};
use crate::error::{config_err, input_err, Result};
use crate::eval::compute_metrics;
use crate::rng::rng_from_seed;

/// Single-channel images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `len * height * width` pixels, image-major.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        if images.len() != labels.len() * height * width {
            return Err(input_err(format!(
                "{} pixels do not form {} images of {height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.images[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Gradients of `batch_size / minibatch_size` minibatches are accumulated
    /// before each step.
    pub minibatch_size: usize,
    pub epochs: usize,
    /// First epoch whose end-of-epoch weights enter the running average.
    pub swa_start_epoch: Option<usize>,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![10, 15],
            lr_decay: 0.1,
            batch_size: 50,
            minibatch_size: 50,
            epochs: 20,
            swa_start_epoch: None,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err("lr must be positive"));
        }
        if self.minibatch_size == 0 || self.batch_size == 0 || self.batch_size % self.minibatch_size != 0 {
            return Err(config_err("minibatch_size must divide batch_size"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(self.lr_decay > 0.0) {
            return Err(config_err("momentum must lie in [0, 1), weight_decay >= 0, lr_decay > 0"));
        }
        if self.lr_milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("lr_milestones must be strictly increasing"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_macro: Option<f64>,
    pub val_micro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Number of epoch snapshots averaged into the final weights (0 without SWA).
    pub swa_snapshots: usize,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_macro,val_micro\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.log {
            s.push_str(&format!(
                "{},{:.6e},{:.6},{},{}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                opt(e.val_macro),
                opt(e.val_micro)
            ));
        }
        s
    }
}

fn batch_tensor(data: &Dataset, idx: &[usize], aug: Option<(&AugmentParams, &mut rand_chacha::ChaCha8Rng)>) -> Tensor<f32> {
    let (h, w) = (data.height, data.width);
    let mut pixels = Vec::with_capacity(idx.len() * h * w);
    match aug {
        Some((p, rng)) => {
            for &i in idx {
                pixels.extend(augment(data.image(i), h, w, p, rng));
            }
        }
        None => {
            for &i in idx {
                pixels.extend_from_slice(data.image(i));
            }
        }
    }
    Tensor {
        shape: vec![idx.len(), 1, h, w],
        data: pixels,
    }
}

/// Logits for every image, `len x n_classes`, computed in fixed-size chunks.
pub fn predict_logits(model: &Model<f32>, data: &Dataset) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<Vec<f32>>> = idx
        .par_chunks(64)
        .map(|chunk| Ok(model.forward(&batch_tensor(data, chunk, None))?.data))
        .collect();
    let mut out = Vec::with_capacity(data.len() * model.n_classes());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn predict(model: &Model<f32>, data: &Dataset) -> Result<Vec<usize>> {
    let c = model.n_classes();
    let logits = predict_logits(model, data)?;
    Ok(Tensor {
        shape: vec![data.len(), c],
        data: logits,
    }
    .argmax_rows())
}

/// Minibatch SGD with momentum, weight decay, a multi-step schedule,
/// gradient accumulation and optional weight averaging. Data order and
/// augmentation draw from one generator seeded with `cfg.seed`.
pub fn train(model: &mut Model<f32>, train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(input_err("training set is empty"));
    }
    let n_classes = model.n_classes();
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= n_classes) {
        return Err(input_err(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut sgd = SgdState::default();
    let mut swa = SwaState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, &cfg.lr_milestones, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            for mb in batch.chunks(cfg.minibatch_size) {
                let x = batch_tensor(train_set, mb, Some((&cfg.augment, &mut rng)));
                let labels: Vec<usize> = mb.iter().map(|&i| train_set.labels[i]).collect();
                let logits = model.forward_train(&x)?;
                let (loss, grad) = cross_entropy_with_denominator(&logits, &labels, batch.len())?;
                loss_sum += loss as f64 * batch.len() as f64;
                model.backward(&grad)?;
            }
            sgd_step(model, &mut sgd, lr, cfg.momentum, cfg.weight_decay);
        }
        if cfg.swa_start_epoch.is_some_and(|s| epoch >= s) {
            swa.update(model);
        }
        let (val_macro, val_micro) = match val {
            Some(v) if !v.is_empty() => {
                let m = compute_metrics(&v.labels, &predict(model, v)?, n_classes)?;
                (Some(m.macro_acc), Some(m.micro_acc))
            }
            _ => (None, None),
        };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_macro,
            val_micro,
        });
    }
    if swa.n_averaged > 0 {
        swa.swap_into(model)?;
    }
    Ok(TrainOutcome {
        log,
        swa_snapshots: swa.n_averaged,
    })
}
