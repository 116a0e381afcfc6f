//! SGD with momentum, the step learning-rate schedule, and the standard and
//! adversarial training loops.
//!
//! Batch order is a Fisher-Yates shuffle (`rand::seq::SliceRandom`) driven by
//! a ChaCha8 stream seeded with `derive_seed(seed, epoch)`. The attack for
//! batch `b` of epoch `e` is seeded with
//! `derive_seed(derive_seed(seed, epoch), ATTACK_STREAM + b)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{derive_seed, pgd, AttackConfig};
use crate::autodiff::Graph;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Classifier};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const ATTACK_STREAM: u64 = 1 << 32;

/// Prefix for optimiser state tensors exported into resumable checkpoints.
pub const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            base_lr: 0.1,
            lr_drop_epochs: vec![35, 38],
            lr_drop_factor: 0.1,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            attack: AttackConfig::pgd_train(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::Config(format!(
                "lr_drop_factor must be finite and > 0, got {}",
                self.lr_drop_factor
            )));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_drop_epochs must be strictly increasing, got {:?}",
                self.lr_drop_epochs
            )));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "lr drop epoch {last} is not below epochs = {}",
                    self.epochs
                )));
            }
        }
        self.attack.validate()
    }
}

/// `base_lr · factor^(drops ≤ epoch)`.
///
/// When `1/factor` is an integer the power is applied as a division, so a
/// factor of 0.1 yields `base/10` and `base/100` exactly.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Range {
            what: "epoch",
            value: epoch.to_string(),
            range: format!("0..{}", cfg.epochs),
        });
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count() as i32;
    let inv = 1.0 / cfg.lr_drop_factor;
    let divisor = inv.round();
    if (inv - divisor).abs() <= 1e-9 * inv && divisor >= 1.0 {
        Ok(cfg.base_lr / divisor.powi(drops))
    } else {
        Ok(cfg.base_lr * cfg.lr_drop_factor.powi(drops))
    }
}

/// Heavy-ball SGD: `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Update every trainable parameter holding a gradient. Frozen
    /// parameters and parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            if grad.shape() != p.value.shape() {
                return Err(Error::dim(
                    "sgd_step",
                    format!(
                        "gradient {:?} does not match parameter `{name}` {:?}",
                        grad.shape(),
                        p.value.shape()
                    ),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let value = p.value.data_mut();
            for ((vi, &gi), pi) in v.iter_mut().zip(grad.data()).zip(value.iter_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *pi);
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Velocity buffers as named tensors (`velocity/<param>`), sorted by
    /// name, shaped like the parameters in `stores`.
    pub fn export(&self, stores: &[&ParamStore]) -> Result<Vec<(String, Tensor)>> {
        let mut names: Vec<&String> = self.velocity.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let shape = stores
                    .iter()
                    .find_map(|s| s.get(name))
                    .map(|p| p.value.shape().to_vec())
                    .ok_or_else(|| Error::Config(format!("velocity for unknown parameter `{name}`")))?;
                Ok((
                    format!("{VELOCITY_PREFIX}{name}"),
                    Tensor::new(shape, self.velocity[name].clone())?,
                ))
            })
            .collect()
    }

    /// Restore buffers written by [`Sgd::export`]; other tensors are ignored.
    pub fn import(&mut self, tensors: &[(String, Tensor)]) {
        for (name, t) in tensors {
            if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
                self.velocity.insert(param.to_string(), t.data().to_vec());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean of the batch losses.
    pub mean_loss: f64,
    /// Accuracy on the (possibly adversarial) training inputs, measured
    /// before each batch's update.
    pub accuracy: f64,
}

/// Seeded permutation of `0..n` for an epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Loss and accuracy of one optimisation step (after the attack, before the
/// update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// One SGD step on `(x, labels)`: attack, cross-entropy, backward, update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut dyn Classifier,
    opt: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    attack_seed: u64,
    lr: f64,
    batch_index: usize,
) -> Result<StepOutcome> {
    let inputs = if attack.steps == 0 && !attack.random_start {
        x.clone()
    } else {
        pgd(&*model, x, labels, attack, attack_seed)?
    };
    let mut g = Graph::new();
    let xv = g.input(inputs, false);
    let logits = model.logits(&mut g, xv)?;
    let loss = g.cross_entropy(logits, labels)?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Divergence { batch: batch_index });
    }
    let correct = argmax_rows(g.value(logits))
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    g.backward(loss)?;
    for store in model.param_stores_mut() {
        store.zero_grad();
        g.accumulate_param_grads(store);
        opt.step(store, lr)?;
    }
    Ok(StepOutcome {
        loss: loss_value,
        correct,
    })
}

/// One pass over `data` in seeded order: each batch is attacked with
/// `cfg.attack` against the current weights and used for one SGD step on
/// the trainable parameters.
pub fn adversarial_train_epoch(
    model: &mut dyn Classifier,
    opt: &mut Sgd,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let lr = lr_at_epoch(cfg, epoch)?;
    let order = epoch_permutation(data.len(), cfg.seed, epoch);
    let epoch_seed = derive_seed(cfg.seed, epoch as u64);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.batch(chunk);
        let attack_seed = derive_seed(epoch_seed, ATTACK_STREAM + b as u64);
        let out = train_step(model, opt, &x, &y, &cfg.attack, attack_seed, lr, b)?;
        loss_sum += out.loss * chunk.len() as f64;
        correct += out.correct;
    }
    Ok(EpochMetrics {
        epoch,
        lr,
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Run `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut dyn Classifier,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = adversarial_train_epoch(model, &mut opt, data, cfg, epoch)?;
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Plain supervised training on clean inputs. Every parameter must be
/// trainable; `cfg.attack` is ignored.
pub fn standard_train(
    model: &mut dyn Classifier,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    for store in model.param_stores() {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.frozen) {
            return Err(Error::Config(format!(
                "standard training needs every parameter trainable; `{name}` is frozen"
            )));
        }
    }
    let clean = TrainConfig {
        attack: AttackConfig::clean(),
        ..cfg.clone()
    };
    train(model, data, &clean, on_epoch)
}
