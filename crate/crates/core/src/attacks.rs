//! ℓ∞ attacks: FGSM, PGD-k with cross-entropy or CW-margin loss.
//!
//! Every step is `x ← Π(x + step·sign(∇ₓ loss))` where `Π` clips into the
//! ε-ball around the clean input intersected with `[0, 1]`. Attacks build
//! their own graphs with parameter gradients disabled, so the model and its
//! gradient buffers are never touched.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, predict, Classifier};
use crate::tensor::Tensor;

/// Tolerance on the box constraints checked after every projection.
pub const BOX_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackLoss {
    CrossEntropy,
    CwMargin,
}

impl fmt::Display for AttackLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackLoss::CrossEntropy => "cross_entropy",
            AttackLoss::CwMargin => "cw_margin",
        })
    }
}

impl FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(AttackLoss::CrossEntropy),
            "cw_margin" | "cw" => Ok(AttackLoss::CwMargin),
            other => Err(Error::Config(format!(
                "unknown attack loss `{other}` (expected cross_entropy or cw_margin)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub loss: AttackLoss,
    pub random_start: bool,
}

impl AttackConfig {
    /// No perturbation at all; evaluates clean accuracy.
    pub fn clean() -> Self {
        AttackConfig {
            epsilon: 0.0,
            step_size: 0.0,
            steps: 0,
            loss: AttackLoss::CrossEntropy,
            random_start: false,
        }
    }

    /// Evaluation PGD-k: ε = 8/255, step 1/255, no random start.
    pub fn pgd_eval(steps: usize) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 1.0 / 255.0,
            steps,
            loss: AttackLoss::CrossEntropy,
            random_start: false,
        }
    }

    /// Evaluation CW-k: PGD on the margin loss with the evaluation budget.
    pub fn cw_eval(steps: usize) -> Self {
        AttackConfig {
            loss: AttackLoss::CwMargin,
            ..Self::pgd_eval(steps)
        }
    }

    /// Training PGD-10: ε = 8/255, step 2/255, random start.
    pub fn pgd_train() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            loss: AttackLoss::CrossEntropy,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// `max_{j≠y} z_j − z_y` per example.
pub fn cw_margin_loss(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(
            "cw_margin_loss",
            format!("logits {shape:?} need [batch, classes] with batch = {}", labels.len()),
        ));
    }
    let k = shape[1];
    if k < 2 {
        return Err(Error::dim("cw_margin_loss", format!("need at least 2 classes, got {k}")));
    }
    labels
        .iter()
        .zip(logits.data().chunks_exact(k))
        .enumerate()
        .map(|(i, (&y, row))| {
            if y >= k {
                return Err(Error::Range {
                    what: "label",
                    value: format!("{y} (example {i})"),
                    range: format!("0..{k}"),
                });
            }
            let (_, best) = best_other(row, y);
            Ok(best - row[y])
        })
        .collect()
}

/// Index and value of the largest logit other than `y` (first on ties).
fn best_other(row: &[f64], y: usize) -> (usize, f64) {
    row.iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
}

/// Per-example attack objective and its input gradient.
fn loss_and_grad(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    loss: AttackLoss,
) -> Result<(Vec<f64>, Tensor)> {
    let batch = labels.len();
    let mut g = Graph::without_param_grads();
    let xv = g.input(x.clone(), true);
    let logits = model.logits(&mut g, xv)?;
    let z = g.value(logits).clone();
    let k = z.shape()[1];
    let (per_example, objective) = match loss {
        AttackLoss::CrossEntropy => {
            let mean = g.cross_entropy(logits, labels)?;
            // Sum over examples so each example's gradient is its own.
            let total = g.scale(mean, batch as f64);
            let per = z
                .data()
                .chunks_exact(k)
                .zip(labels)
                .map(|(row, &y)| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
                })
                .collect();
            (per, total)
        }
        AttackLoss::CwMargin => {
            let per = cw_margin_loss(&z, labels)?;
            // The margin is piecewise linear in the logits: its gradient is
            // +1 at the best wrong class and −1 at the label.
            let mut mask = vec![0.0; batch * k];
            for (b, (&y, row)) in labels.iter().zip(z.data().chunks_exact(k)).enumerate() {
                let (j, _) = best_other(row, y);
                mask[b * k + j] += 1.0;
                mask[b * k + y] -= 1.0;
            }
            let mask = g.constant(Tensor::new([batch, k], mask)?);
            let picked = g.mul(logits, mask)?;
            (per, g.sum(picked))
        }
    };
    g.backward(objective)?;
    let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((per_example, grad))
}

/// Attack objective per example, without gradients.
pub fn attack_loss(model: &dyn Classifier, x: &Tensor, labels: &[usize], loss: AttackLoss) -> Result<Vec<f64>> {
    let z = predict(model, x)?;
    match loss {
        AttackLoss::CwMargin => cw_margin_loss(&z, labels),
        AttackLoss::CrossEntropy => {
            let k = z.shape()[1];
            Ok(z.data()
                .chunks_exact(k)
                .zip(labels)
                .map(|(row, &y)| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
                })
                .collect())
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clip into `[x−ε, x+ε] ∩ [0, 1]` coordinatewise.
fn project(candidate: &mut [f64], clean: &[f64], epsilon: f64) {
    for (c, &x0) in candidate.iter_mut().zip(clean) {
        *c = c.clamp(x0 - epsilon, x0 + epsilon).clamp(0.0, 1.0);
    }
}

fn check_box(adv: &[f64], clean: &[f64], epsilon: f64, per_example: usize) -> Result<()> {
    for (i, (&a, &x0)) in adv.iter().zip(clean).enumerate() {
        if (a - x0).abs() > epsilon + BOX_TOLERANCE || !(0.0..=1.0).contains(&a) {
            return Err(Error::NumericInstability(format!(
                "adversarial pixel {} of example {} left the feasible box ({a} vs clean {x0}, eps {epsilon})",
                i % per_example,
                i / per_example
            )));
        }
    }
    Ok(())
}

/// Projected sign-gradient ascent on the configured loss.
///
/// With `random_start`, the start point is `x + U(−ε, ε)` projected to
/// `[0, 1]`, drawn from a ChaCha8 stream seeded with `seed`.
pub fn pgd(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let shape = x.shape().to_vec();
    if shape.is_empty() || shape[0] != labels.len() {
        return Err(Error::dim(
            "pgd",
            format!("batch {shape:?} does not match {} labels", labels.len()),
        ));
    }
    let per_example = x.numel() / labels.len();
    let clean = x.data();
    let mut adv = clean.to_vec();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in adv.iter_mut() {
            *v += uniform_symmetric(&mut rng, cfg.epsilon);
        }
        project(&mut adv, clean, cfg.epsilon);
    }
    for _ in 0..cfg.steps {
        let current = Tensor::new(shape.clone(), adv.clone())?;
        let (_, grad) = loss_and_grad(model, &current, labels, cfg.loss)?;
        if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInstability(format!(
                "non-finite input gradient for batch index {}",
                i / per_example
            )));
        }
        for (a, &gv) in adv.iter_mut().zip(grad.data()) {
            *a += cfg.step_size * sign(gv);
        }
        project(&mut adv, clean, cfg.epsilon);
    }
    check_box(&adv, clean, cfg.epsilon, per_example)?;
    Tensor::new(shape, adv)
}

fn uniform_symmetric<R: Rng>(rng: &mut R, epsilon: f64) -> f64 {
    rng.random_range(-epsilon..=epsilon)
}

/// Single-step attack: PGD with one step of size ε and no random start.
pub fn fgsm(model: &dyn Classifier, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    let cfg = AttackConfig {
        epsilon,
        step_size: epsilon,
        steps: usize::from(epsilon > 0.0),
        loss: AttackLoss::CrossEntropy,
        random_start: false,
    };
    pgd(model, x, labels, &cfg, 0)
}

/// splitmix64 mix of a base seed with a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of examples whose prediction on the attacked input equals the
/// label. `steps = 0` gives clean accuracy.
///
/// Batches are attacked in index order; batch `i` uses seed
/// `derive_seed(seed, i)`.
pub fn robust_accuracy(
    model: &dyn Classifier,
    data: &LabeledImageSet,
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("robust_accuracy needs a nonempty dataset".into()));
    }
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (x, y) = data.batch(chunk);
        let x_eval = if cfg.steps == 0 && !cfg.random_start {
            x
        } else {
            pgd(model, &x, &y, cfg, derive_seed(seed, bi as u64))?
        };
        let pred = argmax_rows(&predict(model, &x_eval)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
