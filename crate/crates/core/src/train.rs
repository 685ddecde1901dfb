//! Joint training of `K` sampled models per step.
//!
//! Each step draws `K` masks, runs the `K` sampled models on the same batch
//! and minimizes
//!
//! ```text
//! Σ_k CE(logits_k, y) − α·H(mean_k p_k) − β·ln det(G·Gᵀ)
//! ```
//!
//! with one backward pass, so shared positions accumulate gradient from
//! every sampled model and each banked parameter set only from the models
//! that selected it. Parameters are then updated with classical momentum
//! SGD and coupled weight decay.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::accuracy;
use crate::autodiff::{Tape, Var};
use crate::bank::{SamplingMask, SubModelBank};
use crate::data::Dataset;
use crate::diversity::{ensemble_entropy, logdet_diversity};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a mask covers a whole batch or a single example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    PerBatch,
    PerExample,
}

/// How the `K` cross-entropy terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sampled models per step.
    pub k: usize,
    /// Ensemble-entropy coefficient.
    pub alpha: f64,
    /// Log-det diversity coefficient.
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub mask_granularity: MaskGranularity,
    pub ce_reduction: CeReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 2.0,
            beta: 0.5,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 5,
            batch_size: 32,
            lr_drop_every: 50,
            lr_drop_factor: 0.1,
            mask_granularity: MaskGranularity::PerBatch,
            ce_reduction: CeReduction::Sum,
        }
    }
}

impl TrainConfig {
    /// Single-model SGD with no diversity terms.
    pub fn plain() -> Self {
        Self {
            k: 1,
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("train.{field}"), reason));
        if self.k < 1 {
            return bad("k", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be ≥ 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be ≥ 0, got {}", self.beta));
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.lr_drop_every < 1 {
            return bad("lr_drop_every", "must be at least 1".into());
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(
                "lr_drop_factor",
                format!("must be positive, got {}", self.lr_drop_factor),
            );
        }
        Ok(())
    }
}

/// Step schedule: `lr · factor^⌊epoch / drop_every⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = (epoch / cfg.lr_drop_every.max(1)) as i32;
    cfg.lr * cfg.lr_drop_factor.powi(drops)
}

/// Momentum buffers, one per parameter tensor in canonical bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(bank: &SubModelBank) -> Self {
        Self {
            velocities: bank.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `g ← grad + λ·param; v ← μ·v + g; param ← param − lr·v`.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Contract(format!(
            "sgd_update shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Combined cross-entropy of the `K` models (sum or mean per config).
    pub ce: f64,
    pub entropy_term: f64,
    /// `NaN` when `K > C − 1` and the term was not computed.
    pub logdet_term: f64,
}

/// Masks for the `K` sampled models of one step. Each inner vector holds
/// either one mask for the whole batch or one mask per example.
pub type StepMasks = Vec<Vec<SamplingMask>>;

/// Draws the `K` mask sets for a batch of `rows` examples.
pub fn draw_step_masks<R: Rng + ?Sized>(
    bank: &SubModelBank,
    cfg: &TrainConfig,
    rows: usize,
    rng: &mut R,
) -> StepMasks {
    (0..cfg.k)
        .map(|_| match cfg.mask_granularity {
            MaskGranularity::PerBatch => vec![bank.sample_mask(rng)],
            MaskGranularity::PerExample => (0..rows).map(|_| bank.sample_mask(rng)).collect(),
        })
        .collect()
}

struct Objective {
    total: Var,
    ce: Var,
    entropy: Option<Var>,
    logdet: Option<Var>,
}

fn build_objective(
    tape: &mut Tape,
    bank: &SubModelBank,
    requires_grad: bool,
    masks: &StepMasks,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<(Objective, Vec<Var>)> {
    if masks.is_empty() {
        return Err(Error::contract("objective needs at least one sampled model"));
    }
    if y.is_empty() {
        return Err(Error::contract("objective needs a non-empty batch"));
    }
    let vars = bank.bind(tape, requires_grad);
    let xv = tape.constant(x.clone());
    let mut ce_terms = Vec::with_capacity(masks.len());
    let mut probs = Vec::with_capacity(masks.len());
    for set in masks {
        let logits = match set.as_slice() {
            [single] => bank.forward_bound(tape, &vars, single, xv)?,
            many => bank.forward_per_example(tape, &vars, many, xv)?,
        };
        ce_terms.push(tape.cross_entropy(logits, y)?);
        probs.push(tape.softmax(logits)?);
    }
    let mut ce = ce_terms[0];
    for &t in &ce_terms[1..] {
        ce = tape.add(ce, t)?;
    }
    if cfg.ce_reduction == CeReduction::Mean && masks.len() > 1 {
        ce = tape.scale(ce, 1.0 / masks.len() as f64);
    }

    let classes = bank.num_classes();
    let logdet = if masks.len() < classes {
        Some(logdet_diversity(tape, &probs, y)?)
    } else if cfg.beta > 0.0 {
        return Err(Error::Contract(format!(
            "K = {} sampled models need more than {} classes for the log-det term",
            masks.len(),
            classes
        )));
    } else {
        None
    };
    let entropy = ensemble_entropy(tape, &probs)?;

    let mut total = ce;
    if cfg.alpha > 0.0 {
        let scaled = tape.scale(entropy, cfg.alpha);
        total = tape.sub(total, scaled)?;
    }
    if let (Some(ld), true) = (logdet, cfg.beta > 0.0) {
        let scaled = tape.scale(ld, cfg.beta);
        total = tape.sub(total, scaled)?;
    }
    Ok((
        Objective {
            total,
            ce,
            entropy: Some(entropy),
            logdet,
        },
        vars.vars(),
    ))
}

fn breakdown(tape: &Tape, obj: &Objective) -> Result<LossBreakdown> {
    let get = |v: Option<Var>| -> Result<f64> {
        match v {
            Some(v) => tape.value(v).item(),
            None => Ok(f64::NAN),
        }
    };
    Ok(LossBreakdown {
        total: tape.value(obj.total).item()?,
        ce: tape.value(obj.ce).item()?,
        entropy_term: get(obj.entropy)?,
        logdet_term: get(obj.logdet)?,
    })
}

/// Evaluates the joint objective at fixed masks without gradients.
pub fn objective_value(
    bank: &SubModelBank,
    masks: &StepMasks,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (obj, _) = build_objective(&mut tape, bank, false, masks, x, y, cfg)?;
    breakdown(&tape, &obj)
}

/// Joint objective at fixed masks and its gradient for every parameter
/// tensor, in canonical bank order.
pub fn objective_gradients(
    bank: &SubModelBank,
    masks: &StepMasks,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (obj, vars) = build_objective(&mut tape, bank, true, masks, x, y, cfg)?;
    let loss = breakdown(&tape, &obj)?;
    let mut grads = tape.backward(obj.total)?;
    Ok((loss, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Applies one SGD update to every bank parameter.
pub fn apply_gradients(
    bank: &mut SubModelBank,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let params = bank.params_mut();
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::contract("gradient list does not match bank parameters"));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocities) {
        sgd_update(p, g, v, lr, cfg.momentum, cfg.weight_decay)?;
    }
    Ok(())
}

/// Draws `K` masks, evaluates the joint objective, backpropagates once and
/// updates every parameter.
pub fn rls_training_step<R: Rng + ?Sized>(
    bank: &mut SubModelBank,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    mask_rng: &mut R,
    state: &mut OptimizerState,
) -> Result<LossBreakdown> {
    if y.is_empty() {
        return Err(Error::contract("training step on an empty batch"));
    }
    let masks = draw_step_masks(bank, cfg, y.len(), mask_rng);
    let (loss, grads) = objective_gradients(bank, &masks, x, y, cfg)?;
    apply_gradients(bank, &grads, state, lr, cfg)?;
    Ok(loss)
}

/// Independent random streams consumed by [`train`].
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean of the combined cross-entropy.
    pub ce_sum: f64,
    pub entropy_term: f64,
    pub logdet_term: f64,
    pub total_loss: f64,
    pub val_acc: f64,
}

/// Runs `cfg.epochs` epochs of seeded-shuffle minibatch training and records
/// per-epoch loss components and validation accuracy under defended
/// inference with one vote.
pub fn train(
    bank: &mut SubModelBank,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let mut state = OptimizerState::new(bank);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rngs.shuffle);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let loss = rls_training_step(bank, &x, &y, cfg, lr, &mut rngs.mask, &mut state)?;
            sums[0] += loss.ce;
            sums[1] += loss.entropy_term;
            sums[2] += loss.logdet_term;
            sums[3] += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        let val_acc = accuracy(
            |x| Ok(bank.predict_defended(x, &mut rngs.eval, 1)?.classes),
            val_set,
            256,
        )?;
        history.push(EpochMetrics {
            epoch,
            lr,
            ce_sum: sums[0] / n,
            entropy_term: sums[1] / n,
            logdet_term: sums[2] / n,
            total_loss: sums[3] / n,
            val_acc,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::layers::Architecture;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 49), 0.01);
        assert!((lr_at_epoch(&cfg, 50) - 0.001).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 120) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn vanilla_and_fixed_point_updates() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::from_vec(vec![0.5, 0.25]);
        let mut v = Tensor::zeros(&[2]);
        sgd_update(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);

        let mut p = Tensor::from_vec(vec![3.0]);
        let mut v = Tensor::zeros(&[1]);
        sgd_update(&mut p, &Tensor::zeros(&[1]), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn momentum_two_step_displacement() {
        // v1 = g, v2 = 0.9g + g, so the total step is lr·g·(1 + 1.9).
        let (lr, g) = (0.05, 0.8);
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut v = Tensor::zeros(&[1]);
        let grad = Tensor::from_vec(vec![g]);
        for _ in 0..2 {
            sgd_update(&mut p, &grad, &mut v, lr, 0.9, 0.0).unwrap();
        }
        assert!((p.data()[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(matches!(
            sgd_update(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.0, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.momentum"));
        let cfg = TrainConfig {
            k: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.k"));
    }

    #[test]
    fn zero_epochs_leave_bank_unchanged() {
        let data = crate::data::synthetic_blobs(0, 4, 3, 4, 0.1).unwrap();
        let arch = Architecture::mlp(vec![1, 1, 4], &[5], 3);
        let mut bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = bank.clone();
        let cfg = TrainConfig {
            epochs: 0,
            k: 2,
            ..TrainConfig::default()
        };
        let mut rngs = TrainRngs {
            shuffle: ChaCha8Rng::seed_from_u64(1),
            mask: ChaCha8Rng::seed_from_u64(2),
            eval: ChaCha8Rng::seed_from_u64(3),
        };
        let history = train(&mut bank, &data, &data, &cfg, &mut rngs).unwrap();
        assert!(history.is_empty());
        assert_eq!(bank, before);
    }

    #[test]
    fn empty_training_set_rejected() {
        let data = crate::data::synthetic_blobs(0, 4, 3, 4, 0.1).unwrap();
        let empty = data.subset(0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let arch = Architecture::mlp(vec![1, 1, 4], &[5], 3);
        let mut bank = SubModelBank::build(arch, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rngs = TrainRngs {
            shuffle: ChaCha8Rng::seed_from_u64(1),
            mask: ChaCha8Rng::seed_from_u64(2),
            eval: ChaCha8Rng::seed_from_u64(3),
        };
        assert!(train(&mut bank, &empty, &data, &TrainConfig::plain(), &mut rngs).is_err());
    }
}
