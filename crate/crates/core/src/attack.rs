//! Gradient-based evasion attacks and robust-accuracy evaluation.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::bank::{SamplingMask, SubModelBank};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// Where the attacker's gradients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatModel {
    /// Sub-model 0 used as a fixed surrogate.
    Transfer,
    /// Expectation over freshly sampled masks.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ radius in normalized `[-1, 1]` pixel units.
    pub epsilon: f64,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Masks averaged per gradient evaluation in adaptive mode.
    #[serde(default = "default_mask_samples")]
    pub n_mask_samples: usize,
    #[serde(default = "default_clip_min")]
    pub clip_min: f64,
    #[serde(default = "default_clip_max")]
    pub clip_max: f64,
}

fn default_step_size() -> f64 {
    0.02
}
fn default_steps() -> usize {
    40
}
fn default_true() -> bool {
    true
}
fn default_mask_samples() -> usize {
    10
}
fn default_clip_min() -> f64 {
    -1.0
}
fn default_clip_max() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon,
            n_steps: 1,
            random_start: false,
            n_mask_samples: default_mask_samples(),
            clip_min: -1.0,
            clip_max: 1.0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, n_steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            step_size,
            n_steps,
            random_start: true,
            n_mask_samples: default_mask_samples(),
            clip_min: -1.0,
            clip_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(
                "epsilon",
                format!("must be ≥ 0, got {}", self.epsilon),
            ));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::config(
                "clip_min",
                format!("must be below clip_max ({} ≥ {})", self.clip_min, self.clip_max),
            ));
        }
        if self.n_mask_samples < 1 {
            return Err(Error::config("n_mask_samples", "must be at least 1"));
        }
        if self.kind == AttackKind::Pgd {
            if self.n_steps < 1 {
                return Err(Error::config("n_steps", "must be at least 1"));
            }
            if !(self.step_size > 0.0 && self.step_size.is_finite()) {
                return Err(Error::config(
                    "step_size",
                    format!("must be positive, got {}", self.step_size),
                ));
            }
        }
        Ok(())
    }
}

/// Source of `∇ₓ loss(x, y)` for a batch.
pub trait GradFn {
    fn gradient(&mut self, x: &Tensor, y: &[usize]) -> Result<Tensor>;
}

impl<F> GradFn for F
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn gradient(&mut self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        self(x, y)
    }
}

/// Gradient of one fixed sampled model.
pub struct FixedMaskGrad<'a> {
    pub bank: &'a SubModelBank,
    pub mask: SamplingMask,
}

impl GradFn for FixedMaskGrad<'_> {
    fn gradient(&mut self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        self.bank.input_gradient(&self.mask, x, y)
    }
}

/// Expectation-over-transformation gradient across random masks.
pub struct EotGrad<'a, R: Rng> {
    pub bank: &'a SubModelBank,
    pub n_samples: usize,
    pub rng: R,
}

impl<R: Rng> GradFn for EotGrad<'_, R> {
    fn gradient(&mut self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        eot_gradient(self.bank, x, y, self.n_samples, &mut self.rng)
    }
}

/// Mean of `∇ₓ CE` over `n_samples` masks drawn from `rng`. One mask covers
/// the whole batch per draw.
pub fn eot_gradient<R: Rng + ?Sized>(
    bank: &SubModelBank,
    x: &Tensor,
    y: &[usize],
    n_samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n_samples < 1 {
        return Err(Error::contract("EOT needs at least one mask sample"));
    }
    let mut mean = Tensor::zeros(x.shape());
    for s in 1..=n_samples {
        let mask = bank.sample_mask(rng);
        let g = bank.input_gradient(&mask, x, y)?;
        let w = 1.0 / s as f64;
        for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += (v - *m) * w;
        }
    }
    Ok(mean)
}

/// Exact expectation of `∇ₓ CE` under uniform masks, by enumerating all
/// `M^L` masks.
pub fn exhaustive_mask_gradient(bank: &SubModelBank, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let masks = bank.all_masks()?;
    let mut mean = Tensor::zeros(x.shape());
    for (s, mask) in masks.iter().enumerate() {
        let g = bank.input_gradient(mask, x, y)?;
        let w = 1.0 / (s + 1) as f64;
        for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += (v - *m) * w;
        }
    }
    Ok(mean)
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

fn check_pair(x: &Tensor, g: &Tensor) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "gradient {:?} does not match input {:?}",
            g.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// `clip(x + ε·sign(∇ₓ), lo, hi)` with `sign(0) = 0`.
pub fn fgsm<G: GradFn + ?Sized>(
    grad: &mut G,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    clip_min: f64,
    clip_max: f64,
) -> Result<Tensor> {
    let g = grad.gradient(x, y)?;
    check_pair(x, &g)?;
    let mut out = x.clone();
    for (o, gv) in out.data_mut().iter_mut().zip(g.data()) {
        *o = (*o + epsilon * sign(*gv)).clamp(clip_min, clip_max);
    }
    Ok(out)
}

fn project(out: &mut Tensor, x0: &Tensor, epsilon: f64, clip_min: f64, clip_max: f64) {
    for (o, c) in out.data_mut().iter_mut().zip(x0.data()) {
        let lo = (c - epsilon).max(clip_min);
        let hi = (c + epsilon).min(clip_max);
        *o = o.clamp(lo, hi);
    }
}

/// Projected gradient ascent on the loss inside the `ε`-ball around `x`,
/// intersected with the valid pixel range.
pub fn pgd<G: GradFn + ?Sized, R: Rng + ?Sized>(
    grad: &mut G,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let dist = Uniform::new_inclusive(-cfg.epsilon, cfg.epsilon)
            .map_err(|e| Error::contract(format!("random start: {e}")))?;
        for v in adv.data_mut() {
            *v += dist.sample(rng);
        }
        project(&mut adv, x, cfg.epsilon, cfg.clip_min, cfg.clip_max);
    }
    for _ in 0..cfg.n_steps {
        let g = grad.gradient(&adv, y)?;
        check_pair(x, &g)?;
        for (a, gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a += cfg.step_size * sign(*gv);
        }
        project(&mut adv, x, cfg.epsilon, cfg.clip_min, cfg.clip_max);
    }
    Ok(adv)
}

/// Runs the configured attack against `grad`.
pub fn run_attack<G: GradFn + ?Sized, R: Rng + ?Sized>(
    grad: &mut G,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(grad, x, y, cfg.epsilon, cfg.clip_min, cfg.clip_max),
        AttackKind::Pgd => pgd(grad, x, y, cfg, rng),
    }
}

/// Fraction of `data` classified correctly by `predict`, evaluated in
/// contiguous batches.
pub fn accuracy<P>(mut predict: P, data: &Dataset, batch_size: usize) -> Result<f64>
where
    P: FnMut(&Tensor) -> Result<Vec<usize>>,
{
    if data.is_empty() {
        return Err(Error::contract("accuracy on an empty dataset"));
    }
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let (x, y) = data.range(start, end)?;
        let pred = predict(&x)?;
        if pred.len() != y.len() {
            return Err(Error::contract(format!(
                "predictor returned {} labels for {} inputs",
                pred.len(),
                y.len()
            )));
        }
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Crafts adversarial inputs batch by batch with `grad`, then scores them
/// with `predict`. Returns the accuracy on the perturbed set.
pub fn evaluate_robust_accuracy<G, P, R>(
    grad: &mut G,
    mut predict: P,
    data: &Dataset,
    cfg: &AttackConfig,
    batch_size: usize,
    attack_rng: &mut R,
) -> Result<f64>
where
    G: GradFn + ?Sized,
    P: FnMut(&Tensor) -> Result<Vec<usize>>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("robust accuracy on an empty dataset"));
    }
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let (x, y) = data.range(start, end)?;
        let adv = run_attack(grad, &x, &y, cfg, attack_rng)?;
        let pred = predict(&adv)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constant_grad(values: Vec<f64>) -> impl FnMut(&Tensor, &[usize]) -> Result<Tensor> {
        move |x: &Tensor, _: &[usize]| Tensor::new(x.shape().to_vec(), values.clone())
    }

    #[test]
    fn fgsm_signs_and_clips() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.9]);
        let mut g = constant_grad(vec![2.0, -0.1, 5.0]);
        let adv = fgsm(&mut g, &x, &[0], 0.3, -1.0, 1.0).unwrap();
        assert_eq!(adv.data(), &[0.3, -0.3, 1.0]);
    }

    #[test]
    fn fgsm_zero_gradient_is_identity() {
        let x = Tensor::from_vec(vec![0.25, -0.5]);
        let mut g = constant_grad(vec![0.0, 0.0]);
        assert_eq!(fgsm(&mut g, &x, &[0], 0.3, -1.0, 1.0).unwrap(), x);
    }

    #[test]
    fn zero_epsilon_pgd_is_identity() {
        let x = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let mut g = constant_grad(vec![1.0, -1.0, 1.0]);
        let cfg = AttackConfig::pgd(0.0, 0.1, 5);
        let adv = pgd(&mut g, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn pgd_stays_in_ball() {
        let x = Tensor::from_vec(vec![0.95, -0.95, 0.0]);
        let mut g = constant_grad(vec![1.0, -1.0, 1.0]);
        let cfg = AttackConfig::pgd(0.1, 0.04, 7);
        let adv = pgd(&mut g, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(adv.max_abs_diff(&x) <= 0.1 + 1e-12);
        assert_eq!(adv.data()[0], 1.0);
        assert_eq!(adv.data()[1], -1.0);
        assert!((adv.data()[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn wrong_gradient_shape_rejected() {
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let mut g = |_: &Tensor, _: &[usize]| Ok(Tensor::from_vec(vec![1.0]));
        assert!(matches!(
            fgsm(&mut g, &x, &[0], 0.1, -1.0, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(-0.1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.0, 3).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.01, 0).validate().is_err());
        let mut c = AttackConfig::pgd(0.1, 0.01, 3);
        c.n_mask_samples = 0;
        assert!(c.validate().unwrap_err().to_string().contains("n_mask_samples"));
    }
}
