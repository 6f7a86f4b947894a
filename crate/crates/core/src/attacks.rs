//! FGSM and PGD under an L-infinity ball, with a per-column mask restricting
//! which inputs may be perturbed.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineError, Classifier};
use crate::cama::{cama_attack_loss, CamaError, CamaModel, ObjectiveWeights, Observations, PredictNoise};
use crate::ndgrad::Tensor;
use crate::stochastics::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} columns but the mask covers {mask}")]
    MaskWidth { got: usize, mask: usize },
    #[error("non-finite input gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Cama(#[from] CamaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// Something with a differentiable cross-entropy at given labels.
pub trait Victim {
    /// Mean cross-entropy of the predictive distribution and its gradient
    /// with respect to `x`.
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), AttackError>;
}

impl<F> Victim for F
where
    F: Fn(&Tensor, &[usize]) -> Result<(f64, Tensor), AttackError>,
{
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), AttackError> {
        self(x, labels)
    }
}

impl Victim for Classifier {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), AttackError> {
        Ok(Classifier::loss_and_grad(self, x, labels)?)
    }
}

/// CAMA's Bayes-rule predictor with Monte-Carlo noise frozen for the whole
/// run, so the loss is a deterministic function of the input. Inputs are in
/// the model's flat layout (`[a | c | x]` for the generic variant).
pub struct CamaVictim<'a> {
    pub model: &'a CamaModel,
    pub noise: PredictNoise,
}

impl<'a> CamaVictim<'a> {
    pub fn new(model: &'a CamaModel, rows: usize, weights: &ObjectiveWeights, rng: &RngStream) -> Result<Self, AttackError> {
        Ok(Self {
            model,
            noise: PredictNoise::draw(model, rows, weights, rng)?,
        })
    }

    pub fn flatten(&self, obs: &Observations) -> Result<Tensor, AttackError> {
        Ok(self.model.flatten(obs)?)
    }
}

impl Victim for CamaVictim<'_> {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), AttackError> {
        Ok(cama_attack_loss(self.model, x, labels, &self.noise)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    /// Box every perturbed value is clipped into, e.g. `(0, 1)` for images.
    pub box_bounds: Option<(f64, f64)>,
    /// `true` for columns the attacker may change.
    pub mask: Vec<bool>,
}

impl AttackConfig {
    /// 40 iterations of step `epsilon / 10`, no random start, all columns open.
    pub fn new(epsilon: f64, columns: usize) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 10.0,
            iterations: 40,
            random_start: false,
            box_bounds: None,
            mask: vec![true; columns],
        }
    }

    /// Pixels in `[0, 1]`, random start on (the baseline default).
    pub fn image(epsilon: f64, pixels: usize) -> Self {
        Self {
            box_bounds: Some((0.0, 1.0)),
            random_start: true,
            ..Self::new(epsilon, pixels)
        }
    }

    /// Flat `[a | c | x]` layout: parents stay fixed, co-parents and children
    /// are open, no box.
    pub fn measurement(epsilon: f64, dim_a: usize, dim_c: usize, dim_x: usize) -> Self {
        let mut mask = vec![false; dim_a];
        mask.extend(std::iter::repeat_n(true, dim_c + dim_x));
        Self { mask, ..Self::new(epsilon, dim_a + dim_c + dim_x) }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidConfig(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::InvalidConfig(format!("step size {} must be > 0", self.step_size)));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(AttackError::InvalidConfig("mask opens no column".into()));
        }
        if let Some((lo, hi)) = self.box_bounds {
            if !(lo < hi) {
                return Err(AttackError::InvalidConfig(format!("empty box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<(), AttackError> {
        self.validate()?;
        if x.rank() != 2 || x.cols() != self.mask.len() {
            return Err(AttackError::MaskWidth {
                got: if x.rank() == 2 { x.cols() } else { x.len() },
                mask: self.mask.len(),
            });
        }
        Ok(())
    }

    fn clip(&self, v: f64) -> f64 {
        match self.box_bounds {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }

    /// Projects every open column onto the ball around `x0` and the box;
    /// closed columns are reset to `x0`.
    fn project(&self, x0: &Tensor, x: &mut Tensor) {
        let cols = self.mask.len();
        let eps = self.epsilon;
        for (k, (v, &o)) in x.data_mut().iter_mut().zip(x0.data()).enumerate() {
            *v = if self.mask[k % cols] {
                self.clip(v.clamp(o - eps, o + eps))
            } else {
                o
            };
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

fn signed_step(cfg: &AttackConfig, x: &mut Tensor, grad: &Tensor, step: f64, iteration: usize) -> Result<(), AttackError> {
    if !grad.all_finite() {
        return Err(AttackError::NonFiniteGradient(iteration));
    }
    let cols = cfg.mask.len();
    for (k, (v, &gv)) in x.data_mut().iter_mut().zip(grad.data()).enumerate() {
        if cfg.mask[k % cols] {
            *v += step * sign(gv);
        }
    }
    Ok(())
}

/// `clip(x + epsilon * sign(grad))` on the open columns.
pub fn fgsm(victim: &dyn Victim, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    cfg.check_input(x)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, grad) = victim.loss_and_grad(x, labels)?;
    let mut adv = x.clone();
    signed_step(cfg, &mut adv, &grad, cfg.epsilon, 0)?;
    cfg.project(x, &mut adv);
    Ok(adv)
}

pub fn pgd(
    victim: &dyn Victim,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor, AttackError> {
    pgd_with_observer(victim, x, labels, cfg, rng, &mut |_, _| {})
}

/// PGD that reports every iterate (0 is the start point) to `observe`.
pub fn pgd_with_observer(
    victim: &dyn Victim,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor, AttackError> {
    cfg.check_input(x)?;
    if cfg.epsilon == 0.0 {
        observe(0, x);
        return Ok(x.clone());
    }
    if cfg.step_size > cfg.epsilon {
        warn!("PGD step size {} exceeds epsilon {}", cfg.step_size, cfg.epsilon);
    }
    let mut adv = x.clone();
    if cfg.random_start {
        let cols = cfg.mask.len();
        for (k, v) in adv.data_mut().iter_mut().enumerate() {
            if cfg.mask[k % cols] {
                *v += rng.uniform(-cfg.epsilon, cfg.epsilon);
            }
        }
        cfg.project(x, &mut adv);
    }
    observe(0, &adv);
    for it in 1..=cfg.iterations {
        let (_, grad) = victim.loss_and_grad(&adv, labels)?;
        signed_step(cfg, &mut adv, &grad, cfg.step_size, it)?;
        cfg.project(x, &mut adv);
        observe(it, &adv);
    }
    Ok(adv)
}
