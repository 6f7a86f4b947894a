use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::model::{CamaModel, M_GROUPS};
use super::nets::Binder;
use super::objectives::{loss_aug_on, loss_ft_on};
use super::predict::predict;
use super::{CamaError, LabeledBatch, ObjectiveWeights, Observations};
use crate::ndgrad::{AdamConfig, Graph};
use crate::stochastics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `z` samples per class when scoring the validation split; `None` uses the weights' `k`.
    pub validation_k: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            validation_k: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective (to be maximized) of every minibatch step.
    pub step_objective: Vec<f64>,
    /// Mean step objective per epoch.
    pub epoch_objective: Vec<f64>,
    /// Validation accuracy after each epoch; empty without a validation split.
    pub validation_accuracy: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Fraction of rows whose highest-probability class equals the label.
pub(crate) fn accuracy(probs: &crate::ndgrad::Tensor, labels: &[usize]) -> f64 {
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Minibatch Adam ascent on the augmented objective. Batches with only clean
/// rows use `lambda = 1` and batches with only manipulated rows `lambda = 0`.
/// With a validation split, the parameters of the most accurate epoch are kept.
pub fn train(
    model: &mut CamaModel,
    data: &LabeledBatch,
    validation: Option<&LabeledBatch>,
    weights: &ObjectiveWeights,
    opts: &TrainOptions,
    rng: &RngStream,
) -> Result<TrainReport, CamaError> {
    weights.validate()?;
    opts.adam.validate()?;
    data.validate(&model.spec)?;
    if let Some(v) = validation {
        v.validate(&model.spec)?;
    }
    if opts.batch_size == 0 {
        return Err(CamaError::InvalidWeights("batch size must be positive".into()));
    }
    let mut report = TrainReport::default();
    let mut best: Option<(f64, crate::ndgrad::ParameterStore)> = None;
    let val_weights = ObjectiveWeights {
        k: opts.validation_k.unwrap_or(weights.k),
        ..*weights
    };
    let n = data.rows();
    for epoch in 0..opts.epochs {
        let mut epoch_rng = rng.derive(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        epoch_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0;
        for (s, idx) in order.chunks(opts.batch_size).enumerate() {
            let batch = data.select_rows(idx);
            let (clean, manip) = batch.partition();
            let lambda = match (clean.is_empty(), manip.is_empty()) {
                (false, true) => 1.0,
                (true, false) => 0.0,
                _ => weights.lambda,
            };
            let w = ObjectiveWeights { lambda, ..*weights };
            let step_rng = epoch_rng.derive(s as u64 + 1);
            let mut g = Graph::new();
            let b = Binder::all(&model.params);
            let obj = loss_aug_on(&mut g, model, &b, &clean, &manip, &w, &step_rng)?;
            let value = g.value(obj).item();
            let neg = g.scale(obj, -1.0)?;
            let grads = g.backward(neg)?.into_params();
            let grads = model.params.select_gradients(&grads, None);
            model.params.adam_step(&grads, &opts.adam, None)?;
            report.step_objective.push(value);
            sum += value;
            steps += 1;
        }
        let mean = sum / steps.max(1) as f64;
        report.epoch_objective.push(mean);
        if let Some(v) = validation {
            let probs = predict(model, &v.observations(), &val_weights, &rng.derive_named("validation"))?;
            let acc = accuracy(&probs, &v.y);
            report.validation_accuracy.push(acc);
            info!("epoch {epoch}: objective {mean:.4}, validation accuracy {acc:.4}");
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, model.params.clone()));
                report.best_epoch = Some(epoch);
            }
        } else {
            info!("epoch {epoch}: objective {mean:.4}");
            report.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        model.params.copy_values_from(&params)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Use the intervention ELBO for clean labeled rows.
    pub use_intervention_for_train: bool,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            use_intervention_for_train: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    /// Fine-tuning objective (to be maximized) at every step.
    pub objective: Vec<f64>,
}

fn sample_rows(rng: &mut RngStream, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    all
}

/// Selective fine-tuning: Adam on the fine-tuning objective with only
/// `NN_M^p` and `NN_M^q` updated. Every other group is verified bit-identical
/// afterwards.
pub fn fine_tune(
    model: &mut CamaModel,
    train: &LabeledBatch,
    test: &Observations,
    weights: &ObjectiveWeights,
    opts: &FineTuneOptions,
    rng: &RngStream,
) -> Result<FineTuneReport, CamaError> {
    weights.validate()?;
    opts.adam.validate()?;
    if !train.is_empty() {
        train.validate(&model.spec)?;
    }
    test.validate(&model.spec)?;
    let mut report = FineTuneReport::default();
    if opts.steps == 0 {
        return Ok(report);
    }
    let frozen: Vec<(String, [u8; 32])> = model
        .params
        .groups()
        .into_iter()
        .filter(|g| !M_GROUPS.contains(&g.as_str()))
        .map(|g| {
            let sum = model.params.group_checksum(&g);
            (g, sum)
        })
        .collect();
    model.params.reset_optimizer(Some(&M_GROUPS));
    let mask: &[&str] = &M_GROUPS;
    for step in 0..opts.steps {
        let mut step_rng = rng.derive(step as u64);
        let tr = train.select_rows(&sample_rows(&mut step_rng, train.rows(), opts.batch_size));
        let te = test.select_rows(&sample_rows(&mut step_rng, test.rows(), opts.batch_size));
        let mut g = Graph::new();
        let b = Binder::groups(&model.params, mask);
        let obj = loss_ft_on(&mut g, model, &b, &tr, &te, weights, &step_rng, opts.use_intervention_for_train)?;
        let value = g.value(obj).item();
        let neg = g.scale(obj, -1.0)?;
        let grads = g.backward(neg)?.into_params();
        let grads = model.params.select_gradients(&grads, Some(mask));
        model.params.adam_step(&grads, &opts.adam, Some(mask))?;
        debug!("fine-tune step {step}: objective {value:.4}");
        report.objective.push(value);
    }
    for (group, before) in frozen {
        if model.params.group_checksum(&group) != before {
            return Err(CamaError::MaskLeak(group));
        }
    }
    Ok(report)
}
