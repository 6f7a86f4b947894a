//! The deep CAMA generative classifier: single-modality and generic
//! (Markov-blanket) variants, their objectives, Monte Carlo prediction,
//! selective fine-tuning and counterfactual reconstruction.

mod data;
mod model;
mod nets;
mod objectives;
mod predict;
mod spec;
mod train;

pub use data::{Covariates, LabeledBatch, ObjectiveWeights, Observations};
pub use model::{groups, CamaModel, ExpandedTerms, Expansion, ObservedVars, M_GROUPS};
pub use nets::{Binder, Init, Mlp};
pub use objectives::{
    covariate_log_prior, elbo_intervention, elbo_joint, elbo_joint_on, elbo_joint_with, elbo_marginal,
    elbo_marginal_on, log_likelihood_is, loss_aug, loss_aug_on, loss_ft, loss_ft_on, ManipulationPosterior,
};
pub use predict::{
    cama_attack_loss, class_scores, class_scores_on, counterfactual_reconstruct, predict, predict_with_noise,
    reconstruct_with, PredictNoise,
};
pub use spec::{CamaSpec, Likelihood, Variant, Widths};
pub use train::{fine_tune, train, FineTuneOptions, FineTuneReport, TrainOptions, TrainReport};

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum CamaError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("intervention ELBO given {0} manipulated rows; route them to the joint ELBO")]
    ManipulatedRowsInIntervention(usize),
    #[error("manipulated batch is empty but lambda = {0} < 1")]
    EmptyManipulatedBatch(f64),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("generic variant requires covariates a and c")]
    MissingCovariates,
    #[error("fine-tuning changed group {0:?}, which must stay fixed")]
    MaskLeak(String),
    #[error("batch fields disagree: {0}")]
    BatchMismatch(String),
}

#[cfg(test)]
mod tests;
