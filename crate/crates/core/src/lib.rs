//! Causal manipulation augmented (CAMA) generative classifiers.
//!
//! * [`ndgrad`]: reverse-mode autodiff, grouped parameters, Adam, checkpoints.
//! * [`stochastics`]: diagonal Gaussians, likelihoods and seeded random streams.
//! * [`cama`]: the single-modality and Markov-blanket model variants, their
//!   training objectives, Monte-Carlo prediction and selective fine-tuning.
//! * [`datagen`]: synthetic structural-causal measurement data, IDX images and
//!   the shift manipulations applied to both.
//! * [`attacks`]: FGSM and PGD with column masks.
//! * [`baseline`]: the discriminative MLP used for comparison.

pub mod attacks;
pub mod baseline;
pub mod cama;
pub mod datagen;
pub mod ndgrad;
pub mod stochastics;
