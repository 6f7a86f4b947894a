use super::model::{CamaModel, Expansion, ObservedVars};
use super::nets::Binder;
use super::{CamaError, LabeledBatch, ObjectiveWeights, Observations};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::stochastics::{
    gaussian_log_prob, kl_to_standard_normal, sample_with_noise, standard_normal_log_prob, DiagGaussian, RngStream,
};

/// How `m` enters the joint ELBO.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManipulationPosterior {
    /// `m ~ q(m | x)`, with the `log p(m) - log q(m | x)` term.
    Inferred,
    /// `q(m | x)` replaced by a point mass at the null vector and the
    /// `m` prior and entropy terms dropped. This is the intervention ELBO.
    PointNull,
}

/// Per-row joint ELBO on a tape.
///
/// Noise comes from `rng.derive_named("z")` (`[n, dim_z]`) and
/// `rng.derive_named("m")` (`[n, dim_m]`), so equal streams give equal values.
pub fn elbo_joint_on(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    obs: &ObservedVars,
    y: &[usize],
    rng: &RngStream,
    mode: ManipulationPosterior,
) -> Result<Var, CamaError> {
    let n = y.len();
    let spec = &model.spec;
    let eps_z = rng.derive_named("z").normal_tensor(&[n, spec.dim_z]);
    let (m, kl_m) = match mode {
        ManipulationPosterior::PointNull => (g.constant(model.null_m(n)), None),
        ManipulationPosterior::Inferred => {
            let q_m = model.m_posterior(g, b, obs.x)?;
            let eps_m = rng.derive_named("m").normal_tensor(&[n, spec.dim_m]);
            let m = sample_with_noise(g, &q_m, &eps_m)?;
            (m, Some(kl_to_standard_normal(g, &q_m)?))
        }
    };
    let ex = Expansion::labeled(y);
    let t = model.expanded_terms(g, b, obs, m, &ex, &eps_z)?;
    let kl_z = kl_to_standard_normal(g, &t.q_z)?;
    let mut e = g.add(t.log_lik, t.log_prior_y)?;
    e = g.sub(e, kl_z)?;
    if let Some(kl_m) = kl_m {
        e = g.sub(e, kl_m)?;
    }
    Ok(e)
}

/// Per-row `log sum_c exp ELBO(x, y_c)` on a tape. Every class shares the
/// same `z` and `m` noise.
pub fn elbo_marginal_on(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    obs: &ObservedVars,
    rng: &RngStream,
) -> Result<Var, CamaError> {
    let spec = &model.spec;
    let n = g.shape(obs.x)[0];
    let classes = spec.classes;
    let ex = Expansion::all_classes(n, classes);
    let eps_z = rng.derive_named("z").normal_tensor(&[n, spec.dim_z]).select_rows(&ex.src);
    let q_m = model.m_posterior(g, b, obs.x)?;
    let eps_m = rng.derive_named("m").normal_tensor(&[n, spec.dim_m]);
    let m = sample_with_noise(g, &q_m, &eps_m)?;
    let kl_m = kl_to_standard_normal(g, &q_m)?;
    let t = model.expanded_terms(g, b, obs, m, &ex, &eps_z)?;
    let kl_z = kl_to_standard_normal(g, &t.q_z)?;
    let e = g.add(t.log_lik, t.log_prior_y)?;
    let e = g.sub(e, kl_z)?;
    let e = g.reshape(e, &[n, classes])?;
    let lse = g.logsumexp_rows(e)?;
    Ok(g.sub(lse, kl_m)?)
}

/// A labeled child stream when several terms share one objective, the
/// stream itself otherwise (so single-term objectives match the per-row functions).
fn substream(rng: &RngStream, shared: bool, label: &str) -> RngStream {
    if shared {
        rng.derive_named(label)
    } else {
        rng.clone()
    }
}

fn require_clean(batch: &LabeledBatch) -> Result<(), CamaError> {
    match batch.manipulated_count() {
        0 => Ok(()),
        k => Err(CamaError::ManipulatedRowsInIntervention(k)),
    }
}

fn evaluate(
    model: &CamaModel,
    batch: &LabeledBatch,
    rng: &RngStream,
    mode: ManipulationPosterior,
) -> Result<Tensor, CamaError> {
    batch.validate(&model.spec)?;
    let mut g = Graph::new();
    let b = Binder::frozen(&model.params);
    let obs = model.place_inputs(&mut g, &batch.x, batch.cov.as_ref())?;
    let e = elbo_joint_on(&mut g, model, &b, &obs, &batch.y, rng, mode)?;
    Ok(g.value(e).clone())
}

/// Intervention ELBO per row, with `m` fixed to the null vector. Rows must be clean.
pub fn elbo_intervention(model: &CamaModel, batch: &LabeledBatch, rng: &RngStream) -> Result<Tensor, CamaError> {
    require_clean(batch)?;
    evaluate(model, batch, rng, ManipulationPosterior::PointNull)
}

/// Joint ELBO per row with `m` inferred from `x`.
pub fn elbo_joint(model: &CamaModel, batch: &LabeledBatch, rng: &RngStream) -> Result<Tensor, CamaError> {
    evaluate(model, batch, rng, ManipulationPosterior::Inferred)
}

/// Joint ELBO per row with an explicit treatment of `m`; no clean-row check.
pub fn elbo_joint_with(
    model: &CamaModel,
    batch: &LabeledBatch,
    rng: &RngStream,
    mode: ManipulationPosterior,
) -> Result<Tensor, CamaError> {
    evaluate(model, batch, rng, mode)
}

/// Marginal ELBO per row of unlabeled data.
pub fn elbo_marginal(model: &CamaModel, obs: &Observations, rng: &RngStream) -> Result<Tensor, CamaError> {
    obs.validate(&model.spec)?;
    let mut g = Graph::new();
    let b = Binder::frozen(&model.params);
    let vars = model.place_inputs(&mut g, &obs.x, obs.cov.as_ref())?;
    let e = elbo_marginal_on(&mut g, model, &b, &vars, rng)?;
    Ok(g.value(e).clone())
}

/// `log p(a) + log p(c)` under their standard-normal priors, per row. These
/// terms carry no parameters and are left out of the generic objectives;
/// add them back to report absolute values.
pub fn covariate_log_prior(obs: &Observations) -> Tensor {
    let n = obs.rows();
    let Some(cov) = &obs.cov else {
        return Tensor::zeros(&[n]);
    };
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let per_row = |t: &Tensor, i: usize| -> f64 { t.row(i).iter().map(|v| -half_ln_2pi - 0.5 * v * v).sum() };
    Tensor::vector((0..n).map(|i| per_row(&cov.a, i) + per_row(&cov.c, i)).collect())
}

/// Augmented training objective on a tape (to be maximized):
/// `lambda * mean intervention ELBO(clean) + (1 - lambda) * mean joint ELBO(manipulated)`.
pub fn loss_aug_on(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    clean: &LabeledBatch,
    manipulated: &LabeledBatch,
    weights: &ObjectiveWeights,
    rng: &RngStream,
) -> Result<Var, CamaError> {
    weights.validate()?;
    require_clean(clean)?;
    let lambda = weights.lambda;
    if lambda < 1.0 && manipulated.is_empty() {
        return Err(CamaError::EmptyManipulatedBatch(lambda));
    }
    if lambda > 0.0 && clean.is_empty() {
        return Err(CamaError::InvalidWeights(format!("clean batch is empty but lambda = {lambda} > 0")));
    }
    let both = lambda > 0.0 && lambda < 1.0;
    let mut total: Option<Var> = None;
    if lambda > 0.0 {
        let obs = model.place_inputs(g, &clean.x, clean.cov.as_ref())?;
        let e = elbo_joint_on(g, model, b, &obs, &clean.y, rng, ManipulationPosterior::PointNull)?;
        let mean = g.mean(e)?;
        total = Some(g.scale(mean, lambda)?);
    }
    if lambda < 1.0 {
        let obs = model.place_inputs(g, &manipulated.x, manipulated.cov.as_ref())?;
        let e = elbo_joint_on(
            g,
            model,
            b,
            &obs,
            &manipulated.y,
            &substream(rng, both, "manipulated"),
            ManipulationPosterior::Inferred,
        )?;
        let mean = g.mean(e)?;
        let term = g.scale(mean, 1.0 - lambda)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one term is active"))
}

/// Value of the augmented objective.
pub fn loss_aug(
    model: &CamaModel,
    clean: &LabeledBatch,
    manipulated: &LabeledBatch,
    weights: &ObjectiveWeights,
    rng: &RngStream,
) -> Result<f64, CamaError> {
    clean.validate(&model.spec)?;
    manipulated.validate(&model.spec)?;
    let mut g = Graph::new();
    let v = loss_aug_on(&mut g, model, &Binder::frozen(&model.params), clean, manipulated, weights, rng)?;
    Ok(g.value(v).item())
}

/// Fine-tuning objective on a tape (to be maximized):
/// `alpha * mean labeled ELBO(train) + (1 - alpha) * mean marginal ELBO(test)`.
///
/// With `use_intervention_for_train` set, clean training rows use the
/// intervention ELBO and manipulated ones the joint ELBO.
#[allow(clippy::too_many_arguments)]
pub fn loss_ft_on(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    train: &LabeledBatch,
    test: &Observations,
    weights: &ObjectiveWeights,
    rng: &RngStream,
    use_intervention_for_train: bool,
) -> Result<Var, CamaError> {
    weights.validate()?;
    let alpha = weights.alpha;
    let labeled = alpha > 0.0 && !train.is_empty();
    let unlabeled = alpha < 1.0 && test.rows() > 0;
    let mut total: Option<Var> = None;
    if labeled {
        let n = train.rows();
        let (clean, manip) = if use_intervention_for_train {
            train.partition()
        } else {
            (train.select_rows(&[]), train.clone())
        };
        let split = !clean.is_empty() && !manip.is_empty();
        let mut sum: Option<Var> = None;
        for (batch, mode, label) in [
            (&clean, ManipulationPosterior::PointNull, "clean"),
            (&manip, ManipulationPosterior::Inferred, "joint"),
        ] {
            if batch.is_empty() {
                continue;
            }
            let obs = model.place_inputs(g, &batch.x, batch.cov.as_ref())?;
            let e = elbo_joint_on(g, model, b, &obs, &batch.y, &substream(rng, split, label), mode)?;
            let s = g.sum(e)?;
            sum = Some(match sum {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let sum = sum.expect("train batch is non-empty");
        total = Some(g.scale(sum, alpha / n as f64)?);
    }
    if unlabeled {
        let obs = model.place_inputs(g, &test.x, test.cov.as_ref())?;
        let e = elbo_marginal_on(g, model, b, &obs, &substream(rng, labeled, "test"))?;
        let mean = g.mean(e)?;
        let term = g.scale(mean, 1.0 - alpha)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| CamaError::InvalidWeights("fine-tuning objective has no active term".into()))
}

/// Value of the fine-tuning objective.
pub fn loss_ft(
    model: &CamaModel,
    train: &LabeledBatch,
    test: &Observations,
    weights: &ObjectiveWeights,
    rng: &RngStream,
    use_intervention_for_train: bool,
) -> Result<f64, CamaError> {
    if !train.is_empty() {
        train.validate(&model.spec)?;
    }
    test.validate(&model.spec)?;
    let mut g = Graph::new();
    let b = Binder::frozen(&model.params);
    let v = loss_ft_on(&mut g, model, &b, train, test, weights, rng, use_intervention_for_train)?;
    Ok(g.value(v).item())
}

/// Per-row importance weights `log p(x, y_c, z) - log q(z | x, y_c, m)` for
/// the expanded rows, used by prediction and the bound oracles.
pub(crate) fn log_importance_weights(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    obs: &ObservedVars,
    m: Var,
    ex: &Expansion,
    eps_z: &Tensor,
) -> Result<Var, CamaError> {
    let t = model.expanded_terms(g, b, obs, m, ex, eps_z)?;
    let lp_z = standard_normal_log_prob(g, t.z)?;
    let lq_z = crate::stochastics::gaussian_log_prob(g, t.z, &t.q_z)?;
    let w = g.add(t.log_lik, t.log_prior_y)?;
    let w = g.add(w, lp_z)?;
    Ok(g.sub(w, lq_z)?)
}

/// Importance-sampled log-likelihood per row with `samples` draws.
///
/// `PointNull` estimates `log p(x, y | do(m = 0))` with proposal
/// `q(z | x, y, m = 0)`; `Inferred` estimates `log p(x, y)` with proposal
/// `q(z | x, y, m) q(m | x)`. Consistent as `samples` grows and, in
/// expectation, never below the matching ELBO.
pub fn log_likelihood_is(
    model: &CamaModel,
    batch: &LabeledBatch,
    samples: usize,
    rng: &RngStream,
    mode: ManipulationPosterior,
) -> Result<Tensor, CamaError> {
    batch.validate(&model.spec)?;
    if samples == 0 {
        return Err(CamaError::InvalidWeights("importance sample count must be >= 1".into()));
    }
    let n = batch.rows();
    let eps_z = rng.derive_named("z").normal_tensor(&[n * samples, model.spec.dim_z]);
    let eps_m = rng.derive_named("m").normal_tensor(&[n * samples, model.spec.dim_m]);
    let step = (super::predict::MAX_EXPANDED_ROWS / samples).max(1);
    let b = Binder::frozen(&model.params);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(step) {
        let end = (start + step).min(n);
        let rows = end - start;
        let chunk = batch.select_rows(&(start..end).collect::<Vec<_>>());
        let expanded: Vec<usize> = (start * samples..end * samples).collect();
        let mut g = Graph::new();
        let vars = model.place_inputs(&mut g, &chunk.x, chunk.cov.as_ref())?;
        let mut ex = Expansion::labeled(&[]);
        for (r, &y) in chunk.y.iter().enumerate() {
            for s in 0..samples {
                match mode {
                    ManipulationPosterior::PointNull => ex.push(r, y, r),
                    ManipulationPosterior::Inferred => ex.push(r, y, r * samples + s),
                }
            }
        }
        let (m, m_weight) = match mode {
            ManipulationPosterior::PointNull => (g.constant(model.null_m(rows)), None),
            ManipulationPosterior::Inferred => {
                let q = model.m_posterior(&mut g, &b, vars.x)?;
                let rep: Vec<usize> = (0..rows * samples).map(|k| k / samples).collect();
                let mean = g.gather_rows(q.mean, &rep)?;
                let log_var = g.gather_rows(q.log_var, &rep)?;
                let q = DiagGaussian { mean, log_var };
                let m = sample_with_noise(&mut g, &q, &eps_m.select_rows(&expanded))?;
                let lp = standard_normal_log_prob(&mut g, m)?;
                let lq = gaussian_log_prob(&mut g, m, &q)?;
                (m, Some(g.sub(lp, lq)?))
            }
        };
        let mut w = log_importance_weights(&mut g, model, &b, &vars, m, &ex, &eps_z.select_rows(&expanded))?;
        if let Some(mw) = m_weight {
            w = g.add(w, mw)?;
        }
        let w = g.reshape(w, &[rows, samples])?;
        let lse = g.logsumexp_rows(w)?;
        out.extend(g.value(lse).data().iter().map(|v| v - (samples as f64).ln()));
    }
    Ok(Tensor::vector(out))
}
