use super::model::{CamaModel, Expansion, ObservedVars};
use super::nets::Binder;
use super::objectives::log_importance_weights;
use super::{CamaError, Covariates, ObjectiveWeights, Observations};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::stochastics::{sample_with_noise, RngStream};

/// Upper bound on expanded rows per prediction graph.
pub(crate) const MAX_EXPANDED_ROWS: usize = 4096;

/// Standard-normal draws behind one Monte Carlo prediction: `u` values of `m`
/// per observation and `k` values of `z` per `m`, shared by all classes.
///
/// Holding these fixed makes the predictive distribution a deterministic,
/// differentiable function of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictNoise {
    pub u: usize,
    pub k: usize,
    /// `[n * u, dim_m]`, observation-major.
    pub eps_m: Tensor,
    /// `[n * u * k, dim_z]`, observation-major then `m` sample.
    pub eps_z: Tensor,
}

impl PredictNoise {
    pub fn draw(model: &CamaModel, n: usize, weights: &ObjectiveWeights, rng: &RngStream) -> Result<Self, CamaError> {
        weights.validate()?;
        let (u, k) = (weights.u, weights.k);
        Ok(Self {
            u,
            k,
            eps_m: rng.derive_named("m").normal_tensor(&[n * u, model.spec.dim_m]),
            eps_z: rng.derive_named("z").normal_tensor(&[n * u * k, model.spec.dim_z]),
        })
    }

    pub fn rows(&self) -> usize {
        self.eps_m.rows() / self.u
    }

    /// Noise for observations `start..end`.
    fn slice(&self, start: usize, end: usize) -> Self {
        let (u, k) = (self.u, self.k);
        let m_rows: Vec<usize> = (start * u..end * u).collect();
        let z_rows: Vec<usize> = (start * u * k..end * u * k).collect();
        Self {
            u,
            k,
            eps_m: self.eps_m.select_rows(&m_rows),
            eps_z: self.eps_z.select_rows(&z_rows),
        }
    }
}

/// Monte Carlo estimates of `log p(x, y = c)` (generic: `log p(x, y = c | a, c)`)
/// on a tape, shape `[n, C]`.
pub fn class_scores_on(
    g: &mut Graph,
    model: &CamaModel,
    b: &Binder,
    obs: &ObservedVars,
    noise: &PredictNoise,
) -> Result<Var, CamaError> {
    let n = g.shape(obs.x)[0];
    let classes = model.spec.classes;
    let (u, k) = (noise.u, noise.k);
    let q_m = model.m_posterior(g, b, obs.x)?;
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, u)).collect();
    let mean = g.gather_rows(q_m.mean, &rep)?;
    let log_var = g.gather_rows(q_m.log_var, &rep)?;
    let q_rep = crate::stochastics::DiagGaussian { mean, log_var };
    let m = sample_with_noise(g, &q_rep, &noise.eps_m)?;

    let mut ex = Expansion {
        src: Vec::with_capacity(n * classes * u * k),
        class: Vec::with_capacity(n * classes * u * k),
        m_row: Vec::with_capacity(n * classes * u * k),
    };
    let mut z_rows = Vec::with_capacity(n * classes * u * k);
    for i in 0..n {
        for c in 0..classes {
            for s in 0..u {
                let m_row = i * u + s;
                for j in 0..k {
                    ex.push(i, c, m_row);
                    z_rows.push(m_row * k + j);
                }
            }
        }
    }
    let eps_z = noise.eps_z.select_rows(&z_rows);
    let w = log_importance_weights(g, model, b, obs, m, &ex, &eps_z)?;
    let w = g.reshape(w, &[n * classes, u * k])?;
    let lse = g.logsumexp_rows(w)?;
    let avg = g.add_scalar(lse, -((u * k) as f64).ln())?;
    Ok(g.reshape(avg, &[n, classes])?)
}

fn chunk_len(model: &CamaModel, noise: &PredictNoise) -> usize {
    let per_obs = model.spec.classes * noise.u * noise.k;
    (MAX_EXPANDED_ROWS / per_obs).max(1)
}

fn scores_with_noise(model: &CamaModel, obs: &Observations, noise: &PredictNoise) -> Result<Tensor, CamaError> {
    let n = obs.rows();
    let step = chunk_len(model, noise);
    let mut parts = Vec::new();
    let b = Binder::frozen(&model.params);
    for start in (0..n).step_by(step) {
        let end = (start + step).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = obs.select_rows(&idx);
        let mut g = Graph::new();
        let vars = model.place_inputs(&mut g, &chunk.x, chunk.cov.as_ref())?;
        let s = class_scores_on(&mut g, model, &b, &vars, &noise.slice(start, end))?;
        parts.push(g.value(s).clone());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::vstack(&refs))
}

/// Monte Carlo class scores `[n, C]`. Noise comes from `rng` as in [`PredictNoise::draw`].
pub fn class_scores(
    model: &CamaModel,
    obs: &Observations,
    weights: &ObjectiveWeights,
    rng: &RngStream,
) -> Result<Tensor, CamaError> {
    obs.validate(&model.spec)?;
    let noise = PredictNoise::draw(model, obs.rows(), weights, rng)?;
    scores_with_noise(model, obs, &noise)
}

fn softmax_rows(scores: &Tensor) -> Tensor {
    let cols = scores.cols();
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let lse = crate::ndgrad::logsumexp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

/// Predictive distribution `[n, C]`: softmax over the Monte Carlo class scores.
pub fn predict(
    model: &CamaModel,
    obs: &Observations,
    weights: &ObjectiveWeights,
    rng: &RngStream,
) -> Result<Tensor, CamaError> {
    Ok(softmax_rows(&class_scores(model, obs, weights, rng)?))
}

/// Predictive distribution with caller-held noise.
pub fn predict_with_noise(model: &CamaModel, obs: &Observations, noise: &PredictNoise) -> Result<Tensor, CamaError> {
    obs.validate(&model.spec)?;
    Ok(softmax_rows(&scores_with_noise(model, obs, noise)?))
}

impl CamaModel {
    /// Width of the flat attack input: `[a | c | x]` for the generic variant, `x` otherwise.
    pub fn flat_dim(&self) -> usize {
        self.spec.dim_a() + self.spec.dim_c() + self.spec.dim_x
    }

    /// Observations laid out as one flat row per observation.
    pub fn flatten(&self, obs: &Observations) -> Result<Tensor, CamaError> {
        obs.validate(&self.spec)?;
        Ok(match &obs.cov {
            Some(cov) if self.spec.is_generic() => Tensor::hstack(&[&cov.a, &cov.c, &obs.x]),
            _ => obs.x.clone(),
        })
    }

    /// Inverse of [`CamaModel::flatten`].
    pub fn unflatten(&self, flat: &Tensor) -> Result<Observations, CamaError> {
        if flat.rank() != 2 || flat.cols() != self.flat_dim() {
            return Err(CamaError::BatchMismatch(format!(
                "flat input has shape {:?}, expected [n, {}]",
                flat.shape(),
                self.flat_dim()
            )));
        }
        if !self.spec.is_generic() {
            return Ok(Observations::new(flat.clone()));
        }
        let (da, dc, dx) = (self.spec.dim_a(), self.spec.dim_c(), self.spec.dim_x);
        let cols = |s: usize, l: usize| flat.select_cols(&(s..s + l).collect::<Vec<_>>());
        Ok(Observations::with_covariates(cols(da + dc, dx), cols(0, da), cols(da, dc)))
    }
}

/// Mean cross-entropy of the predictive distribution at `labels` and its
/// gradient with respect to the flat input (see [`CamaModel::flatten`]),
/// with the Monte Carlo noise held fixed.
pub fn cama_attack_loss(
    model: &CamaModel,
    flat: &Tensor,
    labels: &[usize],
    noise: &PredictNoise,
) -> Result<(f64, Tensor), CamaError> {
    let obs = model.unflatten(flat)?;
    obs.validate(&model.spec)?;
    let n = obs.rows();
    if labels.len() != n || noise.rows() != n {
        return Err(CamaError::BatchMismatch(format!(
            "{n} rows, {} labels, noise for {} rows",
            labels.len(),
            noise.rows()
        )));
    }
    let step = chunk_len(model, noise);
    let b = Binder::frozen(&model.params);
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for start in (0..n).step_by(step) {
        let end = (start + step).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = obs.select_rows(&idx);
        let mut g = Graph::new();
        let x = g.input("x", chunk.x.clone());
        let (a, c) = match &chunk.cov {
            Some(Covariates { a, c }) if model.spec.is_generic() => {
                (Some(g.input("a", a.clone())), Some(g.input("c", c.clone())))
            }
            _ => (None, None),
        };
        let vars = ObservedVars { x, a, c };
        let scores = class_scores_on(&mut g, model, &b, &vars, &noise.slice(start, end))?;
        let logp = g.log_softmax(scores)?;
        let picked = model.pick(&mut g, logp, &Expansion::labeled(&labels[start..end]))?;
        let total = g.sum(picked)?;
        let nll = g.scale(total, -1.0 / n as f64)?;
        loss += g.value(nll).item();
        let gr = g.backward(nll)?;
        let gx = gr.input("x").expect("x is an input").clone();
        grads.push(match (a, c) {
            (Some(_), Some(_)) => {
                let ga = gr.input("a").expect("a is an input");
                let gc = gr.input("c").expect("c is an input");
                Tensor::hstack(&[ga, gc, &gx])
            }
            _ => gx,
        });
    }
    let refs: Vec<&Tensor> = grads.iter().collect();
    Ok((loss, Tensor::vstack(&refs)))
}

/// Decoder mean for the given labels. `m` and `z` are the posterior means, or
/// samples when `sample` is given; `null_m` decodes under `do(m = 0)` while
/// still inferring `z` with the inferred `m`.
pub fn reconstruct_with(
    model: &CamaModel,
    obs: &Observations,
    labels: &[usize],
    sample: Option<&RngStream>,
    null_m: bool,
) -> Result<Tensor, CamaError> {
    obs.validate(&model.spec)?;
    let n = obs.rows();
    if labels.len() != n {
        return Err(CamaError::BatchMismatch(format!("{n} rows but {} labels", labels.len())));
    }
    let spec = &model.spec;
    let b = Binder::frozen(&model.params);
    let mut g = Graph::new();
    let vars = model.place_inputs(&mut g, &obs.x, obs.cov.as_ref())?;
    let q_m = model.m_posterior(&mut g, &b, vars.x)?;
    let m = match sample {
        Some(rng) => sample_with_noise(&mut g, &q_m, &rng.derive_named("m").normal_tensor(&[n, spec.dim_m]))?,
        None => q_m.mean,
    };
    let ex = Expansion::labeled(labels);
    let ctx = model.encoder_context(&mut g, &b, &vars)?;
    let mq = model.encoder_m(&mut g, &b, m)?;
    let q_z = model.z_posterior(&mut g, &b, ctx, mq, &ex)?;
    let z = match sample {
        Some(rng) => sample_with_noise(&mut g, &q_z, &rng.derive_named("z").normal_tensor(&[n, spec.dim_z]))?,
        None => q_z.mean,
    };
    let m_dec = if null_m { g.constant(model.null_m(n)) } else { m };
    let mp = model.decoder_m(&mut g, &b, m_dec)?;
    let cp = model.decoder_c(&mut g, &b, vars.c)?;
    let decoded = model.decode(&mut g, &b, z, mp, cp, &ex)?;
    let mean = model.mean_from_decoded(&mut g, decoded)?;
    Ok(g.value(mean).clone())
}

/// `do(m = 0)` reconstruction: infer `m`, predict `y`, infer `z`, then decode
/// with `m` replaced by the null vector.
pub fn counterfactual_reconstruct(
    model: &CamaModel,
    obs: &Observations,
    weights: &ObjectiveWeights,
    rng: &RngStream,
) -> Result<Tensor, CamaError> {
    let probs = predict(model, obs, weights, &rng.derive_named("predict"))?;
    let labels = probs.argmax_rows();
    reconstruct_with(model, obs, &labels, Some(rng), true)
}
