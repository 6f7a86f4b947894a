use super::nets::{Binder, Init, Mlp};
use super::{CamaError, CamaSpec, Likelihood, Variant};
use crate::ndgrad::{GradError, Graph, ParameterStore, Tensor, Var};
use crate::stochastics::{
    bernoulli_log_lik_logits, sample_with_noise, unit_gaussian_log_lik, DiagGaussian, RngStream,
};

/// Canonical network group names, as they appear in checkpoints.
pub mod groups {
    pub const Y_P: &str = "NN_Y^p";
    pub const Z_P: &str = "NN_Z^p";
    pub const M_P: &str = "NN_M^p";
    pub const C_P: &str = "NN_C^p";
    pub const MERGE_P: &str = "NN_merge^p";
    pub const M_Q: &str = "NN_M^q";
    pub const Z_Q: &str = "NN_Z^q";
    pub const Y_GIVEN_A: &str = "NN_YgivenA";
}

/// The groups updated by selective fine-tuning.
pub const M_GROUPS: [&str; 2] = [groups::M_P, groups::M_Q];

/// Initial log-variance of `q(m|x)` in a freshly initialized model.
///
/// The output head of `NN_M^q` starts at zero weights with this bias, so a
/// model trained only on clean data infers `m` close to the null vector.
const M_Q_INITIAL_LOG_VAR: f64 = -6.0;

/// A dense layer whose input is a concatenation of named parts. Each part has
/// its own weight block, so parts living on different row sets can be
/// projected separately and summed after gathering.
#[derive(Clone, Debug)]
struct SplitLayer {
    prefix: String,
    parts: Vec<(&'static str, usize)>,
    out: usize,
    relu: bool,
}

impl SplitLayer {
    fn weight(&self, part: &str) -> String {
        format!("{}/w_{part}", self.prefix)
    }

    fn bias(&self) -> String {
        format!("{}/b", self.prefix)
    }

    fn register(&self, store: &mut ParameterStore, group: &str, init: Init, rng: &mut RngStream) -> Result<(), GradError> {
        let fan_in: usize = self.parts.iter().map(|p| p.1).sum();
        let std = if self.relu { 2.0 } else { 1.0 };
        let std = (std / fan_in as f64).sqrt();
        for &(part, dim) in &self.parts {
            let w = match init {
                Init::Random => rng.normal_tensor(&[dim, self.out]).map(|v| v * std),
                Init::Zero => Tensor::zeros(&[dim, self.out]),
            };
            store.insert(self.weight(part), group, w)?;
        }
        store.insert(self.bias(), group, Tensor::zeros(&[self.out]))
    }

    fn project(&self, g: &mut Graph, b: &Binder, part: &str, x: Var) -> Result<Var, GradError> {
        let w = b.var(g, &self.weight(part))?;
        g.matmul(x, w)
    }

    /// Projection of one-hot rows: picks rows of the weight block.
    fn project_one_hot(&self, g: &mut Graph, b: &Binder, part: &str, idx: &[usize]) -> Result<Var, GradError> {
        let w = b.var(g, &self.weight(part))?;
        g.gather_rows(w, idx)
    }

    fn finish(&self, g: &mut Graph, b: &Binder, pre: Var) -> Result<Var, GradError> {
        let bias = b.var(g, &self.bias())?;
        let h = g.add_bias(pre, bias)?;
        if self.relu {
            g.relu(h)
        } else {
            Ok(h)
        }
    }
}

/// Split first layer plus an optional ordinary tail.
#[derive(Clone, Debug)]
struct Head {
    first: SplitLayer,
    tail: Option<Mlp>,
}

impl Head {
    /// `hidden` ReLU layers over the concatenated parts, then a linear output of width `out`.
    fn new(prefix: &str, parts: Vec<(&'static str, usize)>, hidden: &[usize], out: usize) -> Self {
        match hidden.split_first() {
            None => Self {
                first: SplitLayer {
                    prefix: format!("{prefix}/in"),
                    parts,
                    out,
                    relu: false,
                },
                tail: None,
            },
            Some((&h0, rest)) => {
                let mut layers = rest.to_vec();
                layers.push(out);
                Self {
                    first: SplitLayer {
                        prefix: format!("{prefix}/in"),
                        parts,
                        out: h0,
                        relu: true,
                    },
                    tail: Some(Mlp::new(format!("{prefix}/tail"), h0, &layers, false)),
                }
            }
        }
    }

    fn register(&self, store: &mut ParameterStore, group: &str, init: Init, rng: &mut RngStream) -> Result<(), GradError> {
        self.first.register(store, group, init, rng)?;
        if let Some(t) = &self.tail {
            t.register(store, group, init, rng)?;
        }
        Ok(())
    }

    fn finish(&self, g: &mut Graph, b: &Binder, pre: Var) -> Result<Var, GradError> {
        let h = self.first.finish(g, b, pre)?;
        match &self.tail {
            Some(t) => t.forward(g, b, h),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
struct Nets {
    y: Mlp,
    z: Mlp,
    m: Mlp,
    c: Option<Mlp>,
    merge: Head,
    m_post: Mlp,
    /// Single variant: trunk over `x` alone. Absent for the generic variant,
    /// whose z-posterior context is the raw `[x, a, c]`.
    z_trunk: Option<Mlp>,
    z_post: Head,
    y_given_a: Option<Mlp>,
}

impl Nets {
    fn build(spec: &CamaSpec) -> Self {
        let w = &spec.widths;
        let last = |v: &[usize]| *v.last().expect("validated non-empty");
        let y = Mlp::new(groups::Y_P, spec.classes, &w.y, true);
        let z = Mlp::new(groups::Z_P, spec.dim_z, &w.z, true);
        let m = Mlp::new(groups::M_P, spec.dim_m, &w.m, true);
        let mut m_layers = w.m_posterior.clone();
        m_layers.push(2 * spec.dim_m);
        let m_post = Mlp::new(groups::M_Q, spec.dim_x, &m_layers, false);
        let mut merge_parts = vec![("y", last(&w.y)), ("z", last(&w.z)), ("m", last(&w.m))];
        let (c, z_trunk, z_post, y_given_a) = match spec.variant {
            Variant::Single => {
                let (trunk, ctx) = if w.z_posterior_trunk.is_empty() {
                    (None, spec.dim_x)
                } else {
                    let t = Mlp::new(format!("{}/trunk", groups::Z_Q), spec.dim_x, &w.z_posterior_trunk, true);
                    (Some(t), last(&w.z_posterior_trunk))
                };
                let parts = vec![("ctx", ctx), ("y", spec.classes), ("m", spec.dim_m)];
                let head = Head::new(groups::Z_Q, parts, &w.z_posterior, 2 * spec.dim_z);
                (None, trunk, head, None)
            }
            Variant::Generic { dim_a, dim_c } => {
                let c = Mlp::new(groups::C_P, dim_c, &w.c, true);
                merge_parts.push(("c", last(&w.c)));
                let parts = vec![("ctx", spec.dim_x + dim_a + dim_c), ("y", spec.classes), ("m", spec.dim_m)];
                let hidden: Vec<usize> = w.z_posterior_trunk.iter().chain(&w.z_posterior).copied().collect();
                let head = Head::new(groups::Z_Q, parts, &hidden, 2 * spec.dim_z);
                let mut ya = w.y_given_a.clone();
                ya.push(spec.classes);
                let ya = Mlp::new(groups::Y_GIVEN_A, dim_a, &ya, false);
                (Some(c), None, head, Some(ya))
            }
        };
        let merge = Head::new(groups::MERGE_P, merge_parts, &w.merge, spec.dim_x);
        Self {
            y,
            z,
            m,
            c,
            merge,
            m_post,
            z_trunk,
            z_post,
            y_given_a,
        }
    }
}

/// Row layout of an expanded evaluation: expanded row `r` pairs observation
/// `src[r]` with class `class[r]` and the `m` value in row `m_row[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub src: Vec<usize>,
    pub class: Vec<usize>,
    pub m_row: Vec<usize>,
}

impl Expansion {
    /// One expanded row per observation with the given labels; `m` row = observation row.
    pub fn labeled(y: &[usize]) -> Self {
        Self {
            src: (0..y.len()).collect(),
            class: y.to_vec(),
            m_row: (0..y.len()).collect(),
        }
    }

    /// Rows ordered `(i, c)` with class fastest.
    pub fn all_classes(n: usize, classes: usize) -> Self {
        let mut ex = Self::with_capacity(n * classes);
        for i in 0..n {
            for c in 0..classes {
                ex.push(i, c, i);
            }
        }
        ex
    }

    fn with_capacity(r: usize) -> Self {
        Self {
            src: Vec::with_capacity(r),
            class: Vec::with_capacity(r),
            m_row: Vec::with_capacity(r),
        }
    }

    pub(crate) fn push(&mut self, src: usize, class: usize, m_row: usize) {
        self.src.push(src);
        self.class.push(class);
        self.m_row.push(m_row);
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Per-expanded-row quantities shared by every objective.
#[derive(Clone, Copy, Debug)]
pub struct ExpandedTerms {
    /// `log p(x | y, z, m[, c])`, one entry per expanded row.
    pub log_lik: Var,
    /// `log p(y)` (single) or `log p(y | a)` (generic) per expanded row.
    pub log_prior_y: Var,
    pub q_z: DiagGaussian,
    pub z: Var,
    /// Decoder output: logits for Bernoulli, the mean for Gaussian.
    pub decoded: Var,
}

/// Observed inputs placed on a tape. `a` and `c` are present for the generic variant only.
#[derive(Clone, Copy, Debug)]
pub struct ObservedVars {
    pub x: Var,
    pub a: Option<Var>,
    pub c: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CamaModel {
    pub spec: CamaSpec,
    pub params: ParameterStore,
}

impl CamaModel {
    /// Randomly initialized model.
    pub fn new(spec: CamaSpec, rng: &RngStream) -> Result<Self, CamaError> {
        let mut model = Self::with_init(spec, Init::Random, rng)?;
        let nets = Nets::build(&model.spec);
        let head = nets.m_post.layers() - 1;
        let dm = model.spec.dim_m;
        let w = model.params.get_mut(&nets.m_post.weight_name(head)).expect("registered");
        w.data_mut().fill(0.0);
        let bias = model.params.get_mut(&nets.m_post.bias_name(head)).expect("registered");
        bias.data_mut()[dm..].fill(M_Q_INITIAL_LOG_VAR);
        Ok(model)
    }

    /// Every parameter zero: decoders emit a constant, both posteriors are
    /// standard normal and `p(y | a)` is uniform.
    pub fn zeroed(spec: CamaSpec) -> Result<Self, CamaError> {
        Self::with_init(spec, Init::Zero, &RngStream::new(0, 0))
    }

    fn with_init(spec: CamaSpec, init: Init, rng: &RngStream) -> Result<Self, CamaError> {
        spec.validate()?;
        let nets = Nets::build(&spec);
        let mut params = ParameterStore::new();
        let stream = |label: &str| rng.derive_named(label);
        nets.y.register(&mut params, groups::Y_P, init, &mut stream(groups::Y_P))?;
        nets.z.register(&mut params, groups::Z_P, init, &mut stream(groups::Z_P))?;
        nets.m.register(&mut params, groups::M_P, init, &mut stream(groups::M_P))?;
        if let Some(c) = &nets.c {
            c.register(&mut params, groups::C_P, init, &mut stream(groups::C_P))?;
        }
        nets.merge.register(&mut params, groups::MERGE_P, init, &mut stream(groups::MERGE_P))?;
        nets.m_post.register(&mut params, groups::M_Q, init, &mut stream(groups::M_Q))?;
        let mut zq = stream(groups::Z_Q);
        if let Some(t) = &nets.z_trunk {
            t.register(&mut params, groups::Z_Q, init, &mut zq)?;
        }
        nets.z_post.register(&mut params, groups::Z_Q, init, &mut zq)?;
        if let Some(ya) = &nets.y_given_a {
            ya.register(&mut params, groups::Y_GIVEN_A, init, &mut stream(groups::Y_GIVEN_A))?;
        }
        Ok(Self { spec, params })
    }

    /// The null manipulation, `do(m = 0)`, for `n` rows.
    pub fn null_m(&self, n: usize) -> Tensor {
        Tensor::zeros(&[n, self.spec.dim_m])
    }

    fn nets(&self) -> Nets {
        Nets::build(&self.spec)
    }

    /// Places observations on the tape as constants.
    pub fn place_inputs(&self, g: &mut Graph, x: &Tensor, cov: Option<&super::Covariates>) -> Result<ObservedVars, CamaError> {
        let x = g.constant(x.clone());
        let (a, c) = self.place_covariates(g, cov)?;
        Ok(ObservedVars { x, a, c })
    }

    pub(crate) fn place_covariates(
        &self,
        g: &mut Graph,
        cov: Option<&super::Covariates>,
    ) -> Result<(Option<Var>, Option<Var>), CamaError> {
        if !self.spec.is_generic() {
            return Ok((None, None));
        }
        let cov = cov.ok_or(CamaError::MissingCovariates)?;
        Ok((Some(g.constant(cov.a.clone())), Some(g.constant(cov.c.clone()))))
    }

    /// `q(m | x)`, one row per observation.
    pub fn m_posterior(&self, g: &mut Graph, b: &Binder, x: Var) -> Result<DiagGaussian, CamaError> {
        let head = self.nets().m_post.forward(g, b, x)?;
        Ok(DiagGaussian::from_head(g, head)?)
    }

    /// Per-observation `[n, C]` matrix of `log p(y = c)` or `log p(y = c | a)`.
    pub fn log_prior_y_table(&self, g: &mut Graph, b: &Binder, n: usize, a: Option<Var>) -> Result<Var, CamaError> {
        let classes = self.spec.classes;
        match (&self.nets().y_given_a, a) {
            (Some(net), Some(a)) => {
                let logits = net.forward(g, b, a)?;
                Ok(g.log_softmax(logits)?)
            }
            (Some(_), None) => Err(CamaError::MissingCovariates),
            (None, _) => Ok(g.constant(Tensor::full(&[n, classes], -(classes as f64).ln()))),
        }
    }

    /// Picks `table[src[r], class[r]]` for every expanded row.
    pub fn pick(&self, g: &mut Graph, table: Var, ex: &Expansion) -> Result<Var, CamaError> {
        let rows = g.gather_rows(table, &ex.src)?;
        let mask = g.constant(Tensor::one_hot(&ex.class, self.spec.classes));
        let picked = g.mul(rows, mask)?;
        Ok(g.sum_axis(picked, 1)?)
    }

    /// Projects the `m` rows for the decoder (`NN_M^p` then its merge block).
    pub fn decoder_m(&self, g: &mut Graph, b: &Binder, m: Var) -> Result<Var, CamaError> {
        let nets = self.nets();
        let h = nets.m.forward(g, b, m)?;
        Ok(nets.merge.first.project(g, b, "m", h)?)
    }

    /// Projects the `m` rows for the z-posterior.
    pub fn encoder_m(&self, g: &mut Graph, b: &Binder, m: Var) -> Result<Var, CamaError> {
        Ok(self.nets().z_post.first.project(g, b, "m", m)?)
    }

    /// Per-observation z-posterior context, already projected.
    pub fn encoder_context(&self, g: &mut Graph, b: &Binder, inp: &ObservedVars) -> Result<Var, CamaError> {
        let nets = self.nets();
        let ctx = match (&nets.z_trunk, inp.a, inp.c) {
            (Some(t), _, _) => t.forward(g, b, inp.x)?,
            (None, Some(a), Some(c)) => g.concat(&[inp.x, a, c])?,
            (None, None, None) => inp.x,
            _ => return Err(CamaError::MissingCovariates),
        };
        Ok(nets.z_post.first.project(g, b, "ctx", ctx)?)
    }

    /// Per-observation projected co-parent features (generic variant).
    pub fn decoder_c(&self, g: &mut Graph, b: &Binder, c: Option<Var>) -> Result<Option<Var>, CamaError> {
        let nets = self.nets();
        match (&nets.c, c) {
            (Some(net), Some(c)) => {
                let h = net.forward(g, b, c)?;
                Ok(Some(nets.merge.first.project(g, b, "c", h)?))
            }
            (Some(_), None) => Err(CamaError::MissingCovariates),
            (None, _) => Ok(None),
        }
    }

    /// `q(z | x, y, m[, a, c])` on expanded rows.
    pub fn z_posterior(
        &self,
        g: &mut Graph,
        b: &Binder,
        ctx: Var,
        m_proj: Var,
        ex: &Expansion,
    ) -> Result<DiagGaussian, CamaError> {
        let nets = self.nets();
        let c = g.gather_rows(ctx, &ex.src)?;
        let y = nets.z_post.first.project_one_hot(g, b, "y", &ex.class)?;
        let m = g.gather_rows(m_proj, &ex.m_row)?;
        let pre = g.add(c, y)?;
        let pre = g.add(pre, m)?;
        let head = nets.z_post.finish(g, b, pre)?;
        Ok(DiagGaussian::from_head(g, head)?)
    }

    /// Decoder output on expanded rows.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Binder,
        z: Var,
        m_proj: Var,
        c_proj: Option<Var>,
        ex: &Expansion,
    ) -> Result<Var, CamaError> {
        let nets = self.nets();
        let classes = self.spec.classes;
        let onehots = g.constant(Tensor::identity(classes));
        let hy = nets.y.forward(g, b, onehots)?;
        let y_proj = nets.merge.first.project(g, b, "y", hy)?;
        let y = g.gather_rows(y_proj, &ex.class)?;
        let hz = nets.z.forward(g, b, z)?;
        let zp = nets.merge.first.project(g, b, "z", hz)?;
        let m = g.gather_rows(m_proj, &ex.m_row)?;
        let mut pre = g.add(y, zp)?;
        pre = g.add(pre, m)?;
        if let Some(cp) = c_proj {
            let c = g.gather_rows(cp, &ex.src)?;
            pre = g.add(pre, c)?;
        }
        Ok(nets.merge.finish(g, b, pre)?)
    }

    /// `log p(x | decoded)` per expanded row.
    pub fn log_lik(&self, g: &mut Graph, x: Var, decoded: Var, ex: &Expansion) -> Result<Var, CamaError> {
        let xe = g.gather_rows(x, &ex.src)?;
        Ok(match self.spec.likelihood {
            Likelihood::Bernoulli => bernoulli_log_lik_logits(g, xe, decoded)?,
            Likelihood::GaussianUnitVariance => unit_gaussian_log_lik(g, xe, decoded)?,
        })
    }

    /// Decoder mean from its raw output.
    pub fn mean_from_decoded(&self, g: &mut Graph, decoded: Var) -> Result<Var, CamaError> {
        Ok(match self.spec.likelihood {
            Likelihood::Bernoulli => g.sigmoid(decoded)?,
            Likelihood::GaussianUnitVariance => decoded,
        })
    }

    /// Everything an objective needs on expanded rows, given `m` values
    /// (`[rows, dim_m]`) and z-noise `eps_z` (`[ex.len(), dim_z]`).
    pub fn expanded_terms(
        &self,
        g: &mut Graph,
        b: &Binder,
        inp: &ObservedVars,
        m: Var,
        ex: &Expansion,
        eps_z: &Tensor,
    ) -> Result<ExpandedTerms, CamaError> {
        let n = g.shape(inp.x)[0];
        let ctx = self.encoder_context(g, b, inp)?;
        let mq = self.encoder_m(g, b, m)?;
        let q_z = self.z_posterior(g, b, ctx, mq, ex)?;
        let z = sample_with_noise(g, &q_z, eps_z)?;
        let mp = self.decoder_m(g, b, m)?;
        let cp = self.decoder_c(g, b, inp.c)?;
        let decoded = self.decode(g, b, z, mp, cp, ex)?;
        let log_lik = self.log_lik(g, inp.x, decoded, ex)?;
        let table = self.log_prior_y_table(g, b, n, inp.a)?;
        let log_prior_y = self.pick(g, table, ex)?;
        Ok(ExpandedTerms {
            log_lik,
            log_prior_y,
            q_z,
            z,
            decoded,
        })
    }
}
