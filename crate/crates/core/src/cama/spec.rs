use serde::{Deserialize, Serialize};

use super::CamaError;

/// Which causal graph the model follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Variant {
    /// `Y, Z, M -> X`, for a single observed modality such as images.
    Single,
    /// Markov blanket of `Y`: parents `A -> Y`, and `Y, C, Z, M -> X`.
    Generic { dim_a: usize, dim_c: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// Pixel intensities in `[0, 1]`; the decoder emits logits.
    Bernoulli,
    /// Real-valued measurements; the decoder emits the mean of a unit-variance Gaussian.
    GaussianUnitVariance,
}

/// Hidden-layer widths of every network. All hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widths {
    /// `NN_Y^p`: one-hot label to features.
    pub y: Vec<usize>,
    /// `NN_Z^p`.
    pub z: Vec<usize>,
    /// `NN_M^p`, deeper than the others.
    pub m: Vec<usize>,
    /// `NN_C^p` (generic variant only).
    pub c: Vec<usize>,
    /// `NN_merge^p` hidden layers before the output projection.
    pub merge: Vec<usize>,
    /// `NN_M^q` hidden layers before the mean/log-variance head.
    pub m_posterior: Vec<usize>,
    /// Single variant: trunk applied to `x` alone before `y` and `m` join.
    /// Generic variant: the first hidden layers over the joined `[x, a, c, y, m]`.
    pub z_posterior_trunk: Vec<usize>,
    /// `NN_Z^q` hidden layers after `y` and `m` join.
    pub z_posterior: Vec<usize>,
    /// `p(y | a)` hidden layers (generic variant only).
    pub y_given_a: Vec<usize>,
}

impl Widths {
    /// Every network at the same width, with the default depths:
    /// two layers for most networks, four for `NN_M^p` and one for the merge.
    pub fn uniform(h: usize) -> Self {
        Self {
            y: vec![h, h],
            z: vec![h, h],
            m: vec![h, h, h, h],
            c: vec![h, h],
            merge: vec![h],
            m_posterior: vec![h, h],
            z_posterior_trunk: vec![h],
            z_posterior: vec![h],
            y_given_a: vec![h, h],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamaSpec {
    pub variant: Variant,
    pub dim_x: usize,
    /// Number of classes `C`.
    pub classes: usize,
    pub dim_z: usize,
    pub dim_m: usize,
    pub widths: Widths,
    pub likelihood: Likelihood,
}

impl CamaSpec {
    /// Image model over `side x side` pixels with the given hidden width.
    pub fn image(side: usize, width: usize) -> Self {
        Self {
            variant: Variant::Single,
            dim_x: side * side,
            classes: 10,
            dim_z: 64,
            dim_m: 32,
            widths: Widths::uniform(width),
            likelihood: Likelihood::Bernoulli,
        }
    }

    /// Measurement model with 5 parents, 5 co-parents, 10 children, 5 classes.
    pub fn measurement(width: usize) -> Self {
        Self::generic(5, 5, 10, 5, width)
    }

    pub fn generic(dim_a: usize, dim_c: usize, dim_x: usize, classes: usize, width: usize) -> Self {
        Self {
            variant: Variant::Generic { dim_a, dim_c },
            dim_x,
            classes,
            dim_z: 64,
            dim_m: 32,
            widths: Widths::uniform(width),
            likelihood: Likelihood::GaussianUnitVariance,
        }
    }

    pub fn is_generic(&self) -> bool {
        matches!(self.variant, Variant::Generic { .. })
    }

    pub fn dim_a(&self) -> usize {
        match self.variant {
            Variant::Generic { dim_a, .. } => dim_a,
            Variant::Single => 0,
        }
    }

    pub fn dim_c(&self) -> usize {
        match self.variant {
            Variant::Generic { dim_c, .. } => dim_c,
            Variant::Single => 0,
        }
    }

    pub fn validate(&self) -> Result<(), CamaError> {
        let bad = |msg: &str| Err(CamaError::InvalidSpec(msg.to_string()));
        if self.dim_x == 0 || self.dim_z == 0 || self.dim_m == 0 {
            return bad("dim_x, dim_z and dim_m must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if let Variant::Generic { dim_a, dim_c } = self.variant {
            if dim_a == 0 || dim_c == 0 {
                return bad("generic variant requires positive dim_a and dim_c");
            }
            if self.widths.c.is_empty() || self.widths.y_given_a.is_empty() {
                return bad("generic variant requires NN_C^p and p(y|a) widths");
            }
        }
        let w = &self.widths;
        if w.y.is_empty() || w.z.is_empty() || w.m.is_empty() {
            return bad("feature networks need at least one layer");
        }
        let all = [&w.y, &w.z, &w.m, &w.c, &w.merge, &w.m_posterior, &w.z_posterior_trunk, &w.z_posterior, &w.y_given_a];
        if all.iter().any(|l| l.contains(&0)) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}
