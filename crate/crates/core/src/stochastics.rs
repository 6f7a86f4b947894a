//! Diagonal-Gaussian latents, likelihood terms and seeded random streams.
//!
//! Everything here builds nodes on an [`ndgrad::Graph`](crate::ndgrad::Graph)
//! so the terms can be differentiated. Per-row results are `n`-vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndgrad::{GradError, Graph, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const PROB_FLOOR: f64 = 1e-7;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for distinct stream ids under the same seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// A child stream keyed by `label`. Depends only on `(seed, stream, label)`,
    /// never on how much of the parent has been consumed.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(self.seed, splitmix(self.stream ^ splitmix(label.wrapping_add(1))))
    }

    /// Child stream keyed by a string label.
    pub fn derive_named(&self, label: &str) -> Self {
        let key = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.derive(key)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Tensor of independent standard-normal draws.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
        t
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.rng.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random_bool(p.clamp(0.0, 1.0))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Factorized Gaussian over a latent block, one row per batch element.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_var: Var,
}

impl DiagGaussian {
    /// Clamps `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(g: &mut Graph, mean: Var, log_var: Var) -> Result<Self, GradError> {
        if g.shape(mean) != g.shape(log_var) {
            return Err(GradError::ShapeMismatch {
                op: "diag_gaussian",
                node: g.len(),
                left: g.shape(mean).to_vec(),
                right: g.shape(log_var).to_vec(),
            });
        }
        let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    /// Splits a `[n, 2d]` head into mean (first `d` columns) and log-variance.
    pub fn from_head(g: &mut Graph, head: Var) -> Result<Self, GradError> {
        let width = g.shape(head)[1];
        let d = width / 2;
        let mean = g.slice_cols(head, 0, d)?;
        let log_var = g.slice_cols(head, d, d)?;
        Self::new(g, mean, log_var)
    }

    pub fn shape(&self, g: &Graph) -> Vec<usize> {
        g.shape(self.mean).to_vec()
    }
}

/// Draws `mean + exp(log_var / 2) * eps` with fresh standard-normal `eps`.
/// Returns the sample and the noise used.
pub fn sample_reparam(g: &mut Graph, q: &DiagGaussian, rng: &mut RngStream) -> Result<(Var, Tensor), GradError> {
    let eps = rng.normal_tensor(&q.shape(g));
    let z = sample_with_noise(g, q, &eps)?;
    Ok((z, eps))
}

/// Reparameterized sample with caller-supplied noise.
pub fn sample_with_noise(g: &mut Graph, q: &DiagGaussian, eps: &Tensor) -> Result<Var, GradError> {
    let half = g.scale(q.log_var, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps.clone());
    let scaled = g.mul(std, e)?;
    g.add(q.mean, scaled)
}

/// Per-row `sum_d [-ln(2 pi)/2 - log_var/2 - (x - mean)^2 / (2 exp(log_var))]`.
pub fn gaussian_log_prob(g: &mut Graph, x: Var, q: &DiagGaussian) -> Result<Var, GradError> {
    let diff = g.sub(x, q.mean)?;
    let sq = g.square(diff)?;
    let neg_lv = g.neg(q.log_var)?;
    let precision = g.exp(neg_lv)?;
    let maha = g.mul(sq, precision)?;
    let inner = g.add(maha, q.log_var)?;
    let per_dim = g.scale(inner, -0.5)?;
    let per_dim = g.add_scalar(per_dim, -HALF_LN_2PI)?;
    g.sum_axis(per_dim, 1)
}

/// Per-row log density of a standard normal.
pub fn standard_normal_log_prob(g: &mut Graph, x: Var) -> Result<Var, GradError> {
    let sq = g.square(x)?;
    let per_dim = g.scale(sq, -0.5)?;
    let per_dim = g.add_scalar(per_dim, -HALF_LN_2PI)?;
    g.sum_axis(per_dim, 1)
}

/// Per-row `KL(q || N(0, I)) = 0.5 * sum_d (mean^2 + exp(log_var) - log_var - 1)`.
pub fn kl_to_standard_normal(g: &mut Graph, q: &DiagGaussian) -> Result<Var, GradError> {
    let m2 = g.square(q.mean)?;
    let var = g.exp(q.log_var)?;
    let a = g.add(m2, var)?;
    let b = g.sub(a, q.log_var)?;
    let b = g.add_scalar(b, -1.0)?;
    let per_dim = g.scale(b, 0.5)?;
    g.sum_axis(per_dim, 1)
}

/// Per-row `sum x ln p + (1 - x) ln(1 - p)` with `p` clamped away from 0 and 1.
pub fn bernoulli_log_lik(g: &mut Graph, x: Var, probs: Var) -> Result<Var, GradError> {
    let p = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lp = g.log(p)?;
    let neg_p = g.neg(p)?;
    let one_minus_p = g.add_scalar(neg_p, 1.0)?;
    let lq = g.log(one_minus_p)?;
    let neg_x = g.neg(x)?;
    let one_minus_x = g.add_scalar(neg_x, 1.0)?;
    let a = g.mul(x, lp)?;
    let b = g.mul(one_minus_x, lq)?;
    let s = g.add(a, b)?;
    g.sum_axis(s, 1)
}

/// Bernoulli log-likelihood parameterized by logits, `sum x l - softplus(l)`.
/// Equal to [`bernoulli_log_lik`] at `p = sigmoid(l)` away from the clamp.
pub fn bernoulli_log_lik_logits(g: &mut Graph, x: Var, logits: Var) -> Result<Var, GradError> {
    let xl = g.mul(x, logits)?;
    let sp = g.softplus(logits)?;
    let s = g.sub(xl, sp)?;
    g.sum_axis(s, 1)
}

/// Per-row Gaussian log-likelihood with unit variance around `mean`.
pub fn unit_gaussian_log_lik(g: &mut Graph, x: Var, mean: Var) -> Result<Var, GradError> {
    let diff = g.sub(x, mean)?;
    standard_normal_log_prob(g, diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn gaussian(g: &mut Graph, mean: Tensor, log_var: Tensor) -> DiagGaussian {
        let m = g.input("mean", mean);
        let lv = g.input("log_var", log_var);
        DiagGaussian::new(g, m, lv).unwrap()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec())
    }

    #[test]
    fn reparam_with_fixed_noise() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, row(&[0.5, -1.0]), row(&[0.0, 0.0]));
        let z0 = sample_with_noise(&mut g, &q, &row(&[0.0, 0.0])).unwrap();
        assert_eq!(g.value(z0).data(), &[0.5, -1.0]);
        let z1 = sample_with_noise(&mut g, &q, &row(&[1.0, 1.0])).unwrap();
        assert_eq!(g.value(z1).data(), &[1.5, 0.0]);
    }

    #[test]
    fn reparam_gradients() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, row(&[0.3]), row(&[0.4]));
        let eps = row(&[0.7]);
        let z = sample_with_noise(&mut g, &q, &eps).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input("mean").unwrap().item(), 1.0);
        let h = 1e-5;
        let f = |lv: f64| 0.3 + (0.5 * lv).exp() * 0.7;
        let fd = (f(0.4 + h) - f(0.4 - h)) / (2.0 * h);
        let an = grads.input("log_var").unwrap().item();
        assert!((an - fd).abs() / fd.abs() < 1e-6, "{an} vs {fd}");
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = RngStream::new(7, 0);
        let mut g = Graph::new();
        let n = 100_000;
        let q = gaussian(&mut g, Tensor::zeros(&[n, 3]), Tensor::zeros(&[n, 3]));
        let (z, _) = sample_reparam(&mut g, &q, &mut rng).unwrap();
        let means = g.sum_axis(z, 0).unwrap();
        for m in g.value(means).data() {
            assert!((m / n as f64).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, row(&[0.0, 0.0]), row(&[-50.0, 50.0]));
        assert_eq!(g.value(q.log_var).data(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn standard_normal_log_density_values() {
        let mut g = Graph::new();
        let q1 = gaussian(&mut g, row(&[0.0]), row(&[0.0]));
        let x1 = g.constant(row(&[0.0]));
        let lp1 = gaussian_log_prob(&mut g, x1, &q1).unwrap();
        assert!((g.value(lp1).item() + 0.918939).abs() < 1e-6);
        let q2 = gaussian(&mut g, row(&[0.0, 0.0]), row(&[0.0, 0.0]));
        let x2 = g.constant(row(&[0.0, 0.0]));
        let lp2 = gaussian_log_prob(&mut g, x2, &q2).unwrap();
        assert!((g.value(lp2).item() + 1.837877).abs() < 1e-6);
        let sn = standard_normal_log_prob(&mut g, x2).unwrap();
        assert_eq!(g.value(sn).item(), g.value(lp2).item());
    }

    #[test]
    fn log_density_integrates_to_one() {
        // Trapezoid rule over a wide grid for N(0.7, exp(-0.6)).
        let (mean, log_var) = (0.7, -0.6);
        let n = 20_001;
        let (lo, hi) = (-12.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let mut g = Graph::new();
        let q = gaussian(&mut g, Tensor::full(&[n, 1], mean), Tensor::full(&[n, 1], log_var));
        let x = g.constant(Tensor::matrix(n, 1, xs));
        let lp = gaussian_log_prob(&mut g, x, &q).unwrap();
        let d = g.value(lp).data();
        let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0].exp() + w[1].exp()) * step).sum();
        assert!((integral - 1.0).abs() < 1e-4, "{integral}");
    }

    #[test]
    fn kl_values() {
        let mut g = Graph::new();
        let q0 = gaussian(&mut g, row(&[0.0, 0.0]), row(&[0.0, 0.0]));
        let k0 = kl_to_standard_normal(&mut g, &q0).unwrap();
        assert_eq!(g.value(k0).item(), 0.0);
        let q1 = gaussian(&mut g, row(&[1.0]), row(&[0.0]));
        let k1 = kl_to_standard_normal(&mut g, &q1).unwrap();
        assert!((g.value(k1).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let n = 100_000;
        let (mean, log_var) = ([0.8, -0.4], [-0.5, 0.3]);
        let mut g = Graph::new();
        let means = Tensor::matrix(n, 2, (0..n).flat_map(|_| mean).collect());
        let lvs = Tensor::matrix(n, 2, (0..n).flat_map(|_| log_var).collect());
        let q = gaussian(&mut g, means, lvs);
        let mut rng = RngStream::new(11, 3);
        let (z, _) = sample_reparam(&mut g, &q, &mut rng).unwrap();
        let lq = gaussian_log_prob(&mut g, z, &q).unwrap();
        let lp = standard_normal_log_prob(&mut g, z).unwrap();
        let diff = g.sub(lq, lp).unwrap();
        let mc = g.value(diff).mean();
        let kl = kl_to_standard_normal(&mut g, &q).unwrap();
        let exact = g.value(kl).data()[0];
        assert!((mc - exact).abs() < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn bernoulli_values() {
        let mut g = Graph::new();
        let x = g.constant(row(&[1.0]));
        let p = g.constant(row(&[0.5]));
        let ll = bernoulli_log_lik(&mut g, x, p).unwrap();
        assert!((g.value(ll).item() + LN_2).abs() < 1e-12);

        let x = g.constant(row(&[0.0, 1.0]));
        let p = g.constant(row(&[0.0, 1.0]));
        let ll = bernoulli_log_lik(&mut g, x, p).unwrap();
        assert!(g.value(ll).item().abs() < 1e-6);

        let d = 7;
        let x = g.constant(Tensor::matrix(1, d, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
        let p = g.constant(Tensor::full(&[1, d], 0.5));
        let ll = bernoulli_log_lik(&mut g, x, p).unwrap();
        assert!((g.value(ll).item() + d as f64 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let mut g = Graph::new();
        let x = g.constant(row(&[0.2, 1.0, 0.0, 0.7]));
        let logits = g.constant(row(&[-1.3, 0.4, 2.2, 0.0]));
        let probs = g.sigmoid(logits).unwrap();
        let a = bernoulli_log_lik(&mut g, x, probs).unwrap();
        let b = bernoulli_log_lik_logits(&mut g, x, logits).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..5).map({
            let mut r = RngStream::new(42, 1);
            move |_| r.normal()
        }).collect();
        let b: Vec<f64> = (0..5).map({
            let mut r = RngStream::new(42, 1);
            move |_| r.normal()
        }).collect();
        let c: Vec<f64> = (0..5).map({
            let mut r = RngStream::new(42, 2);
            move |_| r.normal()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let parent = RngStream::new(42, 1);
        let mut used = parent.clone();
        used.normal();
        assert_eq!(parent.derive(5).stream_id(), used.derive(5).stream_id());
        assert_ne!(parent.derive(5).stream_id(), parent.derive(6).stream_id());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mean in -5.0f64..5.0, log_var in -9.0f64..9.0) {
            let mut g = Graph::new();
            let q = gaussian(&mut g, row(&[mean]), row(&[log_var]));
            let k = kl_to_standard_normal(&mut g, &q).unwrap();
            let v = g.value(k).item();
            prop_assert!(v >= 0.0);
            if mean == 0.0 && log_var == 0.0 {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn log_prob_peaks_at_mean(mean in -3.0f64..3.0, log_var in -3.0f64..3.0, dx in -2.0f64..2.0) {
            prop_assume!(dx.abs() > 1e-6);
            let mut g = Graph::new();
            let q = gaussian(&mut g, row(&[mean]), row(&[log_var]));
            let at = g.constant(row(&[mean]));
            let off = g.constant(row(&[mean + dx]));
            let a = gaussian_log_prob(&mut g, at, &q).unwrap();
            let b = gaussian_log_prob(&mut g, off, &q).unwrap();
            prop_assert!(g.value(a).item() > g.value(b).item());
        }
    }
}
