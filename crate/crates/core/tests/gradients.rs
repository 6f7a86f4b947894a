//! Analytic gradients of every objective against central differences.

use cama_core::baseline::{cross_entropy, Classifier, MlpClassifierSpec};
use cama_core::cama::{
    cama_attack_loss, elbo_joint_on, elbo_marginal_on, groups, loss_aug_on, loss_ft_on, Binder, CamaModel, CamaSpec,
    LabeledBatch, Likelihood, ManipulationPosterior, ObjectiveWeights, PredictNoise, Variant, Widths,
};
use cama_core::ndgrad::gradcheck::{check_input, check_params, spread, GradCheck};
use cama_core::ndgrad::{Graph, ParameterStore, Tensor, Var};
use cama_core::stochastics::RngStream;

const TOL: f64 = 1e-4;

fn single() -> CamaSpec {
    CamaSpec {
        variant: Variant::Single,
        dim_x: 4,
        classes: 3,
        dim_z: 3,
        dim_m: 2,
        widths: Widths::uniform(6),
        likelihood: Likelihood::Bernoulli,
    }
}

fn generic() -> CamaSpec {
    let mut s = CamaSpec::generic(2, 3, 4, 3, 6);
    s.dim_z = 3;
    s.dim_m = 2;
    s
}

fn model(spec: CamaSpec, seed: u64) -> CamaModel {
    let mut m = CamaModel::new(spec, &RngStream::new(seed, 0)).unwrap();
    let mut rng = RngStream::new(seed, 1);
    let names: Vec<String> = m.params.group_entries(groups::M_Q).map(str::to_string).collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    jitter_biases(&mut m.params, seed);
    m
}

/// Zero biases put ReLU inputs exactly on the kink (e.g. a null `m`), where
/// central differences see half the slope; move them off it.
fn jitter_biases(store: &mut ParameterStore, seed: u64) {
    let mut rng = RngStream::new(seed, 2);
    let names: Vec<String> = store.names().filter(|n| n.ends_with("b")).map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
}

fn batch(spec: &CamaSpec, n: usize, seed: u64) -> LabeledBatch {
    let mut rng = RngStream::new(seed, 7);
    let x = match spec.likelihood {
        Likelihood::Bernoulli => Tensor::new(
            vec![n, spec.dim_x],
            (0..n * spec.dim_x).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap(),
        Likelihood::GaussianUnitVariance => rng.normal_tensor(&[n, spec.dim_x]),
    };
    let y = (0..n).map(|_| rng.below(spec.classes)).collect();
    let clean = (0..n).map(|i| i % 2 == 0).collect();
    let b = LabeledBatch::new(x, y, clean);
    if spec.is_generic() {
        let a = rng.normal_tensor(&[n, spec.dim_a()]);
        let c = rng.normal_tensor(&[n, spec.dim_c()]);
        b.with_covariates(a, c)
    } else {
        b
    }
}

/// Checks parameter gradients of the scalar built by `f`.
fn params_check(store: &ParameterStore, f: &dyn Fn(&mut Graph, &Binder) -> Var) -> GradCheck {
    let mut g = Graph::new();
    let out = f(&mut g, &Binder::all(store));
    let grads = g.backward(out).unwrap().into_params();
    assert!(!grads.is_empty());
    check_params(store, &grads, 4, &mut |s: &ParameterStore| {
        let mut g = Graph::new();
        let out = f(&mut g, &Binder::frozen(s));
        g.value(out).item()
    })
}

fn assert_passes(what: &str, r: &GradCheck) {
    assert!(r.passes(TOL), "{what}: max rel error {:.3e} at {}", r.max_rel_error, r.worst);
}

fn objectives_for(spec: CamaSpec) {
    let m = model(spec.clone(), 3);
    let data = batch(&spec, 5, 4);
    let (clean, manip) = data.partition();
    let rng = RngStream::new(11, 0);
    let weights = ObjectiveWeights { lambda: 0.3, alpha: 0.6, k: 2, u: 1 };
    let sum = |g: &mut Graph, v: Var| g.sum(v).unwrap();

    for mode in [ManipulationPosterior::Inferred, ManipulationPosterior::PointNull] {
        let r = params_check(&m.params, &|g, b| {
            let vars = m.place_inputs(g, &data.x, data.cov.as_ref()).unwrap();
            let e = elbo_joint_on(g, &m, b, &vars, &data.y, &rng, mode).unwrap();
            sum(g, e)
        });
        assert_passes(&format!("joint {mode:?}"), &r);
    }
    let r = params_check(&m.params, &|g, b| {
        let vars = m.place_inputs(g, &data.x, data.cov.as_ref()).unwrap();
        let e = elbo_marginal_on(g, &m, b, &vars, &rng).unwrap();
        sum(g, e)
    });
    assert_passes("marginal", &r);
    let r = params_check(&m.params, &|g, b| loss_aug_on(g, &m, b, &clean, &manip, &weights, &rng).unwrap());
    assert_passes("loss_aug", &r);
    let test = batch(&spec, 4, 9).observations();
    for flag in [false, true] {
        let r = params_check(&m.params, &|g, b| loss_ft_on(g, &m, b, &data, &test, &weights, &rng, flag).unwrap());
        assert_passes(&format!("loss_ft flag={flag}"), &r);
    }
}

#[test]
fn single_variant_objectives() {
    objectives_for(single());
}

#[test]
fn generic_variant_objectives() {
    objectives_for(generic());
}

#[test]
fn image_architecture_objectives() {
    let mut spec = CamaSpec::image(3, 8);
    spec.dim_z = 4;
    spec.dim_m = 3;
    objectives_for(spec);
}

fn attack_input_grad(spec: CamaSpec) {
    let m = model(spec.clone(), 5);
    let data = batch(&spec, 6, 2);
    let flat = m.flatten(&data.observations()).unwrap();
    let w = ObjectiveWeights { k: 3, u: 2, ..Default::default() };
    let noise = PredictNoise::draw(&m, 6, &w, &RngStream::new(3, 3)).unwrap();
    let (loss, grad) = cama_attack_loss(&m, &flat, &data.y, &noise).unwrap();
    assert!(loss >= 0.0);
    let r = check_input("flat", &flat, &grad, &spread(flat.len(), 40), &mut |t| {
        cama_attack_loss(&m, t, &data.y, &noise).unwrap().0
    });
    assert_passes("cama attack loss", &r);
}

#[test]
fn cama_attack_input_gradients() {
    attack_input_grad(single());
    attack_input_grad(generic());
}

#[test]
fn baseline_gradients() {
    let spec = MlpClassifierSpec {
        input: 5,
        hidden: vec![7, 6],
        dropout: vec![0.3, 0.0],
        classes: 3,
    };
    let mut clf = Classifier::new(spec, &RngStream::new(1, 0)).unwrap();
    jitter_biases(&mut clf.params, 1);
    let mut rng = RngStream::new(2, 0);
    let x = rng.normal_tensor(&[8, 5]);
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let (_, gx) = clf.loss_and_grad(&x, &y).unwrap();
    let r = check_input("x", &x, &gx, &spread(x.len(), 40), &mut |t| clf.loss_and_grad(t, &y).unwrap().0);
    assert_passes("baseline input", &r);

    let dropout = RngStream::new(4, 0);
    let r = params_check(&clf.params, &|g, b| {
        let xv = g.constant(x.clone());
        let mut d = dropout.clone();
        let logits = clf.logits_on(g, b, xv, Some(&mut d)).unwrap();
        cross_entropy(g, logits, &y, 3).unwrap()
    });
    assert_passes("baseline params with dropout", &r);
}
