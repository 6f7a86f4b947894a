use std::f64::consts::LN_2;

use super::*;
use crate::ndgrad::{Graph, Tensor};
use crate::stochastics::{kl_to_standard_normal, RngStream};

fn toy_spec() -> CamaSpec {
    CamaSpec {
        variant: Variant::Single,
        dim_x: 4,
        classes: 2,
        dim_z: 3,
        dim_m: 2,
        widths: Widths::uniform(6),
        likelihood: Likelihood::Bernoulli,
    }
}

fn toy_generic() -> CamaSpec {
    let mut s = CamaSpec::generic(2, 3, 4, 3, 5);
    s.dim_z = 3;
    s.dim_m = 2;
    s
}

fn binary_batch(n: usize, seed: u64) -> LabeledBatch {
    let mut rng = RngStream::new(seed, 9);
    let x: Vec<f64> = (0..n * 4).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
    let y = (0..n).map(|_| rng.below(2)).collect();
    LabeledBatch::all_clean(Tensor::matrix(n, 4, x), y)
}

fn generic_batch(n: usize, seed: u64) -> LabeledBatch {
    let mut rng = RngStream::new(seed, 3);
    let x = rng.normal_tensor(&[n, 4]);
    let a = rng.normal_tensor(&[n, 2]);
    let c = rng.normal_tensor(&[n, 3]);
    let y = (0..n).map(|_| rng.below(3)).collect();
    LabeledBatch::all_clean(x, y).with_covariates(a, c)
}

fn random_model(spec: CamaSpec, seed: u64) -> CamaModel {
    let mut model = CamaModel::new(spec, &RngStream::new(seed, 0)).unwrap();
    // Give the m-posterior head non-trivial weights so `m` matters.
    let mut rng = RngStream::new(seed, 1);
    let names: Vec<String> = model.params.group_entries(groups::M_Q).map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    model
}

#[test]
fn zero_model_intervention_elbo_is_closed_form() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let batch = binary_batch(5, 1);
    let e = elbo_intervention(&model, &batch, &RngStream::new(3, 0)).unwrap();
    for &v in e.data() {
        assert!((v + 5.0 * LN_2).abs() < 1e-12, "{v}");
    }
}

#[test]
fn zero_model_joint_and_marginal_are_closed_form() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let batch = binary_batch(5, 2);
    let rng = RngStream::new(4, 0);
    let j = elbo_joint(&model, &batch, &rng).unwrap();
    assert!(j.data().iter().all(|v| (v + 5.0 * LN_2).abs() < 1e-12));
    let m = elbo_marginal(&model, &batch.observations(), &rng).unwrap();
    assert!(m.data().iter().all(|v| (v + 4.0 * LN_2).abs() < 1e-12));
}

#[test]
fn zero_model_predicts_uniform() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let batch = binary_batch(7, 3);
    let p = predict(&model, &batch.observations(), &ObjectiveWeights::default(), &RngStream::new(1, 1)).unwrap();
    assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn zero_generic_model_matches_unit_gaussian_oracle() {
    let model = CamaModel::zeroed(toy_generic()).unwrap();
    let batch = generic_batch(4, 5);
    let e = elbo_intervention(&model, &batch, &RngStream::new(2, 0)).unwrap();
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for i in 0..4 {
        let lik: f64 = batch.x.row(i).iter().map(|v| -half_ln_2pi - 0.5 * v * v).sum();
        let expected = lik - 3f64.ln();
        assert!((e.data()[i] - expected).abs() < 1e-12);
    }
    let p = predict(&model, &batch.observations(), &ObjectiveWeights::default(), &RngStream::new(1, 1)).unwrap();
    assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn intervention_rejects_manipulated_rows() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let mut batch = binary_batch(4, 1);
    batch.clean[2] = false;
    let err = elbo_intervention(&model, &batch, &RngStream::new(0, 0)).unwrap_err();
    assert!(matches!(err, CamaError::ManipulatedRowsInIntervention(1)));
}

#[test]
fn objectives_are_deterministic_per_stream() {
    let model = random_model(toy_spec(), 7);
    let batch = binary_batch(6, 4);
    let rng = RngStream::new(11, 2);
    assert_eq!(elbo_intervention(&model, &batch, &rng).unwrap(), elbo_intervention(&model, &batch, &rng).unwrap());
    assert_eq!(elbo_joint(&model, &batch, &rng).unwrap(), elbo_joint(&model, &batch, &rng).unwrap());
    let obs = batch.observations();
    let w = ObjectiveWeights::default();
    assert_eq!(predict(&model, &obs, &w, &rng).unwrap(), predict(&model, &obs, &w, &rng).unwrap());
}

#[test]
fn point_null_joint_equals_intervention_bit_exactly() {
    for spec in [toy_spec(), toy_generic()] {
        let model = random_model(spec.clone(), 8);
        let batch = if spec.is_generic() { generic_batch(5, 1) } else { binary_batch(5, 1) };
        let rng = RngStream::new(5, 5);
        let a = elbo_intervention(&model, &batch, &rng).unwrap();
        let b = elbo_joint_with(&model, &batch, &rng, ManipulationPosterior::PointNull).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn marginal_dominates_every_class_joint() {
    for spec in [toy_spec(), toy_generic()] {
        let model = random_model(spec.clone(), 9);
        let batch = if spec.is_generic() { generic_batch(6, 2) } else { binary_batch(6, 2) };
        let rng = RngStream::new(6, 6);
        let m = elbo_marginal(&model, &batch.observations(), &rng).unwrap();
        let mut best = vec![f64::NEG_INFINITY; 6];
        for c in 0..spec.classes {
            let mut b = batch.clone();
            b.y = vec![c; 6];
            let j = elbo_joint(&model, &b, &rng).unwrap();
            for (bv, &jv) in best.iter_mut().zip(j.data()) {
                *bv = bv.max(jv);
            }
        }
        for (mv, bv) in m.data().iter().zip(&best) {
            assert!(mv >= bv);
            assert!(*mv <= bv + (spec.classes as f64).ln() + 1e-12);
        }
    }
}

#[test]
fn predictions_are_distributions() {
    let model = random_model(toy_spec(), 10);
    let batch = binary_batch(9, 6);
    let w = ObjectiveWeights { k: 3, u: 2, ..Default::default() };
    let p = predict(&model, &batch.observations(), &w, &RngStream::new(0, 3)).unwrap();
    for i in 0..9 {
        let s: f64 = p.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.row(i).iter().all(|&v| v >= 0.0));
    }
    let bad = ObjectiveWeights { k: 0, ..Default::default() };
    assert!(predict(&model, &batch.observations(), &bad, &RngStream::new(0, 3)).is_err());
}

#[test]
fn prediction_does_not_depend_on_chunking() {
    let model = random_model(toy_spec(), 12);
    let batch = binary_batch(300, 7);
    let obs = batch.observations();
    let w = ObjectiveWeights { k: 8, u: 1, ..Default::default() };
    let rng = RngStream::new(2, 2);
    let whole = predict(&model, &obs, &w, &rng).unwrap();
    let noise = PredictNoise::draw(&model, 300, &w, &rng).unwrap();
    let direct = {
        let mut g = Graph::new();
        let vars = model.place_inputs(&mut g, &obs.x, None).unwrap();
        let s = predict::class_scores_on(&mut g, &model, &Binder::frozen(&model.params), &vars, &noise).unwrap();
        let p = g.softmax(s).unwrap();
        g.value(p).clone()
    };
    for (a, b) in whole.data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loss_aug_boundaries() {
    let model = random_model(toy_spec(), 13);
    let clean = binary_batch(4, 8);
    let mut manip = binary_batch(5, 9);
    manip.clean = vec![false; 5];
    let rng = RngStream::new(1, 7);
    let w1 = ObjectiveWeights { lambda: 1.0, ..Default::default() };
    let v1 = loss_aug(&model, &clean, &manip, &w1, &rng).unwrap();
    assert!((v1 - elbo_intervention(&model, &clean, &rng).unwrap().mean()).abs() < 1e-12);
    let w0 = ObjectiveWeights { lambda: 0.0, ..Default::default() };
    let v0 = loss_aug(&model, &clean, &manip, &w0, &rng).unwrap();
    assert!((v0 - elbo_joint(&model, &manip, &rng).unwrap().mean()).abs() < 1e-12);
    let empty = manip.select_rows(&[]);
    let half = ObjectiveWeights::default();
    assert!(matches!(
        loss_aug(&model, &clean, &empty, &half, &rng),
        Err(CamaError::EmptyManipulatedBatch(_))
    ));
    assert!(loss_aug(&model, &manip, &manip, &half, &rng).is_err());
}

#[test]
fn loss_aug_is_convex_combination_of_equal_terms() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let clean = binary_batch(4, 8);
    let mut manip = binary_batch(5, 9);
    manip.clean = vec![false; 5];
    let v = loss_aug(&model, &clean, &manip, &ObjectiveWeights::default(), &RngStream::new(0, 0)).unwrap();
    assert!((v + 5.0 * LN_2).abs() < 1e-12);
}

#[test]
fn loss_ft_boundaries_and_flag() {
    let model = random_model(toy_spec(), 14);
    let train = binary_batch(4, 10);
    let test = binary_batch(6, 11).observations();
    let rng = RngStream::new(3, 3);
    let a1 = ObjectiveWeights { alpha: 1.0, ..Default::default() };
    let joint = loss_ft(&model, &train, &test, &a1, &rng, false).unwrap();
    assert!((joint - elbo_joint(&model, &train, &rng).unwrap().mean()).abs() < 1e-12);
    let interv = loss_ft(&model, &train, &test, &a1, &rng, true).unwrap();
    assert!((interv - elbo_intervention(&model, &train, &rng).unwrap().mean()).abs() < 1e-12);
    let a0 = ObjectiveWeights { alpha: 0.0, ..Default::default() };
    let marg = loss_ft(&model, &train, &test, &a0, &rng, false).unwrap();
    assert!((marg - elbo_marginal(&model, &test, &rng).unwrap().mean()).abs() < 1e-12);
}

#[test]
fn z_permutation_leaves_elbo_unchanged() {
    let spec = toy_spec();
    let model = random_model(spec.clone(), 15);
    let perm = [2usize, 0, 1];
    let mut permuted = model.clone();
    // Decoder input rows and encoder output columns (mean and log-variance).
    let w = model.params.get("NN_Z^p/0/w").unwrap();
    let rows: Vec<usize> = perm.to_vec();
    *permuted.params.get_mut("NN_Z^p/0/w").unwrap() = w.select_rows(&rows);
    let last = model
        .params
        .names()
        .filter(|n| n.starts_with("NN_Z^q/tail/"))
        .map(str::to_string)
        .collect::<Vec<_>>();
    let (wn, bn) = (&last[last.len() - 2], &last[last.len() - 1]);
    let cols: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|p| p + 3)).collect();
    *permuted.params.get_mut(wn).unwrap() = model.params.get(wn).unwrap().select_cols(&cols);
    let b = model.params.get(bn).unwrap();
    *permuted.params.get_mut(bn).unwrap() = Tensor::vector(cols.iter().map(|&c| b.data()[c]).collect());

    let batch = binary_batch(5, 12);
    let eps = RngStream::new(0, 4).normal_tensor(&[5, 3]);
    let eval = |m: &CamaModel, eps: &Tensor| {
        let mut g = Graph::new();
        let vars = m.place_inputs(&mut g, &batch.x, None).unwrap();
        let b = Binder::frozen(&m.params);
        let null = g.constant(m.null_m(5));
        let ex = Expansion::labeled(&batch.y);
        let t = m.expanded_terms(&mut g, &b, &vars, null, &ex, eps).unwrap();
        let kl = kl_to_standard_normal(&mut g, &t.q_z).unwrap();
        let e = g.add(t.log_lik, t.log_prior_y).unwrap();
        let e = g.sub(e, kl).unwrap();
        g.value(e).clone()
    };
    let a = eval(&model, &eps);
    let b = eval(&permuted, &eps.select_cols(&perm));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn counterfactual_of_zero_model_is_half() {
    let model = CamaModel::zeroed(toy_spec()).unwrap();
    let batch = binary_batch(3, 1);
    let r = counterfactual_reconstruct(&model, &batch.observations(), &ObjectiveWeights::default(), &RngStream::new(0, 0))
        .unwrap();
    assert!(r.data().iter().all(|&v| v == 0.5));
}

#[test]
fn counterfactual_matches_reconstruction_when_m_is_null() {
    // A fresh model's q(m|x) has zero-mean output, so do(m = 0) changes nothing.
    let model = CamaModel::new(toy_spec(), &RngStream::new(4, 4)).unwrap();
    let batch = binary_batch(4, 2);
    let obs = batch.observations();
    let a = reconstruct_with(&model, &obs, &batch.y, None, true).unwrap();
    let b = reconstruct_with(&model, &obs, &batch.y, None, false).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6);
        assert!((0.0..=1.0).contains(x));
    }
}

#[test]
fn fine_tune_with_zero_steps_is_a_no_op() {
    let mut model = random_model(toy_spec(), 16);
    let before = model.params.checksums();
    let train = binary_batch(4, 1);
    let test = binary_batch(4, 2).observations();
    let opts = FineTuneOptions { steps: 0, ..Default::default() };
    let r = fine_tune(&mut model, &train, &test, &ObjectiveWeights::default(), &opts, &RngStream::new(0, 0)).unwrap();
    assert!(r.objective.is_empty());
    assert_eq!(model.params.checksums(), before);
}

#[test]
fn fine_tune_touches_only_m_groups() {
    for spec in [toy_spec(), toy_generic()] {
        let mut model = random_model(spec.clone(), 17);
        let before = model.params.checksums();
        let (train, test) = if spec.is_generic() {
            (generic_batch(8, 1), generic_batch(8, 2).observations())
        } else {
            (binary_batch(8, 1), binary_batch(8, 2).observations())
        };
        let opts = FineTuneOptions { steps: 5, batch_size: 4, ..Default::default() };
        let r = fine_tune(&mut model, &train, &test, &ObjectiveWeights::default(), &opts, &RngStream::new(0, 0)).unwrap();
        assert_eq!(r.objective.len(), 5);
        let after = model.params.checksums();
        for (group, sum) in &before {
            if M_GROUPS.contains(&group.as_str()) {
                assert_ne!(&after[group], sum, "{group} should move");
            } else {
                assert_eq!(&after[group], sum, "{group} changed");
            }
        }
    }
}

#[test]
fn training_increases_the_objective() {
    let mut model = CamaModel::new(toy_spec(), &RngStream::new(1, 0)).unwrap();
    let data = binary_batch(32, 20);
    let opts = TrainOptions {
        epochs: 50,
        batch_size: 8,
        adam: crate::ndgrad::AdamConfig::with_learning_rate(3e-3),
        validation_k: None,
    };
    let r = train(&mut model, &data, None, &ObjectiveWeights::default(), &opts, &RngStream::new(2, 0)).unwrap();
    assert_eq!(r.step_objective.len(), 200);
    let first: f64 = r.step_objective[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = r.step_objective[190..].iter().sum::<f64>() / 10.0;
    assert!(last > first, "{first} -> {last}");
}

#[test]
fn training_is_reproducible() {
    let data = binary_batch(16, 21);
    let val = binary_batch(8, 22);
    let run = || {
        let mut model = CamaModel::new(toy_spec(), &RngStream::new(1, 0)).unwrap();
        let opts = TrainOptions { epochs: 3, batch_size: 4, ..Default::default() };
        let w = ObjectiveWeights { k: 2, ..Default::default() };
        train(&mut model, &data, Some(&val), &w, &opts, &RngStream::new(2, 0)).unwrap();
        model.params.checksums()
    };
    assert_eq!(run(), run());
}

#[test]
fn importance_estimates_are_exact_for_zero_model_and_above_the_bounds() {
    let zero = CamaModel::zeroed(toy_spec()).unwrap();
    let batch = binary_batch(4, 2);
    for mode in [ManipulationPosterior::PointNull, ManipulationPosterior::Inferred] {
        let lp = log_likelihood_is(&zero, &batch, 7, &RngStream::new(1, 0), mode).unwrap();
        for v in lp.data() {
            assert!((v + 5.0 * LN_2).abs() < 1e-12);
        }
    }
    let model = random_model(toy_generic(), 4);
    let batch = generic_batch(6, 5);
    let reps = 300;
    for mode in [ManipulationPosterior::PointNull, ManipulationPosterior::Inferred] {
        let lp = log_likelihood_is(&model, &batch, 2000, &RngStream::new(2, 0), mode).unwrap();
        for i in 0..6 {
            let rows = vec![i; reps];
            let e = elbo_joint_with(&model, &batch.select_rows(&rows), &RngStream::new(6, i as u64), mode).unwrap();
            assert!(lp.data()[i] >= e.mean() - 0.05, "{mode:?} row {i}: {} < {}", lp.data()[i], e.mean());
        }
    }
}
