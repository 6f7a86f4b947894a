//! Discriminative MLP classifiers trained with softmax cross-entropy.

use log::info;
use serde::{Deserialize, Serialize};

use crate::cama::{Binder, Init, Mlp};
use crate::ndgrad::{AdamConfig, GradError, Graph, ParameterStore, Tensor, Var};
use crate::stochastics::RngStream;

pub const GROUP: &str = "dnn";

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid classifier spec: {0}")]
    InvalidSpec(String),
    #[error("input has shape {got:?}, expected [n, {expected}]")]
    InputDim { got: Vec<usize>, expected: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifierSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Dropout rate after each hidden layer.
    pub dropout: Vec<f64>,
    pub classes: usize,
}

impl MlpClassifierSpec {
    /// Four hidden layers `[512, 256, 126, 512]` with dropout `[0.25, 0.25, 0.25, 0.5]`.
    pub fn image(input: usize) -> Self {
        Self {
            input,
            hidden: vec![512, 256, 126, 512],
            dropout: vec![0.25, 0.25, 0.25, 0.5],
            classes: 10,
        }
    }

    /// Input `[a, c, x]` of width 20, hidden `[64, 16, 32]`, dropout `[0.25, 0.25, 0.5]`.
    pub fn measurement() -> Self {
        Self {
            input: 20,
            hidden: vec![64, 16, 32],
            dropout: vec![0.25, 0.25, 0.5],
            classes: 5,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.hidden.len() != self.dropout.len() {
            return Err(BaselineError::InvalidSpec(format!(
                "{} hidden layers but {} dropout rates",
                self.hidden.len(),
                self.dropout.len()
            )));
        }
        if self.input == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(BaselineError::InvalidSpec("dimensions must be positive and classes >= 2".into()));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(BaselineError::InvalidSpec("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn net(&self) -> Mlp {
        let mut layers = self.hidden.clone();
        layers.push(self.classes);
        Mlp::new(GROUP, self.input, &layers, false)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub spec: MlpClassifierSpec,
    pub params: ParameterStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ClassifierTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub step_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl Classifier {
    pub fn new(spec: MlpClassifierSpec, rng: &RngStream) -> Result<Self, BaselineError> {
        Self::with_init(spec, Init::Random, rng)
    }

    pub fn zeroed(spec: MlpClassifierSpec) -> Result<Self, BaselineError> {
        Self::with_init(spec, Init::Zero, &RngStream::new(0, 0))
    }

    fn with_init(spec: MlpClassifierSpec, init: Init, rng: &RngStream) -> Result<Self, BaselineError> {
        spec.validate()?;
        let mut params = ParameterStore::new();
        spec.net().register(&mut params, GROUP, init, &mut rng.derive_named(GROUP))?;
        Ok(Self { spec, params })
    }

    fn check(&self, x: &Tensor) -> Result<(), BaselineError> {
        if x.rank() != 2 || x.cols() != self.spec.input {
            return Err(BaselineError::InputDim {
                got: x.shape().to_vec(),
                expected: self.spec.input,
            });
        }
        Ok(())
    }

    /// Logits on a tape; `dropout` supplies the noise stream in training mode.
    pub fn logits_on(
        &self,
        g: &mut Graph,
        b: &Binder,
        x: Var,
        dropout: Option<&mut RngStream>,
    ) -> Result<Var, BaselineError> {
        let net = self.spec.net();
        let Some(rng) = dropout else {
            return Ok(net.forward(g, b, x)?);
        };
        let rates = &self.spec.dropout;
        let mut hook = |g: &mut Graph, layer: usize, h: Var| -> Result<Var, GradError> {
            let p = rates[layer];
            if p == 0.0 {
                return Ok(h);
            }
            let keep = 1.0 - p;
            let mask = Tensor::new(
                g.shape(h).to_vec(),
                (0..g.value(h).len())
                    .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect(),
            )?;
            let m = g.constant(mask);
            g.mul(h, m)
        };
        Ok(net.forward_masked(g, b, x, &mut hook)?)
    }

    /// Class probabilities with dropout off.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor, BaselineError> {
        self.check(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = self.logits_on(&mut g, &Binder::frozen(&self.params), xv, None)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }

    /// Mean cross-entropy at `labels` and its gradient with respect to `x` (dropout off).
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), BaselineError> {
        self.check(x)?;
        if labels.len() != x.rows() {
            return Err(BaselineError::LabelCount {
                rows: x.rows(),
                labels: labels.len(),
            });
        }
        let mut g = Graph::new();
        let xv = g.input("x", x.clone());
        let logits = self.logits_on(&mut g, &Binder::frozen(&self.params), xv, None)?;
        let loss = cross_entropy(&mut g, logits, labels, self.spec.classes)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), grads.input("x").expect("x is an input").clone()))
    }
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], classes: usize) -> Result<Var, GradError> {
    let lp = g.log_softmax(logits)?;
    let mask = g.constant(Tensor::one_hot(labels, classes));
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Minibatch Adam on cross-entropy with dropout; keeps the parameters of the
/// epoch with the best validation accuracy (latest on ties) when a validation
/// split is given.
pub fn train_classifier(
    spec: MlpClassifierSpec,
    x: &Tensor,
    labels: &[usize],
    validation: Option<(&Tensor, &[usize])>,
    opts: &ClassifierTrainOptions,
    rng: &RngStream,
) -> Result<(Classifier, ClassifierReport), BaselineError> {
    let mut clf = Classifier::new(spec, &rng.derive_named("init"))?;
    clf.check(x)?;
    if labels.len() != x.rows() {
        return Err(BaselineError::LabelCount {
            rows: x.rows(),
            labels: labels.len(),
        });
    }
    opts.adam.validate()?;
    let mut report = ClassifierReport::default();
    let mut best: Option<(f64, ParameterStore)> = None;
    let n = x.rows();
    for epoch in 0..opts.epochs {
        let mut erng = rng.derive(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        erng.shuffle(&mut order);
        for idx in order.chunks(opts.batch_size.max(1)) {
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let logits = clf.logits_on(&mut g, &Binder::all(&clf.params), xv, Some(&mut erng))?;
            let loss = cross_entropy(&mut g, logits, &yb, clf.spec.classes)?;
            report.step_loss.push(g.value(loss).item());
            let grads = g.backward(loss)?.into_params();
            let grads = clf.params.select_gradients(&grads, None);
            clf.params.adam_step(&grads, &opts.adam, None)?;
        }
        if let Some((vx, vy)) = validation {
            let acc = accuracy(&clf.classify(vx)?, vy);
            report.validation_accuracy.push(acc);
            info!("baseline epoch {epoch}: validation accuracy {acc:.4}");
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, clf.params.clone()));
                report.best_epoch = Some(epoch);
            }
        } else {
            report.best_epoch = Some(epoch);
        }
    }
    if let Some((_, p)) = best {
        clf.params.copy_values_from(&p)?;
    }
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = RngStream::new(seed, 0);
        let x = rng.normal_tensor(&[n, 6]);
        let y = (0..n).map(|_| rng.below(3)).collect();
        (x, y)
    }

    fn small() -> MlpClassifierSpec {
        MlpClassifierSpec {
            input: 6,
            hidden: vec![32, 16],
            dropout: vec![0.1, 0.0],
            classes: 3,
        }
    }

    #[test]
    fn presets() {
        let m = MlpClassifierSpec::measurement();
        assert_eq!(m.input, 20);
        assert_eq!(m.hidden, vec![64, 16, 32]);
        assert_eq!(MlpClassifierSpec::image(784).hidden, vec![512, 256, 126, 512]);
        let bad = MlpClassifierSpec { dropout: vec![0.5], ..m };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overfits_a_small_set() {
        let (x, y) = toy(32, 1);
        let opts = ClassifierTrainOptions {
            epochs: 125,
            batch_size: 8,
            adam: AdamConfig::with_learning_rate(5e-3),
        };
        let (clf, report) = train_classifier(small(), &x, &y, None, &opts, &RngStream::new(2, 0)).unwrap();
        assert_eq!(report.step_loss.len(), 500);
        assert_eq!(accuracy(&clf.classify(&x).unwrap(), &y), 1.0);
    }

    #[test]
    fn classify_contract() {
        let (x, _) = toy(5, 2);
        let clf = Classifier::new(small(), &RngStream::new(0, 0)).unwrap();
        let p = clf.classify(&x).unwrap();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, clf.classify(&x).unwrap());
        let zero = Classifier::zeroed(small()).unwrap();
        assert!(zero.classify(&x).unwrap().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(
            clf.classify(&Tensor::zeros(&[2, 5])),
            Err(BaselineError::InputDim { .. })
        ));
    }

    #[test]
    fn training_is_reproducible() {
        let (x, y) = toy(40, 3);
        let opts = ClassifierTrainOptions { epochs: 3, batch_size: 16, ..Default::default() };
        let run = || train_classifier(small(), &x, &y, Some((&x, &y)), &opts, &RngStream::new(5, 0)).unwrap();
        assert_eq!(run().0.params.checksums(), run().0.params.checksums());
    }
}
