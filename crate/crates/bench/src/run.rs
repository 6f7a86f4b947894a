//! Running an experiment: train (or load) every model arm per seed, then walk
//! the manipulation grid.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use cama_core::attacks::{fgsm, pgd, AttackConfig, AttackError, CamaVictim};
use cama_core::baseline::{
    accuracy, train_classifier, BaselineError, Classifier, ClassifierTrainOptions, MlpClassifierSpec,
};
use cama_core::cama::{
    fine_tune, predict, train, CamaError, CamaModel, CamaSpec, FineTuneOptions, LabeledBatch, ObjectiveWeights,
    Observations, TrainOptions,
};
use cama_core::datagen::{
    augment_shift_range, generate_measurement, load_idx, shift_children, shift_coparents, shift_image, DataError,
    Axis, ImageDataset, MeasurementDataset, MeasurementMechanism, Misspecification, RoleMap, Split, CLASSES, DIM_A, DIM_C,
    DIM_X,
};
use cama_core::ndgrad::{AdamConfig, Tensor};
use cama_core::stochastics::RngStream;
use log::info;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, DataSource, ExperimentConfig, ExperimentKind, Manipulation, ModelKind, Regime};
use crate::models::{load_model_like, save_model, CheckpointError, TrainedModel};
use crate::results::{write_csv, ResultRow, ResultsError};

/// Substream ids under each run seed.
pub mod streams {
    pub const BASELINE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const GRID: u64 = 6;
    pub const AUGMENT: u64 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("no seeds given")]
    NoSeeds,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cama(#[from] CamaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop after training and checkpointing.
    pub train_only: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// One trained model of an experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Arm {
    pub name: String,
    pub kind: ModelKind,
    /// Children relabeled as co-parents.
    pub relabel: usize,
}

pub fn arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    let mut out = Vec::new();
    for &kind in &cfg.models {
        let relabels = match (&cfg.relabel, kind) {
            (Some(r), ModelKind::CamaGeneric) => r.clone(),
            _ => vec![0],
        };
        for relabel in relabels {
            let name = if relabel == 0 {
                kind.as_str().to_string()
            } else {
                format!("{}-mis{relabel}", kind.as_str())
            };
            out.push(Arm { name, kind, relabel });
        }
    }
    out
}

pub fn checkpoint_name(arm: &Arm, seed: u64) -> String {
    format!("{}-seed{seed}.ckpt", arm.name)
}

struct Images {
    train: ImageDataset,
    val: ImageDataset,
    test: ImageDataset,
}

enum Data {
    Measurement {
        train: MeasurementDataset,
        val: MeasurementDataset,
        test: MeasurementDataset,
        mech: MeasurementMechanism,
    },
    Images(Rc<Images>),
}

impl Data {
    fn test_labels(&self) -> &[usize] {
        match self {
            Data::Measurement { test, .. } => &test.y,
            Data::Images(im) => &im.test.labels,
        }
    }

    fn clean_test(&self) -> Raw {
        match self {
            Data::Measurement { test, .. } => Raw::Measurement(test.clone()),
            Data::Images(im) => Raw::Images(im.test.images.clone()),
        }
    }

    fn manipulate(&self, m: Manipulation, magnitude: f64) -> Result<Raw, RunError> {
        Ok(match (self, m) {
            (Data::Images(im), Manipulation::Vertical | Manipulation::Horizontal) => Raw::Images(shift_image(
                &im.test.images,
                im.test.side,
                magnitude,
                m.axis().expect("image shift"),
            )?),
            (Data::Measurement { test, mech, .. }, Manipulation::Coparent) => {
                Raw::Measurement(shift_coparents(test, mech, magnitude)?)
            }
            (Data::Measurement { test, .. }, Manipulation::Child) => Raw::Measurement(shift_children(test, magnitude)?),
            _ => unreachable!("validated manipulation {m:?}"),
        })
    }
}

fn load_images(path: &Path, train_rows: usize, test_rows: Option<usize>, vf: f64) -> Result<Images, RunError> {
    let [tri, trl, tei, tel] = crate::config::IMAGE_FILES.map(|f| path.join(f));
    let all = load_idx(tri, trl)?.head(train_rows);
    let mut test = load_idx(tei, tel)?;
    if let Some(n) = test_rows {
        test = test.head(n);
    }
    let n_val = (all.rows() as f64 * vf).round() as usize;
    let val = all.select_rows(&(0..n_val).collect::<Vec<_>>());
    let train = all.select_rows(&(n_val..all.rows()).collect::<Vec<_>>());
    info!("images: {} train, {} validation, {} test", train.rows(), val.rows(), test.rows());
    Ok(Images { train, val, test })
}

/// A test set before conversion to any model's input layout.
#[derive(Clone)]
enum Raw {
    Measurement(MeasurementDataset),
    Images(Tensor),
}

enum Input {
    Cama(Observations),
    Dnn(Tensor),
}

fn flat_measurement(ds: &MeasurementDataset) -> Tensor {
    Tensor::hstack(&[&ds.a, &ds.c, &ds.x])
}

struct Fitted {
    arm: Arm,
    model: TrainedModel,
    roles: Option<RoleMap>,
    /// Labeled training data for the fine-tuning objective (CAMA only).
    train: Option<LabeledBatch>,
}

impl Fitted {
    fn input(&self, raw: &Raw) -> Result<Input, RunError> {
        Ok(match (&self.model, raw) {
            (TrainedModel::Cama(_), Raw::Measurement(ds)) => {
                let v = self.roles.as_ref().expect("generic arm has roles").project(ds)?;
                Input::Cama(Observations::with_covariates(v.x, v.a, v.c))
            }
            (TrainedModel::Cama(_), Raw::Images(t)) => Input::Cama(Observations::new(t.clone())),
            (TrainedModel::Dnn(_), Raw::Measurement(ds)) => Input::Dnn(flat_measurement(ds)),
            (TrainedModel::Dnn(_), Raw::Images(t)) => Input::Dnn(t.clone()),
        })
    }
}

fn roles_for(relabel: usize) -> Result<RoleMap, RunError> {
    let truth = RoleMap::measurement();
    Ok(if relabel == 0 {
        truth
    } else {
        truth.misspecify(Misspecification::RelabelChildrenAsCoparents(relabel))?
    })
}

fn weights_of(cfg: &ExperimentConfig) -> ObjectiveWeights {
    let w = &cfg.weights;
    ObjectiveWeights {
        lambda: w.lambda.unwrap(),
        alpha: w.alpha.unwrap(),
        k: w.k.unwrap(),
        u: w.u.unwrap(),
    }
}

fn labeled_views(roles: &RoleMap, ds: &MeasurementDataset) -> Result<LabeledBatch, RunError> {
    let v = roles.project(ds)?;
    Ok(LabeledBatch::all_clean(v.x, ds.y.clone()).with_covariates(v.a, v.c))
}

/// CAMA training and validation batches.
fn cama_batches(
    cfg: &ExperimentConfig,
    data: &Data,
    roles: Option<&RoleMap>,
    seed: u64,
) -> Result<(LabeledBatch, Option<LabeledBatch>), RunError> {
    match data {
        Data::Measurement { train, val, .. } => {
            let roles = roles.expect("generic arm has roles");
            let v = (val.rows() > 0).then(|| labeled_views(roles, val)).transpose()?;
            Ok((labeled_views(roles, train)?, v))
        }
        Data::Images(im) => {
            let tr = match cfg.regime {
                Regime::Clean => LabeledBatch::all_clean(im.train.images.clone(), im.train.labels.clone()),
                Regime::Augmented { range, axis } => {
                    augment_shift_range(&im.train, range, axis, &mut RngStream::new(seed, streams::AUGMENT))?.0
                }
            };
            let v = (im.val.rows() > 0)
                .then(|| LabeledBatch::all_clean(im.val.images.clone(), im.val.labels.clone()));
            Ok((tr, v))
        }
    }
}

type Split2 = (Tensor, Vec<usize>, Option<(Tensor, Vec<usize>)>);

fn baseline_data(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<Split2, RunError> {
    match data {
        Data::Measurement { train, val, .. } => Ok((
            flat_measurement(train),
            train.y.clone(),
            (val.rows() > 0).then(|| (flat_measurement(val), val.y.clone())),
        )),
        Data::Images(im) => {
            let (x, y) = match cfg.regime {
                Regime::Clean => (im.train.images.clone(), im.train.labels.clone()),
                Regime::Augmented { range, axis } => {
                    let b = augment_shift_range(&im.train, range, axis, &mut RngStream::new(seed, streams::AUGMENT))?.0;
                    (b.x, b.y)
                }
            };
            let v = (im.val.rows() > 0).then(|| (im.val.images.clone(), im.val.labels.clone()));
            Ok((x, y, v))
        }
    }
}

fn blank_model(arm: &Arm, data: &Data, width: usize, roles: Option<&RoleMap>) -> Result<TrainedModel, RunError> {
    Ok(match (arm.kind, data) {
        (ModelKind::Dnn, Data::Measurement { .. }) => TrainedModel::Dnn(Classifier::zeroed(MlpClassifierSpec::measurement())?),
        (ModelKind::Dnn, Data::Images(im)) => {
            TrainedModel::Dnn(Classifier::zeroed(MlpClassifierSpec::image(im.train.side * im.train.side))?)
        }
        (ModelKind::CamaGeneric, _) => {
            let (da, dc, dx) = roles.expect("generic arm has roles").dims();
            TrainedModel::Cama(CamaModel::zeroed(CamaSpec::generic(da, dc, dx, CLASSES, width))?)
        }
        (ModelKind::CamaSingle, Data::Images(im)) => {
            TrainedModel::Cama(CamaModel::zeroed(CamaSpec::image(im.train.side, width))?)
        }
        (ModelKind::CamaSingle, _) => unreachable!("validated: cama-single needs images"),
    })
}

/// Everything that determines a trained model, hashed into a cache key.
fn cache_key(cfg: &ExperimentConfig, arm: &Arm, seed: u64, blank: &TrainedModel) -> String {
    let data = match &cfg.data {
        DataSource::Measurement { seed: s } => json!({ "measurement": s.unwrap_or(seed) }),
        other => json!(other),
    };
    let training = if arm.kind.is_cama() {
        json!({ "train": cfg.train.clone_without_paths(), "lambda": cfg.weights.lambda, "k": cfg.weights.k })
    } else {
        json!(cfg.baseline)
    };
    let key = json!({
        "arm": arm,
        "params": blank.params().iter().map(|(n, _, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>(),
        "data": data,
        "regime": cfg.regime,
        "training": training,
        "seed": seed,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl crate::config::TrainSettings {
    fn clone_without_paths(&self) -> Self {
        Self {
            cache_dir: None,
            load_dir: None,
            ..self.clone()
        }
    }
}

fn fit(cfg: &ExperimentConfig, arm: &Arm, data: &Data, seed: u64) -> Result<Fitted, RunError> {
    let roles = (arm.kind == ModelKind::CamaGeneric).then(|| roles_for(arm.relabel)).transpose()?;
    let blank = blank_model(arm, data, cfg.train.width.unwrap(), roles.as_ref())?;
    let train_batch = if arm.kind.is_cama() {
        Some(cama_batches(cfg, data, roles.as_ref(), seed)?)
    } else {
        None
    };
    let cached = cfg
        .train
        .cache_dir
        .as_ref()
        .map(|d| d.join(format!("{}-{}.ckpt", arm.name, cache_key(cfg, arm, seed, &blank))));
    let model = if let Some(dir) = &cfg.train.load_dir {
        load_model_like(&blank, dir.join(checkpoint_name(arm, seed)))?
    } else if let Some(path) = cached.as_ref().filter(|p| p.is_file()) {
        info!("{} seed {seed}: reusing {}", arm.name, path.display());
        load_model_like(&blank, path)?
    } else {
        let t0 = Instant::now();
        let model = match &blank {
            TrainedModel::Cama(b) => {
                let (tr, val) = train_batch.as_ref().expect("cama batches");
                let mut m = CamaModel::new(b.spec.clone(), &RngStream::new(seed, streams::INIT))?;
                let opts = TrainOptions {
                    epochs: cfg.train.epochs.unwrap(),
                    batch_size: cfg.train.batch_size.unwrap(),
                    adam: AdamConfig::with_learning_rate(cfg.train.learning_rate.unwrap()),
                    validation_k: cfg.weights.k,
                };
                train(&mut m, tr, val.as_ref(), &weights_of(cfg), &opts, &RngStream::new(seed, streams::TRAIN))?;
                TrainedModel::Cama(m)
            }
            TrainedModel::Dnn(b) => {
                let (x, y, val) = baseline_data(cfg, data, seed)?;
                let opts = ClassifierTrainOptions {
                    epochs: cfg.baseline.epochs.unwrap(),
                    batch_size: cfg.baseline.batch_size.unwrap(),
                    adam: AdamConfig::with_learning_rate(cfg.baseline.learning_rate.unwrap()),
                };
                let v = val.as_ref().map(|(x, y)| (x, y.as_slice()));
                let (c, _) =
                    train_classifier(b.spec.clone(), &x, &y, v, &opts, &RngStream::new(seed, streams::BASELINE))?;
                TrainedModel::Dnn(c)
            }
        };
        info!("{} seed {seed}: trained in {:.1}s", arm.name, t0.elapsed().as_secs_f64());
        if let Some(path) = &cached {
            std::fs::create_dir_all(path.parent().expect("cache file has a directory"))?;
            save_model(&model, path)?;
        }
        model
    };
    Ok(Fitted {
        arm: arm.clone(),
        model,
        roles,
        train: train_batch.map(|(t, _)| t),
    })
}

fn evaluate(model: &TrainedModel, input: &Input, labels: &[usize], w: &ObjectiveWeights, rng: &RngStream) -> Result<f64, RunError> {
    Ok(match (model, input) {
        (TrainedModel::Cama(m), Input::Cama(obs)) => accuracy(&predict(m, obs, w, rng)?, labels),
        (TrainedModel::Dnn(c), Input::Dnn(x)) => accuracy(&c.classify(x)?, labels),
        _ => unreachable!("input built for this model"),
    })
}

/// White-box attack on the clean test inputs of one model.
fn attack(
    cfg: &ExperimentConfig,
    f: &Fitted,
    clean: &Input,
    labels: &[usize],
    eps: f64,
    rng: &RngStream,
) -> Result<Input, RunError> {
    let mut acfg = match (&f.model, &f.roles) {
        (TrainedModel::Cama(m), None) => AttackConfig::image(eps, m.spec.dim_x),
        (TrainedModel::Cama(_), Some(r)) => {
            let (da, dc, dx) = r.dims();
            AttackConfig::measurement(eps, da, dc, dx)
        }
        (TrainedModel::Dnn(c), _) if cfg.data.is_images() => AttackConfig::image(eps, c.spec.input),
        (TrainedModel::Dnn(_), _) => AttackConfig::measurement(eps, DIM_A, DIM_C, DIM_X),
    };
    acfg.iterations = cfg.attack.iterations.unwrap();
    acfg.step_size = cfg.attack.step_ratio.unwrap() * eps;
    acfg.random_start = cfg.attack.random_start.unwrap();
    let pgd_attack = cfg.grid.manipulation == Manipulation::Pgd;
    let mut rng = rng.derive_named("attack");
    Ok(match (&f.model, clean) {
        (TrainedModel::Cama(m), Input::Cama(obs)) => {
            let victim = CamaVictim::new(m, obs.rows(), &weights_of(cfg), &rng.derive_named("victim"))?;
            let flat = m.flatten(obs)?;
            let adv = if pgd_attack {
                pgd(&victim, &flat, labels, &acfg, &mut rng)?
            } else {
                fgsm(&victim, &flat, labels, &acfg)?
            };
            Input::Cama(m.unflatten(&adv)?)
        }
        (TrainedModel::Dnn(c), Input::Dnn(x)) => Input::Dnn(if pgd_attack {
            pgd(c, x, labels, &acfg, &mut rng)?
        } else {
            fgsm(c, x, labels, &acfg)?
        }),
        _ => unreachable!(),
    })
}

fn subset(n: usize, fraction: f64, rng: &RngStream) -> Vec<usize> {
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.clone().shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn manipulation_label(cfg: &ExperimentConfig) -> String {
    match (cfg.kind, cfg.finetune.axis) {
        (ExperimentKind::Disentangle, Some(axis)) => format!("{}|ft-{}", cfg.grid.manipulation.as_str(), axis.as_str()),
        _ => cfg.grid.manipulation.as_str().to_string(),
    }
}

fn walk_grid(cfg: &ExperimentConfig, f: &Fitted, data: &Data, seed: u64) -> Result<Vec<ResultRow>, RunError> {
    let w = weights_of(cfg);
    let labels = data.test_labels();
    let eval_rng = RngStream::new(seed, streams::EVAL);
    let clean_input = f.input(&data.clean_test())?;
    let clean_acc = evaluate(&f.model, &clean_input, labels, &w, &eval_rng)?;
    let manipulation = manipulation_label(cfg);
    let row = |magnitude: f64, fraction: f64, manipulated: f64, clean: f64, secs: f64| ResultRow {
        experiment_id: cfg.id.clone(),
        model: f.arm.name.clone(),
        regime: cfg.regime.label(),
        manipulation: manipulation.clone(),
        magnitude,
        finetune_fraction: fraction,
        seed,
        k: f.arm.kind.is_cama().then_some(w.k),
        manipulated_accuracy: manipulated,
        clean_accuracy: clean,
        wall_time_s: secs,
    };
    let fractions = if f.arm.kind.is_cama() { cfg.finetune_fractions() } else { Vec::new() };
    let ft_opts = FineTuneOptions {
        steps: cfg.finetune.steps.unwrap(),
        batch_size: cfg.finetune.batch_size.unwrap(),
        adam: AdamConfig::with_learning_rate(cfg.finetune.learning_rate.unwrap()),
        use_intervention_for_train: cfg.finetune.use_intervention.unwrap(),
    };
    let mut rows = Vec::new();
    for (gi, &magnitude) in cfg.grid.magnitudes.iter().enumerate() {
        let t0 = Instant::now();
        let grid_rng = RngStream::new(seed, streams::GRID).derive(gi as u64);
        let manipulated = if cfg.grid.manipulation.is_attack() {
            attack(cfg, f, &clean_input, labels, magnitude, &grid_rng)?
        } else {
            f.input(&data.manipulate(cfg.grid.manipulation, magnitude)?)?
        };
        let before = evaluate(&f.model, &manipulated, labels, &w, &eval_rng)?;
        rows.push(row(magnitude, 0.0, before, clean_acc, t0.elapsed().as_secs_f64()));
        info!("{} seed {seed} {manipulation} {magnitude}: {before:.4} (clean {clean_acc:.4})", f.arm.name);
        if fractions.is_empty() {
            continue;
        }
        let TrainedModel::Cama(base) = &f.model else { unreachable!() };
        // Disentangle fine-tunes on the other axis; everything else on the evaluated set.
        let other = match (cfg.kind, cfg.finetune.axis) {
            (ExperimentKind::Disentangle, Some(axis)) => {
                let m = match axis {
                    Axis::Vertical => Manipulation::Vertical,
                    Axis::Horizontal => Manipulation::Horizontal,
                };
                Some(f.input(&data.manipulate(m, magnitude)?)?)
            }
            _ => None,
        };
        let Input::Cama(ft_obs) = other.as_ref().unwrap_or(&manipulated) else { unreachable!() };
        for (fi, &fraction) in fractions.iter().enumerate() {
            let t1 = Instant::now();
            let rng = grid_rng.derive_named("finetune").derive(fi as u64);
            let idx = subset(ft_obs.rows(), fraction, &rng.derive_named("subset"));
            let mut tuned = base.clone();
            let report = fine_tune(
                &mut tuned,
                f.train.as_ref().expect("cama arm has training data"),
                &ft_obs.select_rows(&idx),
                &w,
                &ft_opts,
                &rng,
            )?;
            let tuned = TrainedModel::Cama(tuned);
            let after = evaluate(&tuned, &manipulated, labels, &w, &eval_rng)?;
            let clean_after = evaluate(&tuned, &clean_input, labels, &w, &eval_rng)?;
            info!(
                "  fine-tuned on {} rows ({fraction}): {after:.4}, clean {clean_after:.4}, final objective {:.3}",
                idx.len(),
                report.objective.last().copied().unwrap_or(f64::NAN)
            );
            rows.push(row(magnitude, fraction, after, clean_after, t1.elapsed().as_secs_f64()));
        }
    }
    Ok(rows)
}

/// Runs the experiment for every seed, writing `<id>.csv`,
/// `<id>.manifest.json` and `checkpoints/` under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<RunOutput, RunError> {
    config.validate()?;
    let cfg = config.resolved();
    if cfg.seeds.is_empty() {
        return Err(RunError::NoSeeds);
    }
    let arms = arms(&cfg);
    if let Some(dir) = &cfg.train.load_dir {
        for seed in &cfg.seeds {
            for arm in &arms {
                let p = dir.join(checkpoint_name(arm, *seed));
                if !p.is_file() {
                    return Err(RunError::MissingCheckpoint(p));
                }
            }
        }
    }
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let images = match &cfg.data {
        DataSource::Images {
            path,
            train_rows,
            test_rows,
            validation_fraction,
        } => Some(Rc::new(load_images(
            path,
            train_rows.unwrap(),
            *test_rows,
            validation_fraction.unwrap(),
        )?)),
        DataSource::Measurement { .. } => None,
    };
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut data_summary = Vec::new();
    for &seed in &cfg.seeds {
        let data = match (&images, &cfg.data) {
            (Some(im), _) => Data::Images(im.clone()),
            (None, DataSource::Measurement { seed: fixed }) => {
                let (ds, mech) = generate_measurement(fixed.unwrap_or(seed));
                Data::Measurement {
                    train: ds.subset(Split::Train),
                    val: ds.subset(Split::Val),
                    test: ds.subset(Split::Test),
                    mech,
                }
            }
            _ => unreachable!(),
        };
        data_summary.push(match &data {
            Data::Measurement { train, val, test, mech } => json!({
                "seed": seed, "mechanism_seed": mech.seed,
                "train": train.rows(), "validation": val.rows(), "test": test.rows(),
            }),
            Data::Images(im) => json!({
                "seed": seed, "train": im.train.rows(), "validation": im.val.rows(), "test": im.test.rows(),
            }),
        });
        for arm in &arms {
            let fitted = fit(&cfg, arm, &data, seed)?;
            let path = ckpt_dir.join(checkpoint_name(arm, seed));
            save_model(&fitted.model, &path)?;
            checkpoints.push(path);
            if !opts.train_only {
                rows.extend(walk_grid(&cfg, &fitted, &data, seed)?);
            }
        }
    }
    let csv_path = out_dir.join(format!("{}.csv", cfg.id));
    write_csv(&csv_path, &rows)?;
    let manifest_path = out_dir.join(format!("{}.manifest.json", cfg.id));
    let manifest = json!({
        "experiment_id": cfg.id,
        "config": cfg,
        "config_toml": cfg.to_toml(),
        "arms": arms,
        "data": data_summary,
        "train_only": opts.train_only,
        "rng": {
            "generator": "ChaCha8, one stream per (seed, stream id)",
            "streams": {
                "baseline": streams::BASELINE, "cama_init": streams::INIT, "cama_train": streams::TRAIN,
                "evaluation": streams::EVAL, "grid": streams::GRID, "augmentation": streams::AUGMENT,
            },
            "grid_point": "stream `grid` derived by grid index; attack and fine-tune noise derive from it",
            "evaluation": "clean and manipulated sets share the evaluation stream",
        },
        "finetune_subset": "uniform without replacement, round(fraction * rows) clamped to [1, rows]",
        "pgd_step": "step_ratio * epsilon",
        "results": csv_path,
        "rows": rows.len(),
        "checkpoints": checkpoints,
        "wall_time_s": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("json"))?;
    Ok(RunOutput {
        rows,
        csv_path,
        manifest_path,
        checkpoints,
    })
}
