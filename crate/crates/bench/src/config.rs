//! Experiment configuration files.
//!
//! TOML with dotted sections. Every optional key is filled in by
//! [`ExperimentConfig::resolved`], and the resolved form is what runs and what
//! lands in the run manifest.

use std::path::{Path, PathBuf};

use cama_core::datagen::Axis;
use serde::{Deserialize, Serialize};

/// Fine-tune fractions swept by a `finetune-fraction` experiment by default.
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ShiftSweep,
    AttackSweep,
    FinetuneFraction,
    Misspec,
    /// Fine-tune on one manipulation, evaluate on another.
    Disentangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CamaSingle,
    CamaGeneric,
    Dnn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::CamaSingle => "cama-single",
            ModelKind::CamaGeneric => "cama-generic",
            ModelKind::Dnn => "dnn",
        }
    }

    pub fn is_cama(&self) -> bool {
        !matches!(self, ModelKind::Dnn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    /// The synthetic generator. Without `seed` every run seed gets its own
    /// mechanism and sample.
    Measurement {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A directory holding the four gzipped IDX files.
    Images {
        path: PathBuf,
        /// Leading training images used (the first `validation_fraction` of
        /// them for validation).
        #[serde(default)]
        train_rows: Option<usize>,
        /// Leading test images used; all when absent.
        #[serde(default)]
        test_rows: Option<usize>,
        #[serde(default)]
        validation_fraction: Option<f64>,
    },
}

impl DataSource {
    pub fn is_images(&self) -> bool {
        matches!(self, DataSource::Images { .. })
    }
}

pub const IMAGE_FILES: [&str; 4] = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Regime {
    #[default]
    Clean,
    /// Training set doubled with copies shifted uniformly in `[-range, range]`.
    Augmented { range: f64, axis: Axis },
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::Clean => "clean".into(),
            Regime::Augmented { range, axis } => format!("aug-{}-{range}", axis.as_str()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manipulation {
    Vertical,
    Horizontal,
    /// Additive shift of the co-parents, children regenerated.
    Coparent,
    /// Additive shift of the children.
    Child,
    Fgsm,
    Pgd,
}

impl Manipulation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Manipulation::Vertical => "vertical",
            Manipulation::Horizontal => "horizontal",
            Manipulation::Coparent => "coparent",
            Manipulation::Child => "child",
            Manipulation::Fgsm => "fgsm",
            Manipulation::Pgd => "pgd",
        }
    }

    pub fn is_attack(&self) -> bool {
        matches!(self, Manipulation::Fgsm | Manipulation::Pgd)
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Manipulation::Vertical | Manipulation::Horizontal)
    }

    pub fn axis(&self) -> Option<Axis> {
        match self {
            Manipulation::Vertical => Some(Axis::Vertical),
            Manipulation::Horizontal => Some(Axis::Horizontal),
            _ => None,
        }
    }
}

/// Manipulation applied to the test set and its magnitudes (shift size or ε).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub manipulation: Manipulation,
    pub magnitudes: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSettings {
    pub enabled: Option<bool>,
    /// Fraction of the manipulated test set used, unlabeled.
    pub fraction: Option<f64>,
    /// Fractions swept by `finetune-fraction` experiments.
    pub fractions: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Intervention ELBO (instead of the joint ELBO) on the labeled rows.
    pub use_intervention: Option<bool>,
    /// `disentangle` only: the shift axis fine-tuned on.
    pub axis: Option<Axis>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSettings {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub u: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub width: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Trained models are stored here keyed by everything that shapes them,
    /// and reused when present.
    pub cache_dir: Option<PathBuf>,
    /// Load every model from a previous run's `checkpoints/` directory
    /// instead of training.
    pub load_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub iterations: Option<usize>,
    /// PGD step as a multiple of ε.
    pub step_ratio: Option<f64>,
    pub random_start: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub data: DataSource,
    #[serde(default)]
    pub regime: Regime,
    pub grid: Grid,
    /// `misspec` only: how many children are relabeled as co-parents, one
    /// CAMA arm per entry (0 is the true graph).
    #[serde(default)]
    pub relabel: Option<Vec<usize>>,
    #[serde(default)]
    pub finetune: FineTuneSettings,
    #[serde(default)]
    pub weights: WeightSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub baseline: BaselineSettings,
    #[serde(default)]
    pub attack: AttackSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every unset key with its default. Idempotent.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let images = c.data.is_images();
        let pick = |images_value, measurement_value| if images { images_value } else { measurement_value };
        if let DataSource::Images {
            train_rows,
            validation_fraction,
            ..
        } = &mut c.data
        {
            train_rows.get_or_insert(10_000);
            validation_fraction.get_or_insert(0.05);
        }
        let ft = &mut c.finetune;
        ft.enabled.get_or_insert(c.kind != ExperimentKind::Misspec);
        ft.fraction.get_or_insert(if c.kind == ExperimentKind::AttackSweep { 1.0 } else { 0.5 });
        if c.kind == ExperimentKind::FinetuneFraction {
            ft.fractions.get_or_insert_with(|| DEFAULT_FRACTIONS.to_vec());
        }
        ft.steps.get_or_insert(pick(500, 3000));
        ft.batch_size.get_or_insert(pick(64, 32));
        ft.learning_rate.get_or_insert(1e-3);
        ft.use_intervention.get_or_insert(false);
        if c.kind == ExperimentKind::Disentangle {
            ft.axis.get_or_insert(Axis::Horizontal);
        }
        let w = &mut c.weights;
        w.lambda.get_or_insert(0.5);
        w.alpha.get_or_insert(0.5);
        w.k.get_or_insert(pick(8, 16));
        w.u.get_or_insert(1);
        let t = &mut c.train;
        t.width.get_or_insert(pick(256, 64));
        t.epochs.get_or_insert(pick(20, 200));
        t.batch_size.get_or_insert(pick(64, 32));
        t.learning_rate.get_or_insert(1e-3);
        let b = &mut c.baseline;
        b.epochs.get_or_insert(pick(10, 200));
        b.batch_size.get_or_insert(pick(64, 32));
        b.learning_rate.get_or_insert(1e-3);
        let a = &mut c.attack;
        a.iterations.get_or_insert(40);
        a.step_ratio.get_or_insert(0.1);
        a.random_start.get_or_insert(images);
        if c.kind == ExperimentKind::Misspec {
            c.relabel.get_or_insert_with(|| vec![0, 1, 2]);
        }
        c
    }

    /// Structural checks; none of them touch the data or train anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self.resolved();
        if c.id.is_empty() || c.id.contains(|ch: char| ch == '/' || ch == '\\' || ch.is_whitespace()) {
            return Err(invalid(format!("id {:?} must be a non-empty path-safe token", c.id)));
        }
        if c.models.is_empty() {
            return Err(invalid("models is empty"));
        }
        if c.grid.magnitudes.is_empty() {
            return Err(invalid("grid.magnitudes is empty"));
        }
        if c.grid.magnitudes.iter().any(|m| !m.is_finite()) {
            return Err(invalid("grid magnitudes must be finite"));
        }
        let m = c.grid.manipulation;
        if m.is_attack() {
            if c.kind != ExperimentKind::AttackSweep {
                return Err(invalid(format!("{} manipulation requires kind attack-sweep", m.as_str())));
            }
            if c.grid.magnitudes.iter().any(|&e| e < 0.0) {
                return Err(invalid("attack epsilons must be non-negative"));
            }
        } else if c.kind == ExperimentKind::AttackSweep {
            return Err(invalid("attack-sweep requires manipulation fgsm or pgd"));
        }
        if m.is_image() {
            if !c.data.is_images() {
                return Err(invalid(format!("{} shifts require image data", m.as_str())));
            }
            if c.grid.magnitudes.iter().any(|s| s.abs() > 1.0) {
                return Err(invalid("image shifts are fractions of the side in [-1, 1]"));
            }
        }
        if matches!(m, Manipulation::Coparent | Manipulation::Child) && c.data.is_images() {
            return Err(invalid(format!("{} shifts require measurement data", m.as_str())));
        }
        for model in &c.models {
            match model {
                ModelKind::CamaSingle if !c.data.is_images() => {
                    return Err(invalid("cama-single needs image data; use cama-generic for measurements"))
                }
                ModelKind::CamaGeneric if c.data.is_images() => {
                    return Err(invalid("cama-generic needs measurement data"))
                }
                _ => {}
            }
        }
        if let Regime::Augmented { range, .. } = c.regime {
            if !c.data.is_images() {
                return Err(invalid("augmented training is defined for image data only"));
            }
            if !(range > 0.0 && range <= 1.0) {
                return Err(invalid(format!("augmentation range {range} outside (0, 1]")));
            }
        }
        let fraction_ok = |f: f64| f > 0.0 && f <= 1.0;
        let ft = &c.finetune;
        if !fraction_ok(ft.fraction.unwrap()) {
            return Err(invalid(format!("finetune.fraction {} outside (0, 1]", ft.fraction.unwrap())));
        }
        if let Some(fr) = &ft.fractions {
            if fr.is_empty() {
                return Err(invalid("finetune.fractions is empty"));
            }
            if let Some(bad) = fr.iter().find(|&&f| !fraction_ok(f)) {
                return Err(invalid(format!("finetune fraction {bad} outside (0, 1]")));
            }
        }
        if ft.batch_size == Some(0) || ft.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(invalid("finetune batch size and learning rate must be positive"));
        }
        if c.kind == ExperimentKind::Disentangle {
            if !m.is_image() {
                return Err(invalid("disentangle needs an image shift grid"));
            }
            if !ft.enabled.unwrap() {
                return Err(invalid("disentangle needs fine-tuning enabled"));
            }
        }
        if c.kind == ExperimentKind::FinetuneFraction && !ft.enabled.unwrap() {
            return Err(invalid("finetune-fraction needs fine-tuning enabled"));
        }
        if ft.enabled.unwrap() && !c.models.iter().any(ModelKind::is_cama) {
            log::warn!("fine-tuning enabled but no CAMA model is listed");
        }
        if c.kind == ExperimentKind::Misspec {
            if c.data.is_images() || !c.models.contains(&ModelKind::CamaGeneric) {
                return Err(invalid("misspec needs measurement data and a cama-generic model"));
            }
        } else if c.relabel.is_some() {
            return Err(invalid("relabel is only meaningful for misspec experiments"));
        }
        if let Some(r) = &c.relabel {
            if r.is_empty() || r.iter().any(|&k| k >= cama_core::datagen::DIM_X) {
                return Err(invalid(format!(
                    "relabel counts must be nonempty and below {}",
                    cama_core::datagen::DIM_X
                )));
            }
        }
        let w = &c.weights;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(w.lambda.unwrap()) || !unit(w.alpha.unwrap()) || w.k == Some(0) || w.u == Some(0) {
            return Err(invalid("weights need lambda, alpha in [0, 1] and k, u >= 1"));
        }
        for (what, width) in [("train.width", c.train.width), ("train.batch_size", c.train.batch_size)] {
            if width == Some(0) {
                return Err(invalid(format!("{what} must be positive")));
            }
        }
        if c.baseline.batch_size == Some(0) {
            return Err(invalid("baseline.batch_size must be positive"));
        }
        for lr in [c.train.learning_rate, c.baseline.learning_rate].into_iter().flatten() {
            if !(lr > 0.0) {
                return Err(invalid("learning rates must be positive"));
            }
        }
        if c.attack.step_ratio.is_some_and(|r| !(r > 0.0)) || c.attack.iterations == Some(0) {
            return Err(invalid("attack step ratio and iterations must be positive"));
        }
        if let DataSource::Images {
            path,
            train_rows,
            test_rows,
            validation_fraction,
        } = &c.data
        {
            if train_rows == &Some(0) || test_rows == &Some(0) {
                return Err(invalid("image row counts must be positive"));
            }
            let vf = validation_fraction.unwrap();
            if !(0.0..1.0).contains(&vf) {
                return Err(invalid(format!("validation_fraction {vf} outside [0, 1)")));
            }
            for f in IMAGE_FILES {
                if !path.join(f).is_file() {
                    return Err(invalid(format!("missing image file {}", path.join(f).display())));
                }
            }
        }
        Ok(())
    }

    /// Seeds to run: the explicit ones, else the config's.
    pub fn with_seeds(&self, seeds: &[u64]) -> Self {
        let mut c = self.clone();
        if !seeds.is_empty() {
            c.seeds = seeds.to_vec();
        }
        c
    }

    /// Fractions fine-tuned with at each grid point, after [`Self::resolved`].
    pub fn finetune_fractions(&self) -> Vec<f64> {
        let ft = &self.finetune;
        if !ft.enabled.unwrap_or(true) {
            return Vec::new();
        }
        match (&ft.fractions, self.kind) {
            (Some(fr), ExperimentKind::FinetuneFraction) => fr.clone(),
            _ => vec![ft.fraction.unwrap_or(0.5)],
        }
    }
}
