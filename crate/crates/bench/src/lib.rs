//! Experiment harness for CAMA robustness studies: TOML experiment configs,
//! training and evaluation over manipulation grids, result CSVs, run
//! manifests, checkpoints and plot data.

pub mod config;
pub mod models;
pub mod report;
pub mod results;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind, Manipulation, ModelKind, Regime};
pub use models::{checkpoint_roundtrip, load_model, load_model_like, save_model, TrainedModel};
pub use report::{aggregate, report, Plot, PlotPoint};
pub use results::{read_csv, write_csv, ResultRow, RESULT_COLUMNS};
pub use run::{run, RunError, RunOptions, RunOutput};
