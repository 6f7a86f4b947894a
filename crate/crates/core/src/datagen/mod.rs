//! Synthetic measurement data from a structural causal model, IDX image
//! ingestion, shift manipulations and causal-graph mis-specification.

mod images;
mod measurement;
mod roles;

pub use images::{
    augment_shift_range, load_idx, parse_idx_images, parse_idx_labels, shift_image, Axis, ImageDataset, IMAGE_MAGIC,
    LABEL_MAGIC,
};
pub use measurement::{
    csv_header, g, generate_measurement, generate_measurement_with, label_from_parents, shift_children,
    shift_coparents, MeasurementConfig, MeasurementDataset, MeasurementMechanism, Split, CLASSES, DIM_A, DIM_C, DIM_X,
};
pub use roles::{Misspecification, Role, RoleMap, RoleViews};

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dataset was generated by mechanism seed {dataset}, not {mechanism}")]
    MechanismMismatch { dataset: u64, mechanism: u64 },
    #[error("requested {requested} columns but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[cfg(test)]
mod tests;
