//! Reverse-mode automatic differentiation over dense `f64` tensors, plus a
//! grouped parameter store with Adam.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use checkpoint::{
    ensure_compatible, load_checkpoint, load_into, read_checkpoint, save_checkpoint, write_checkpoint, ManifestEntry,
    CHECKPOINT_HEADER,
};
pub use graph::{logsumexp, Gradients, Graph, Var};
pub use store::{AdamConfig, ParameterStore};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op} at node {node}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {index} is not on this tape")]
    ForeignNode { index: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParameter(String),
    #[error("gradient supplied for {name:?} in group {group:?}, which is outside the update mask")]
    MaskLeak { name: String, group: String },
    #[error("no gradient supplied for {0:?}")]
    MissingGradient(String),
    #[error("non-finite gradient for {0:?}")]
    NonFinite(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
