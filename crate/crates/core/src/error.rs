use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes. Carries both shapes involved.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    Shape(String),
    /// Input is not a valid probability distribution.
    #[error("validation error: {0}")]
    Validation(String),
    /// A caller broke an API contract (non-scalar backward, unfrozen classifier, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model spec error at layer {layer}: {reason}")]
    Spec { layer: usize, reason: String },
    #[error("cannot compose models: {0}")]
    Composition(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
