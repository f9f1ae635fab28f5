use crate::io::pnm::PnmError;
use crate::io::weights::WeightFormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("non-finite value produced at node `{node}`")]
    NonFinite { node: String },

    #[error("missing weight `{weight}` required by node `{node}`")]
    MissingWeight { node: String, weight: String },

    #[error("at node `{node}`: {source}")]
    Node { node: String, source: Box<Error> },

    #[error("graph build error in {stage}: {detail}")]
    Build { stage: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing gradient for parameter #{0}")]
    MissingGradient(usize),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("dataset id mismatch: missing predictions for {missing_pred:?}, missing ground truth for {missing_gt:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_gt: Vec<String>,
    },

    #[error(transparent)]
    Weights(#[from] WeightFormatError),

    #[error(transparent)]
    Image(#[from] PnmError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            detail: detail.into(),
        }
    }
}
