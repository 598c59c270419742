use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeaError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op}: numerically degenerate normalizer at row {row}")]
    Degenerate { op: &'static str, row: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed sparse matrix: {0}")]
    Structural(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SeaError>,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("weight container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SeaError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        SeaError::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SeaError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SeaError>;

/// Tags an error with the pipeline stage that produced it.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| SeaError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
