use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feature id {feature} out of range (model has {num_features} features)")]
    FeatureOutOfRange { feature: usize, num_features: usize },

    #[error("event {0:?} has no candidates")]
    EmptyCandidates(String),

    #[error("candidate {label:?} lists feature {feature} more than once")]
    DuplicateFeature { label: String, feature: usize },

    #[error("event {event:?} has duplicate candidate label {label:?}")]
    DuplicateLabel { event: String, label: String },

    #[error("event {event:?}: true label {label:?} is not among the candidates")]
    MissingTrueLabel { event: String, label: String },

    #[error("features with zero observed count must be pruned first: {0:?}")]
    UnobservedFeatures(Vec<usize>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid weight {value} for feature {feature}")]
    InvalidWeight { feature: usize, value: f64 },

    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f64),

    #[error("invalid group partition: {0}")]
    InvalidPartition(String),

    #[error("invalid network: {}", .0.join("; "))]
    InvalidNetwork(Vec<String>),

    #[error("observation has zero probability under the network")]
    ZeroProbability,

    #[error("linear system is singular")]
    SingularSystem,

    #[error("unseen state {0:?}")]
    UnseenState(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
