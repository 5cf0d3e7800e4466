use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("invalid feature sequence: {0}")]
    InvalidFeatures(String),
    #[error("empty loss region")]
    EmptyLossRegion,
    #[error("non-finite field output at step {step}")]
    NonFiniteField { step: usize },
    #[error("non-finite gradient in {path}")]
    NonFiniteGradient { path: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("schedule undefined for joint mode")]
    JointModeSchedule,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("word not in lexicon: {0:?}")]
    UnknownWord(String),
    #[error("unknown token: {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    UnknownId(usize),
    #[error("unknown language: {0:?}")]
    UnknownLanguage(String),
    #[error("target text too long for sequence")]
    TargetTooLong,
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no language policy for {0:?}")]
    MissingPolicy(String),
    #[error("missing quality score for record {0:?}")]
    MissingQuality(String),
    #[error("synthesis failed for record {id}: {source}")]
    Synthesis {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
