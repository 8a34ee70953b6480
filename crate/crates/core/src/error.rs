use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),

    #[error("rank deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("fold {fold}: {reason}")]
    Fold { fold: usize, reason: String },

    #[error("treatment fully explained by controls")]
    TreatmentExplained,

    #[error("too many failures: {failed} of {total} ({context})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        context: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad configuration or input files rather
    /// than by an estimation step.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownColumn(_)
                | Error::MissingColumn(_)
                | Error::InvalidInput(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Toml(_)
        )
    }
}
