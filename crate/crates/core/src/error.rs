use thiserror::Error;

/// Errors raised across the protocol stack.
///
/// Variants are grouped by the stage that produces them so that the harness
/// can tag aborted runs with the failing stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("segment is frozen; parameter updates are rejected")]
    Frozen,

    #[error("segment must be frozen: {0}")]
    NotFrozen(String),

    #[error("stale or mismatched forward trace: {0}")]
    StaleTrace(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("watermark embedding for link {link} failed: eta {eta:.4} < goal {goal:.4} after {rounds} rounds")]
    EmbeddingFailed {
        link: usize,
        eta: f64,
        goal: f64,
        rounds: usize,
    },

    #[error("sequencing: {0}")]
    Sequencing(String),

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("attack diverged: {0}")]
    Diverged(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The innermost error behind any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
