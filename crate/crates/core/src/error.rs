use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // midi
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("malformed MIDI track: {0}")]
    MalformedTrack(String),
    #[error("invalid score: {0}")]
    InvalidScore(String),

    // notation
    #[error("chord list has {got} entries but the score has {bars} bars")]
    ChordListMismatch { bars: usize, got: usize },
    #[error("illegal token order at index {index}: {reason}")]
    IllegalTokenOrder { index: usize, reason: String },
    #[error("token value out of range: {0}")]
    TokenOutOfRange(String),
    #[error("grid position {0} is not covered by any section")]
    UncoveredPosition(u32),

    // fragmentation
    #[error("cannot fit {m} non-overlapping windows into {bars} bars")]
    InfeasibleM { m: usize, bars: usize },
    #[error("empty scope")]
    EmptyScope,
    #[error("empty input")]
    EmptyInput,

    // embedding
    #[error("pitch {0} out of range [0,127]")]
    PitchOutOfRange(i64),
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    // diffusion
    #[error("bad step count T={0}")]
    BadT(usize),
    #[error("step {t} out of range [1,{max}]")]
    StepOutOfRange { t: usize, max: usize },
    #[error("model missing: {0}")]
    ModelMissing(String),
    #[error("prompt length mismatch: {0}")]
    PromptLengthMismatch(String),

    // denoiser / autodiff
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alignment missing: {0}")]
    AlignmentMissing(String),
    #[error("graph not recorded: {0}")]
    GraphNotRecorded(String),

    // pareto
    #[error("batch too small for moment estimation: {0} < 2")]
    BatchTooSmall(usize),

    // metrics
    #[error("empty score")]
    EmptyScore,

    // cli / persistence
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error line and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::MalformedTrack(_) => "MalformedTrack",
            Error::InvalidScore(_) => "InvalidScore",
            Error::ChordListMismatch { .. } => "ChordListMismatch",
            Error::IllegalTokenOrder { .. } => "IllegalTokenOrder",
            Error::TokenOutOfRange(_) => "TokenOutOfRange",
            Error::UncoveredPosition(_) => "UncoveredPosition",
            Error::InfeasibleM { .. } => "InfeasibleM",
            Error::EmptyScope => "EmptyScope",
            Error::EmptyInput => "EmptyInput",
            Error::PitchOutOfRange(_) => "PitchOutOfRange",
            Error::InsufficientCorpus(_) => "InsufficientCorpus",
            Error::BadT(_) => "BadT",
            Error::StepOutOfRange { .. } => "StepOutOfRange",
            Error::ModelMissing(_) => "ModelMissing",
            Error::PromptLengthMismatch(_) => "PromptLengthMismatch",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::AlignmentMissing(_) => "AlignmentMissing",
            Error::GraphNotRecorded(_) => "GraphNotRecorded",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::EmptyScore => "EmptyScore",
            Error::MissingInput(_) => "MissingInput",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
            Error::InvalidCheckpoint(_) => "InvalidCheckpoint",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
