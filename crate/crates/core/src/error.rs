use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline and the statistics engine can report.
///
/// Variants are grouped by the stage that raises them; the CLI maps groups
/// onto exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("corpus text is empty")]
    EmptyCorpus,
    #[error("no chapter boundary matched and single-chapter fallback is disabled")]
    NoChapterBoundary,
    #[error("corpus has a single chapter and cannot be split at ratio {ratio}")]
    SingleChapterUnsplittable { ratio: f64 },
    #[error("split ratio {ratio} leaves one half empty (enable degenerate splits to allow it)")]
    DegenerateRatio { ratio: f64 },

    // fact store
    #[error("unknown fact id `{0}`")]
    UnknownTarget(String),
    #[error("predicate `{0}` is not in the loaded vocabulary")]
    PredicateNotInVocabulary(String),
    #[error("duplicate ADD: ({subject}, {predicate}, {object}) matches active fact {existing}")]
    DuplicateAdd {
        subject: String,
        predicate: String,
        object: String,
        existing: String,
    },
    #[error("malformed AUDN op: {0}")]
    MalformedOp(String),
    #[error("malformed extraction output: {0}")]
    MalformedExtraction(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("fact `{0}` has been deleted")]
    TombstonedFact(String),

    // spec documents
    #[error("cannot author layers from an empty fact set")]
    EmptyFactSet,
    #[error("layer `{layer}` could not be parsed: {reason}")]
    UnparseableLayer { layer: String, reason: String },
    #[error("missing spec layer `{0}`")]
    MissingLayer(String),
    #[error("derangement table maps `{0}` to itself")]
    FixedPointInTable(String),
    #[error("a derangement needs at least two subjects, got {0}")]
    TooFewSubjects(usize),

    // providers
    #[error("provider `{provider}` failed after {attempts} attempt(s): {message}")]
    ProviderFailure {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("credential environment variable `{0}` is not set")]
    AuthMissing(String),
    #[error("provider `{provider}` lacks the `{capability}` capability")]
    MissingCapability { provider: String, capability: String },
    #[error("judge output is not a bare digit 1-5: {0:?}")]
    InvalidJudgeOutput(String),

    // battery
    #[error("battery generation produced no valid questions")]
    NoValidQuestions,
    #[error("leakage audit blocked freeze; leaking questions: {0:?}")]
    LeakageBlock(Vec<String>),
    #[error("battery is frozen")]
    AlreadyFrozen,
    #[error("battery is not frozen")]
    NotFrozen,
    #[error("checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("held-out span of {qid} is not found at its window reference")]
    SpanNotContained { qid: String },

    // runner
    #[error("condition {condition} requires asset `{asset}`")]
    MissingAsset { condition: String, asset: String },
    #[error("context budget exceeded: {required} tokens required, {available} available")]
    ContextBudgetExceeded { required: usize, available: usize },
    #[error("segment `{0}` carries held-out provenance and cannot be served")]
    HeldoutProvenance(String),
    #[error("response generation must run at temperature 0 and 1024 max output tokens")]
    UnpinnedParameters,

    // statistics
    #[error("no scores for subject `{subject}` under `{condition}`")]
    EmptyCell { subject: String, condition: String },
    #[error("need at least {needed} non-zero pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no unit carries two or more pairable values")]
    NothingPairable,
    #[error("predictor has zero variance")]
    DegenerateX,
    #[error("design matrix is singular (collinear predictors)")]
    Collinear,
    #[error("score {0} is outside [1, 5]")]
    OutOfRangeScore(f64),
    #[error("no two systems share a question")]
    NoSharedQuestions,
    #[error("group `{group}` has {size} item(s); at least 3 are required")]
    GroupTooSmall { group: String, size: usize },

    // pipeline plumbing
    #[error("missing upstream artifact: {0}")]
    MissingUpstream(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Regex(#[from] regex::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wrap an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 precondition failure, 3 provider exhaustion,
    /// 4 checksum mismatch.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::ProviderFailure { .. } | Error::AuthMissing(_) => 3,
            Error::ChecksumMismatch { .. } => 4,
            _ => 2,
        }
    }
}
