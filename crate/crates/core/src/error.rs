use thiserror::Error;

/// Errors raised across the crate. Variant names are part of the CLI
/// contract (they are printed on stderr when a command fails).
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate observation for subject `{0}` at wave {1}")]
    DuplicateSubjectWave(String, u32),
    #[error("non-numeric or missing response at data row {0}")]
    NonNumericResponse(usize),
    #[error("invalid wave index at data row {0}")]
    InvalidWave(usize),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` has missing values; run drop_missing first")]
    MissingValues(String),
    #[error("cannot build {0} folds from {1} units")]
    TooFewUnits(usize, usize),
    #[error("cannot cross-validate with {0} folds on {1} rows")]
    TooFewRows(usize, usize),
    #[error("missing value for split variable `{0}`")]
    MissingSplitValue(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("fixed-effects design is rank deficient")]
    SingularDesign,
    #[error("failed to converge after {0} iterations")]
    NonConvergence(usize),
    #[error("cluster `{0}` was not seen during fitting")]
    UnknownCluster(String),
    #[error("likelihood-ratio statistic {0} is negative beyond tolerance")]
    NegativeStatBeyondTolerance(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reports were computed on different folds or data")]
    FoldMismatch,
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {0} clusters, got {1}")]
    TooFewClusters(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used by the CLI on stderr.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::DuplicateSubjectWave(..) => "DuplicateSubjectWave",
            Error::NonNumericResponse(_) => "NonNumericResponse",
            Error::InvalidWave(_) => "InvalidWave",
            Error::UnknownVariable(_) => "UnknownVariable",
            Error::MissingValues(_) => "MissingValues",
            Error::TooFewUnits(..) => "TooFewUnits",
            Error::TooFewRows(..) => "TooFewRows",
            Error::MissingSplitValue(_) => "MissingSplitValue",
            Error::MalformedModel(_) => "MalformedModel",
            Error::SingularDesign => "SingularDesign",
            Error::NonConvergence(_) => "NonConvergence",
            Error::UnknownCluster(_) => "UnknownCluster",
            Error::NegativeStatBeyondTolerance(_) => "NegativeStatBeyondTolerance",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::FoldMismatch => "FoldMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnknownPreset(_) => "UnknownPreset",
            Error::InvalidParams(_) => "InvalidParams",
            Error::TooFewClusters(..) => "TooFewClusters",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
