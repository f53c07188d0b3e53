//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- NIfTI ----
    #[error("not a single-file NIfTI-1 volume (bad magic or header size)")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("volume rank is {0}, only rank-3 volumes are supported")]
    RankNotThree(i16),
    #[error("truncated data section: header promises {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFiniteVoxel(usize),

    // ---- volumes / masks ----
    #[error("operation requires a nonempty mask")]
    EmptyMask,
    #[error("volume has no positive, non-constant intensities")]
    EmptyVolume,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    // ---- normalization ----
    #[error("degenerate intensity distribution: all samples equal")]
    DegenerateDistribution,
    #[error("too few samples for a histogram fit: {got} < {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("histogram needs at least {need} bins, got {got}")]
    TooFewBins { got: usize, need: usize },
    #[error("fitted peak gives non-positive divisor {0}")]
    NonPositiveDivisor(f64),
    #[error("{modality}: {source}")]
    Modality {
        modality: &'static str,
        #[source]
        source: Box<Error>,
    },

    // ---- network / training ----
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("optimizer update became non-finite")]
    NonFiniteUpdate,
    #[error("k-fold split needs at least {k} cases, got {n}")]
    TooFewCases { n: usize, k: usize },

    // ---- cascade / labels ----
    #[error("stage requires a prior label volume and none was given")]
    MissingPrior,
    #[error("{stage} emitted label code {code} outside its allowed set")]
    CodeOutOfRange { stage: String, code: u8 },

    // ---- phantom ----
    #[error("phantom geometry invalid: {0}")]
    SpecGeometry(String),

    // ---- artifacts ----
    #[error("checkpoint is corrupt or of an unknown version: {0}")]
    BadCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BadMagic => "bad_magic",
            Error::UnsupportedDatatype(_) => "unsupported_datatype",
            Error::RankNotThree(_) => "rank_not_three",
            Error::TruncatedData { .. } => "truncated_data",
            Error::NonFiniteVoxel(_) => "non_finite_voxel",
            Error::EmptyMask => "empty_mask",
            Error::EmptyVolume => "empty_volume",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::DegenerateDistribution => "degenerate_distribution",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::TooFewBins { .. } => "too_few_bins",
            Error::NonPositiveDivisor(_) => "non_positive_divisor",
            Error::Modality { source, .. } => source.kind(),
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteUpdate => "non_finite_update",
            Error::TooFewCases { .. } => "too_few_cases",
            Error::MissingPrior => "missing_prior",
            Error::CodeOutOfRange { .. } => "code_out_of_range",
            Error::SpecGeometry(_) => "spec_geometry",
            Error::BadCheckpoint(_) => "bad_checkpoint",
            Error::Config(_) => "config_error",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
        }
    }
}
