use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variant names double as the machine-readable `error` tag in CLI payloads,
/// see [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("negative weight {value} at atom {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1")]
    MassMismatch { sum: f64 },
    #[error("length {got} does not match space size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("operands live on different spaces")]
    SpaceMismatch,
    #[error("duplicate atom label {0:?}")]
    DuplicateLabel(String),
    #[error("a space needs at least one atom")]
    EmptySpace,
    #[error("truncation order {order} outside [2, {size}]")]
    OrderOutOfRange { order: usize, size: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("index {index} outside space of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid family parameters: {0}")]
    InvalidFamilyParams(String),
    #[error("cost family needs atom coordinates: {0}")]
    MissingCoordinates(String),
    #[error("separability constant {kappa} exceeds bound {bound}")]
    SeparabilityViolated { kappa: f64, bound: f64 },
    #[error("solver did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value encountered: {0}")]
    NumericOverflow(String),
    #[error("plan marginals deviate from the measures by {0:e}")]
    MarginalMismatch(f64),
    #[error("divergence needs X = Y and a symmetric cost: {0}")]
    AsymmetricSetup(String),
    #[error("instance of size {rows}x{cols} exceeds the exact solver limit {limit}")]
    TooLarge { rows: usize, cols: usize, limit: usize },
    #[error("atom {index} of the {side} measure carries zero mass")]
    ZeroMassAtom { side: &'static str, index: usize },
    #[error("operator norm of A^X A^Y is {0}, not below 1")]
    ContractionViolated(f64),
    #[error("cost family has unbounded X-variation")]
    UnboundedXVariation,
    #[error("perturbation is not in the tangent cone (sums {sum_x:e}, {sum_y:e})")]
    NotInTangentCone { sum_x: f64, sum_y: f64 },
    #[error("OT potentials are not unique for this instance")]
    NonUniquePotentials,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable tag used in error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NegativeWeight { .. } => "NegativeWeight",
            Error::MassMismatch { .. } => "MassMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::SpaceMismatch => "SpaceMismatch",
            Error::DuplicateLabel(_) => "DuplicateLabel",
            Error::EmptySpace => "EmptySpace",
            Error::OrderOutOfRange { .. } => "OrderOutOfRange",
            Error::EmptySample => "EmptySample",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::InvalidFamilyParams(_) => "InvalidFamilyParams",
            Error::MissingCoordinates(_) => "MissingCoordinates",
            Error::SeparabilityViolated { .. } => "SeparabilityViolated",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::NumericOverflow(_) => "NumericOverflow",
            Error::MarginalMismatch(_) => "MarginalMismatch",
            Error::AsymmetricSetup(_) => "AsymmetricSetup",
            Error::TooLarge { .. } => "TooLarge",
            Error::ZeroMassAtom { .. } => "ZeroMassAtom",
            Error::ContractionViolated(_) => "ContractionViolated",
            Error::UnboundedXVariation => "UnboundedXVariation",
            Error::NotInTangentCone { .. } => "NotInTangentCone",
            Error::NonUniquePotentials => "NonUniquePotentials",
            Error::EmptyInput => "EmptyInput",
            Error::Config(_) => "ConfigParse",
            Error::Io { .. } => "Io",
            Error::Parse(_) => "ConfigParse",
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
