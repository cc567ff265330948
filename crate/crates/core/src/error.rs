use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports.
///
/// Variants fall into two families: input/validation problems (the caller
/// handed us something malformed) and numerical failures (the data were
/// well-formed but a fit could not be completed). [`Error::is_numerical`]
/// separates them; the command-line front end maps them to distinct exit
/// codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    // data ingest
    #[error("duplicate line id `{0}`")]
    DuplicateLineId(String),
    #[error("duplicate marker id `{0}`")]
    DuplicateMarkerId(String),
    #[error("non-numeric genotype `{value}` for line `{line}`, marker `{marker}`")]
    NonNumericGenotype {
        line: String,
        marker: String,
        value: String,
    },
    #[error("{dropped} of {total} markers are entirely missing")]
    AllMissingMarker { dropped: usize, total: usize },
    #[error("negative map position {position} for marker `{marker}`")]
    NegativePosition { marker: String, position: f64 },
    #[error("unknown map unit `{0}` (expected cM or bp)")]
    UnknownUnit(String),
    #[error("duplicate phenotype record for line `{line}`, trait `{trait_id}`")]
    DuplicatePhenotype { line: String, trait_id: String },
    #[error("non-finite phenotype value for line `{0}`")]
    NonFinitePhenotype(String),
    #[error("fewer than two lines carry both genotypes and phenotypes for trait `{0}`")]
    NoOverlap(String),
    #[error("fixed-effect design is rank deficient after adding an intercept")]
    RankDeficientCovariates,
    #[error("covariates missing for line `{0}`")]
    MissingCovariate(String),

    // genome partition
    #[error("no chromosome carries any genotyped marker")]
    EmptyChromosome,
    #[error("depth {0} is too large: no chromosome can be subdivided")]
    DepthTooLarge(usize),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("unknown marker `{0}`")]
    UnknownMarker(String),

    // kernel engine
    #[error("all rows identical: automatic Gaussian bandwidth is undefined")]
    ZeroVarianceInput,
    #[error("kernel produced a non-finite entry")]
    NonFiniteEntry,
    #[error("kernel matrix has zero trace")]
    ZeroTrace,
    #[error("column mismatch: expected {expected} marker columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },

    // variance components
    #[error("fixed-effect design X* is singular or has n <= p")]
    SingularXstar,
    #[error("kernel matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NonPsdK(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // combiner
    #[error("coordinate descent did not converge within {0} sweeps")]
    NonConvergence(usize),
    #[error("cross-validation needs at least 20 observations, got {0}")]
    DegenerateFolds(usize),

    // local GEBV orchestration
    #[error("{failed} of {total} region fits failed; first: {first}")]
    TooManyFailedRegions { failed: usize, total: usize, first: String },
    #[error("region `{region}`: {source}")]
    Region {
        region: String,
        #[source]
        source: Box<Error>,
    },

    // simulator
    #[error("configured genetic architecture has zero genetic variance")]
    InfeasibleH2,
    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    // cv harness
    #[error("only {0} test lines; at least 10 required")]
    TooFewTestLines(usize),
    #[error("importance vectors differ in length")]
    LengthMismatch,

    // pipeline
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input does not match model manifest: {0}")]
    ManifestMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_region(region: &str, source: Error) -> Self {
        Error::Region {
            region: region.to_string(),
            source: Box::new(source),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ZeroVarianceInput
            | Error::NonFiniteEntry
            | Error::ZeroTrace
            | Error::SingularXstar
            | Error::NonPsdK(_)
            | Error::NonConvergence(_)
            | Error::TooManyFailedRegions { .. } => true,
            Error::Region { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
