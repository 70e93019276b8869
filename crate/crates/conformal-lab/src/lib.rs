//! Conformal prediction with user-posited conditional models.
//!
//! Given observed data `z = (z_1, ..., z_{n+1})` and a summary `u` of that
//! data (typically its unordered bag, possibly with extra side information),
//! a conditional model posits a distribution over reorderings of the data
//! that are consistent with `u`. The conformal p-value for the observed
//! ordering is the model probability of drawing a candidate whose score is
//! at least the observed score, and a prediction set collects candidate
//! responses whose p-value exceeds `alpha`.
//!
//! The crate is organized as:
//!
//! * [`data`]: datasets, bags, permutations and score functions, generic
//!   over the scalar type.
//! * [`wdist`]: finite weighted measures with quantile, tail and threshold
//!   operations (including the unnormalized threshold used by raw-mass
//!   p-values).
//! * [`engine`]: the p-value engine (exact enumeration, Monte Carlo,
//!   self-normalized importance sampling) and grid prediction sets.
//! * [`methods`]: concrete method constructors: standard and split
//!   conformal, weighted conformal (normalized and unnormalized),
//!   swap-based reweighting, kernel-localized variants, and fully general
//!   reweighting with exact, nonsymmetric and importance-sampled backends.
//! * [`oracle`]: brute-force enumeration over all orderings, shortcut
//!   certification, and exact finite-sample type-1 error computation on
//!   enumerable toy laws.
//! * [`simlab`]: seeded data generators, coverage and superuniformity
//!   estimators, shift/drift diagnostics, and the report types behind the
//!   `conformal-lab` CLI.
//!
//! The core containers are generic over [`num::Scalar`]; the aliases below
//! fix the scalar to `f64`, which is what the engine and everything above
//! it uses.

pub mod config;
pub mod data;
pub mod engine;
pub mod methods;
pub mod num;
pub mod oracle;
pub mod scores;
pub mod simlab;
pub mod wdist;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use data::Permutation;

/// `f64` instantiations used throughout the engine and methods.
pub type DataPoint = data::DataPoint<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Bag = data::Bag<f64>;
pub type ScoreFunction = data::ScoreFunction<f64>;
pub type WeightedMeasure = wdist::WeightedMeasure<f64>;
pub type Threshold = wdist::Threshold<f64>;

/// `f32` instantiations of the scalar-generic core.
pub type DataPoint32 = data::DataPoint<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type Bag32 = data::Bag<f32>;
pub type ScoreFunction32 = data::ScoreFunction<f32>;
pub type WeightedMeasure32 = wdist::WeightedMeasure<f32>;
pub type Threshold32 = wdist::Threshold<f32>;
