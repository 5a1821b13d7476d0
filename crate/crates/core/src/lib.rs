//! Design, power analysis, and sample size re-estimation (SSRE) for
//! cross-sectional stepped-wedge cluster randomized trials analyzed with the
//! Hussey–Hughes linear mixed model.
//!
//! The crate covers the full adaptive-design pipeline:
//!
//! * [`design`] — allocation matrices, fixed-effect design matrices, and the
//!   per-cluster compound-symmetric covariance structure;
//! * [`dist`] — Student-t distribution functions and reproducible stream-based
//!   random variate generation;
//! * [`model`] — REML variance-component estimation and GLS fixed effects on
//!   cluster-period cell summaries;
//! * [`power`] — information, power, and minimal-integer sample-size searches
//!   for fixed and split (pre/post-interim) designs;
//! * [`ssre`] — the blinded and unblinded interim re-estimation step;
//! * [`sim`] — replicate trial simulation and empirical rejection rates with
//!   deterministic parallel execution.
//!
//! All numerics are generic over the scalar type through the [`Real`] trait;
//! `f64` aliases for the main types are exported at the crate root.

pub mod design;
pub mod dist;
pub mod model;
pub mod power;
pub mod sim;
pub mod ssre;

mod linalg;

pub use design::{AllocationMatrix, ClusterCovariance, DesignMatrix, PeriodRange, VarianceComponents};
pub use dist::{sample_normal, shifted_t_tail, t_cdf, t_quantile, RngStream, TDist};
pub use model::{
    gls_fixed_effects, reml_criterion, reml_fit, reml_gradient, select_interim_model,
    CellStat, CellSummaries, FitResult, ModelSpec,
};
pub use power::{
    clamp_n, critical_value, dof_fixed, dof_split, information_split, power_split,
    required_n_fixed, required_n_reest, SplitDesign, TestSpec,
};
pub use sim::{
    draw_period_effects, estimate_err, simulate_segment, simulate_segment_individuals,
    simulate_trial, ErrResult, FlagCounts, Method, NFinalSummary, NInitSpec, NMinSpec,
    PeriodEffects, ReplicateFlags, ReplicateOutcome, ScenarioSpec,
};
pub use ssre::{
    blinded_estimate, interim_reestimate, one_sample_variance_stats, unblinded_estimate,
    EstimateMethod, InterimEstimate, SsreDecision, SsrePolicy,
};

/// Scalar type the crate's numerics are generic over; implemented for `f32`
/// and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::iter::Sum
    + core::fmt::Debug
    + core::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into the scalar type.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }

    /// Converts a count into the scalar type.
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Errors reported by the design, fitting, and search operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// An allocation or design constraint was violated.
    #[error("invalid design: {0}")]
    Design(String),
    /// A scalar argument was outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The fixed-effect design does not identify the named coefficient.
    #[error("design does not identify coefficient `{0}`")]
    NotIdentifiable(String),
    /// The analysis degrees of freedom fell below one.
    #[error("degrees of freedom {0} is below 1")]
    DegenerateDof(i64),
    /// No per-cell sample size up to the cap reaches the target power.
    #[error("no per-cell sample size up to {0} attains the target power")]
    SampleSizeUnattainable(usize),
    /// Observations or summaries are inconsistent with the design.
    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

/// `f64` specializations of the main domain types.
pub type VarianceComponents64 = VarianceComponents<f64>;
pub type CellSummaries64 = CellSummaries<f64>;
pub type FitResult64 = FitResult<f64>;
pub type TestSpec64 = TestSpec<f64>;
pub type InterimEstimate64 = InterimEstimate<f64>;
pub type SsreDecision64 = SsreDecision<f64>;
pub type ScenarioSpec64 = ScenarioSpec<f64>;
pub type ReplicateOutcome64 = ReplicateOutcome<f64>;
pub type ErrResult64 = ErrResult<f64>;
