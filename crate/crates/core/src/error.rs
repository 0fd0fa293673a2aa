use thiserror::Error;

/// Constraint families of the leader problem, used to name what made a
/// solve infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintFamily {
    PriceFloor,
    AllocationBounds,
    PayoffCondition,
    StorageLower,
    StorageUpper,
    StorageBoundary,
    ChargeSplit,
    ExchangeBounds,
}

impl std::fmt::Display for ConstraintFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintFamily::PriceFloor => "price-floor",
            ConstraintFamily::AllocationBounds => "allocation-bounds",
            ConstraintFamily::PayoffCondition => "payoff-condition",
            ConstraintFamily::StorageLower => "storage-lower",
            ConstraintFamily::StorageUpper => "storage-upper",
            ConstraintFamily::StorageBoundary => "storage-boundary",
            ConstraintFamily::ChargeSplit => "charge-split",
            ConstraintFamily::ExchangeBounds => "exchange-bounds",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("time index {index} out of range for horizon of {steps} steps")]
    Index { index: usize, steps: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("infeasible allocation at step {step}: aggregate {aggregate} kWh cannot be split over declared surplus {declared_total} kWh")]
    InfeasibleAllocation {
        step: usize,
        aggregate: f64,
        declared_total: f64,
    },

    #[error("mechanism error at step {step} for user `{user}`: {reason}")]
    Mechanism { step: usize, user: String, reason: String },

    #[error("leader problem infeasible (binding family: {family}, step {step:?})")]
    LeaderInfeasible {
        family: ConstraintFamily,
        step: Option<usize>,
    },

    #[error("solver hit {iterations} iterations with KKT residual {residual:e}")]
    SolverMaxIterations {
        iterations: usize,
        residual: f64,
        best_iterate: Vec<f64>,
    },

    #[error("solver finished with KKT residual {residual:e} above tolerance {tolerance:e}")]
    SolverInaccurate { residual: f64, tolerance: f64 },

    #[error("grid load outside (0, E_max) at steps {steps:?}")]
    GridLoad { steps: Vec<usize> },

    #[error("storage trajectory infeasible after complementarity repair: {detail}")]
    ComplementarityRepair { detail: String },

    #[error("no convergence after {rounds} rounds (last relative change {last_change:e})")]
    NonConvergence {
        rounds: usize,
        last_change: f64,
        history: Vec<f64>,
    },
}

impl Error {
    /// Short machine-readable category used in CLI error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Index { .. } | Error::InvalidParameter { .. } => "invalid-input",
            Error::Scenario(_) | Error::Parse { .. } => "scenario",
            Error::Io { .. } => "io",
            Error::InfeasibleAllocation { .. } => "allocation-infeasible",
            Error::Mechanism { .. } => "mechanism",
            Error::LeaderInfeasible { .. } => "leader-infeasible",
            Error::SolverMaxIterations { .. } | Error::SolverInaccurate { .. } => "solver",
            Error::GridLoad { .. } => "grid-load",
            Error::ComplementarityRepair { .. } => "complementarity-repair",
            Error::NonConvergence { .. } => "non-convergence",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
