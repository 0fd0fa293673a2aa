//! Energy trading between a shared-storage (SES) provider and a retailer
//! serving a neighbourhood of households.
//!
//! The SES provider leads: it sets a per-step price and a grid exchange
//! schedule. The retailer follows by choosing how much of the
//! participating households' surplus or deficit goes through the grid,
//! and charges each household a VCG payment that makes reporting true
//! surplus a dominant strategy. [`stackelberg::iterate`] alternates the
//! two until the leader strategy stops moving.
//!
//! ```no_run
//! use sestrade::{iterate, reference_scenario, IterConfig};
//!
//! let scenario = reference_scenario(40, 0.25, 1)?;
//! let eq = iterate(&scenario, &IterConfig::default(), None)?;
//! println!("converged in {} rounds", eq.rounds);
//! # Ok::<(), sestrade::Error>(())
//! ```

// `!(x >= lo)` style checks reject NaN along with out-of-range values, and
// the per-step loops index several parallel vectors at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod leader;
pub mod mechanism;
pub mod metrics;
pub mod model;
pub mod pricing;
pub mod qp;
pub mod retailer;
pub mod scenario;
pub mod stackelberg;

pub use error::{ConstraintFamily, Error, Result};
pub use leader::{LeaderProblem, LeaderSolution, LeaderStrategy, PayoffCase, SolverConfig};
pub use mechanism::{AuditTable, PaymentRecord};
pub use metrics::{baseline_run, par_reduction, system_report, RunReport};
pub use model::{FlowSplit, SesParams, SesState, SurplusReport, TimeGrid, UserProfile};
pub use pricing::{TariffParams, TouTargets};
pub use retailer::{Allocation, LeaderStrategyPoint, StepType};
pub use scenario::{reference_scenario, reference_scenario_with, NoiseSpec, Scenario};
pub use stackelberg::{certify, iterate, CertificateReport, EquilibriumResult, IterConfig};
