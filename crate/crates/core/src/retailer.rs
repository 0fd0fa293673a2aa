//! Follower side of the game: the retailer's social-cost minimization and
//! the proportional allocation of the optimal aggregate grid trade.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ses_trade_from_grid_trade, user_grid_bounds};
use crate::pricing::TariffParams;

/// Slack (kWh) allowed when checking an aggregate against its feasible
/// interval. Leader solutions land on interval ends up to rounding.
pub const AGGREGATE_TOL: f64 = 1e-9;

/// The leader's decision at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderStrategyPoint {
    /// SES unit price, cents/kWh.
    pub price: f64,
    /// SES exchange with the grid, kWh. Positive charges the SES.
    pub exchange: f64,
}

/// Composition of the declared surpluses at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepType {
    /// Every non-zero declaration is a surplus.
    Surplus,
    /// Every non-zero declaration is a deficit.
    Deficit,
    /// At least one strict surplus and one strict deficit.
    Mixed,
    /// All declarations are zero (or there are no participants).
    Idle,
}

impl StepType {
    pub fn classify(declared: &[f64]) -> Self {
        let pos = declared.iter().any(|&s| s > 0.0);
        let neg = declared.iter().any(|&s| s < 0.0);
        match (pos, neg) {
            (true, true) => StepType::Mixed,
            (true, false) => StepType::Surplus,
            (false, true) => StepType::Deficit,
            (false, false) => StepType::Idle,
        }
    }

    /// Range of aggregate participant grid trade for which the proportional
    /// rule keeps every user inside its own bounds.
    pub fn aggregate_range(self, declared_total: f64) -> (f64, f64) {
        match self {
            StepType::Surplus => (-declared_total, 0.0),
            StepType::Deficit => (0.0, -declared_total),
            StepType::Mixed | StepType::Idle => (0.0, 0.0),
        }
    }
}

/// Sum of the per-user grid-trade intervals: every aggregate the retailer
/// could reach by some allocation that respects individual bounds.
pub fn reachable_aggregate_range(declared: &[f64]) -> (f64, f64) {
    declared
        .iter()
        .map(|&s| user_grid_bounds(s))
        .fold((0.0, 0.0), |(lo, hi), (a, b)| (lo + a, hi + b))
}

/// Per-user grid and SES trades at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub grid: Vec<f64>,
    pub ses: Vec<f64>,
    /// Total participant grid trade, equal to the sum of `grid`.
    pub aggregate: f64,
}

impl Allocation {
    pub fn ses_total(&self) -> f64 {
        self.ses.iter().sum()
    }
}

/// Social cost of an allocation: what participants pay the SES plus what
/// their grid trades cost at the unit grid price.
pub fn social_cost(
    alloc: &Allocation,
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> f64 {
    let load = point.exchange + non_participant_load + alloc.aggregate;
    let pg = tariff.grid_price(load, t);
    alloc
        .ses
        .iter()
        .zip(&alloc.grid)
        .map(|(x, e)| -point.price * x + pg * e)
        .sum()
}

/// Social cost written as a function of the aggregate only.
pub fn social_cost_of_aggregate(
    aggregate: f64,
    declared_total: f64,
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> f64 {
    let phi = tariff.phi[t];
    let lin = phi * (non_participant_load + point.exchange) + tariff.delta[t] - point.price;
    phi * aggregate * aggregate + lin * aggregate - point.price * declared_total
}

/// Stationary point of the social cost in the aggregate.
pub fn optimal_aggregate(
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> f64 {
    0.5 * ((point.price - tariff.delta[t]) / tariff.phi[t] - non_participant_load - point.exchange)
}

/// Splits an aggregate grid trade over the participants.
///
/// Same-type steps use the proportional rule on declared surplus, with
/// zero declarations left out of the denominator and given no grid trade.
/// Mixed steps give nobody a grid trade.
pub fn allocate(aggregate: f64, declared: &[f64], t: usize) -> Result<Allocation> {
    let kind = StepType::classify(declared);
    let grid: Vec<f64> = match kind {
        StepType::Mixed => vec![0.0; declared.len()],
        StepType::Idle => {
            if aggregate.abs() > AGGREGATE_TOL {
                return Err(Error::InfeasibleAllocation {
                    step: t,
                    aggregate,
                    declared_total: 0.0,
                });
            }
            vec![0.0; declared.len()]
        }
        StepType::Surplus | StepType::Deficit => {
            let total: f64 = declared.iter().sum();
            let (lo, hi) = kind.aggregate_range(total);
            if aggregate < lo - AGGREGATE_TOL || aggregate > hi + AGGREGATE_TOL {
                return Err(Error::InfeasibleAllocation {
                    step: t,
                    aggregate,
                    declared_total: total,
                });
            }
            declared
                .iter()
                .map(|&s| if s == 0.0 { 0.0 } else { aggregate * s / total })
                .collect()
        }
    };
    let ses = grid
        .iter()
        .zip(declared)
        .map(|(&e, &s)| ses_trade_from_grid_trade(e, s))
        .collect();
    let aggregate = grid.iter().sum();
    Ok(Allocation { grid, ses, aggregate })
}

/// Follower response at one step: optimal aggregate followed by allocation.
pub fn respond(
    point: LeaderStrategyPoint,
    declared: &[f64],
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> Result<Allocation> {
    let agg = optimal_aggregate(point, tariff, non_participant_load, t);
    allocate(agg, declared, t)
}
