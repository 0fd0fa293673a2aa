//! VCG payments with the Clarke pivot, user costs, the retailer payoff and
//! the truthfulness audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leader::LeaderStrategy;
use crate::model::user_grid_bounds;
use crate::pricing::TariffParams;
use crate::retailer::{allocate, optimal_aggregate, Allocation, LeaderStrategyPoint, StepType, AGGREGATE_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub user: String,
    pub step: usize,
    /// Payment to the retailer; negative is income.
    pub payment: f64,
    /// `-p_s * x_n`, paid to the SES provider.
    pub ses_component: f64,
    pub total_cost: f64,
}

impl PaymentRecord {
    pub fn new(user: impl Into<String>, step: usize, price: f64, ses_trade: f64, payment: f64) -> Self {
        let ses_component = -price * ses_trade;
        Self {
            user: user.into(),
            step,
            payment,
            ses_component,
            total_cost: ses_component + payment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetailerPayoff {
    pub per_step: Vec<f64>,
    pub cumulative: f64,
}

/// Social cost of everyone but `skip` under an allocation and grid price.
fn others_cost(alloc: &Allocation, price: f64, grid_price: f64, skip: Option<usize>) -> f64 {
    alloc
        .ses
        .iter()
        .zip(&alloc.grid)
        .enumerate()
        .filter(|(m, _)| Some(*m) != skip)
        .map(|(_, (x, e))| -price * x + grid_price * e)
        .sum()
}

/// Others' social cost with user `n` removed from the system. The
/// retailer's optimal aggregate does not depend on who participates, but the
/// remaining users may not be able to absorb it; the aggregate is then
/// clamped to what they can reach and `exact` is false.
fn pivot(
    n: usize,
    declared: &[f64],
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> Result<(f64, bool)> {
    let mut others = declared.to_vec();
    others.remove(n);
    let target = optimal_aggregate(point, tariff, non_participant_load, t);
    let kind = StepType::classify(&others);
    let (lo, hi) = kind.aggregate_range(others.iter().sum());
    let without = allocate(target.clamp(lo, hi), &others, t)?;
    let exact = (without.aggregate - target).abs() <= AGGREGATE_TOL;
    let pg = tariff.grid_price(point.exchange + non_participant_load + without.aggregate, t);
    Ok((others_cost(&without, point.price, pg, None), exact))
}

/// Payment of user `n` given the pivot term, with `n`'s own allocation.
fn payment_with_pivot(
    n: usize,
    with: &Allocation,
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
    h_without: f64,
) -> f64 {
    let pg = tariff.grid_price(point.exchange + non_participant_load + with.aggregate, t);
    pg * with.grid[n] + others_cost(with, point.price, pg, Some(n)) - h_without
}

/// VCG payment of user `n` with the Clarke pivot, computed in full: the
/// others' social cost with `n` present minus their social cost after
/// re-solving the retailer problem with `n` removed from the system, plus
/// the grid cost of `n`'s own trade.
pub fn clarke_payment(
    n: usize,
    declared: &[f64],
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
) -> Result<f64> {
    let with = allocate(optimal_aggregate(point, tariff, non_participant_load, t), declared, t)?;
    let (h_without, exact) = pivot(n, declared, point, tariff, non_participant_load, t)?;
    if !exact {
        return Err(Error::Mechanism {
            step: t,
            user: n.to_string(),
            reason: "the other users cannot absorb the optimal aggregate without this user".into(),
        });
    }
    Ok(payment_with_pivot(
        n,
        &with,
        point,
        tariff,
        non_participant_load,
        t,
        h_without,
    ))
}

/// Closed form of the Clarke payment: the SES price applied to the user's
/// grid trade.
pub fn simplified_payment(grid_trade: f64, price: f64) -> f64 {
    price * grid_trade
}

pub fn user_cost(ses_trade: f64, payment: f64, price: f64) -> f64 {
    -price * ses_trade + payment
}

/// Per-step `U(t) = (p_s - p_g) E_A` and its sum. `aggregate` is the
/// participants' realized grid trade.
pub fn retailer_payoff(
    strategy: &LeaderStrategy,
    aggregate: &[f64],
    tariff: &TariffParams,
    non_participant_load: &[f64],
) -> RetailerPayoff {
    let per_step: Vec<f64> = (0..strategy.steps())
        .map(|t| {
            let ea = aggregate[t] + non_participant_load[t];
            let pg = tariff.grid_price(strategy.exchange[t] + ea, t);
            (strategy.price[t] - pg) * ea
        })
        .collect();
    RetailerPayoff {
        cumulative: per_step.iter().sum(),
        per_step,
    }
}

/// Price threshold of the payoff condition: `phi (e_s + E_N) + delta`.
pub fn payoff_condition_bound(exchange: f64, non_participant_load: f64, tariff: &TariffParams, t: usize) -> f64 {
    tariff.phi[t] * (exchange + non_participant_load) + tariff.delta[t]
}

/// Default misreport grid: 41 evenly spaced points over
/// `[s - |s|, s + |s|]` (width at least 1 kWh), plus the truth.
pub fn default_misreport_grid(truth: f64) -> Vec<f64> {
    let half = truth.abs().max(0.5);
    let mut grid: Vec<f64> = (0..41).map(|i| truth - half + i as f64 * half / 20.0).collect();
    if !grid.contains(&truth) {
        grid.push(truth);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub declared: f64,
    /// `None` when the report makes the allocation or payment infeasible.
    pub cost: Option<f64>,
    pub payment: Option<f64>,
    pub grid_trade: Option<f64>,
    /// The assigned grid trade lies outside what the user's true surplus
    /// allows.
    pub physically_infeasible: bool,
    pub truthful: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTable {
    pub user: String,
    pub step: usize,
    pub true_surplus: f64,
    pub rows: Vec<AuditRow>,
    pub truth_cost: f64,
    pub min_cost: f64,
    /// False when the instance without the user had to be clamped; costs
    /// then carry a common offset and only their differences are
    /// meaningful.
    pub pivot_exact: bool,
    /// `truth_cost - min_cost`; positive means a misreport did better.
    pub violation: f64,
    pub passed: bool,
}

/// Sweeps user `n`'s report over `grid` with the leader strategy and the
/// other reports fixed, and records the cost the user actually bears:
/// the allocator sees the report, the energy balance uses the true surplus.
#[allow(clippy::too_many_arguments)]
pub fn ic_audit(
    user: &str,
    n: usize,
    declared: &[f64],
    true_surplus: f64,
    grid: &[f64],
    point: LeaderStrategyPoint,
    tariff: &TariffParams,
    non_participant_load: f64,
    t: usize,
    tolerance: f64,
) -> Result<AuditTable> {
    let (tlo, thi) = user_grid_bounds(true_surplus);
    // the pivot does not depend on n's own report
    let (h_without, pivot_exact) = pivot(n, declared, point, tariff, non_participant_load, t)?;
    let evaluate = |report: f64| -> Option<(f64, f64, f64)> {
        let mut reports = declared.to_vec();
        reports[n] = report;
        let with = allocate(optimal_aggregate(point, tariff, non_participant_load, t), &reports, t).ok()?;
        let k = payment_with_pivot(n, &with, point, tariff, non_participant_load, t, h_without);
        let e = with.grid[n];
        Some((user_cost(e + true_surplus, k, point.price), k, e))
    };

    let mut rows = Vec::with_capacity(grid.len() + 1);
    let mut candidates = grid.to_vec();
    if !candidates.contains(&true_surplus) {
        candidates.push(true_surplus);
    }
    for &report in &candidates {
        let r = evaluate(report);
        rows.push(AuditRow {
            declared: report,
            cost: r.map(|v| v.0),
            payment: r.map(|v| v.1),
            grid_trade: r.map(|v| v.2),
            physically_infeasible: r.is_some_and(|(_, _, e)| e < tlo - AGGREGATE_TOL || e > thi + AGGREGATE_TOL),
            truthful: report == true_surplus,
        });
    }
    let truth_cost = rows
        .iter()
        .find(|r| r.truthful)
        .and_then(|r| r.cost)
        .ok_or_else(|| Error::Mechanism {
            step: t,
            user: user.to_string(),
            reason: "truthful report is infeasible at this leader strategy".into(),
        })?;
    let min_cost = rows.iter().filter_map(|r| r.cost).fold(f64::INFINITY, f64::min);
    let violation = truth_cost - min_cost;
    Ok(AuditTable {
        user: user.to_string(),
        step: t,
        true_surplus,
        rows,
        truth_cost,
        min_cost,
        pivot_exact,
        violation,
        passed: violation <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tariff(phi: f64, delta: f64) -> TariffParams {
        TariffParams::constant(1, phi, delta, 1e6).unwrap()
    }

    /// Price making the optimal aggregate equal `agg`.
    fn price_for(agg: f64, exchange: f64, phi: f64, delta: f64, en: f64) -> f64 {
        phi * (2.0 * agg + en + exchange) + delta
    }

    #[test]
    fn simplified_examples() {
        assert_eq!(simplified_payment(-2.0, 12.0), -24.0);
        assert_eq!(simplified_payment(1.5, 12.0), 18.0);
        assert_eq!(simplified_payment(0.0, 12.0), 0.0);
    }

    #[test]
    fn user_cost_examples() {
        assert_eq!(user_cost(1.0, -5.0, 10.0), -15.0);
        assert_eq!(user_cost(0.0, 0.0, 10.0), 0.0);
    }

    #[test]
    fn payoff_examples() {
        let t = tariff(0.01, 10.0);
        assert_abs_diff_eq!(payoff_condition_bound(5.0, 20.0, &t, 0), 10.25, epsilon = 1e-12);
        assert_abs_diff_eq!(payoff_condition_bound(-20.0, 20.0, &t, 0), 10.0, epsilon = 1e-12);
        // p_s = 12 and p_g = 11 with E_A = 30: phi (e + 30) + delta = 11
        let t = tariff(0.01, 10.0);
        let st = LeaderStrategy {
            price: vec![12.0],
            exchange: vec![70.0],
        };
        let u = retailer_payoff(&st, &[10.0], &t, &[20.0]);
        assert_abs_diff_eq!(u.cumulative, 30.0, epsilon = 1e-12);
        // zero margin
        let st = LeaderStrategy {
            price: vec![11.0],
            exchange: vec![70.0],
        };
        assert_abs_diff_eq!(
            retailer_payoff(&st, &[10.0], &t, &[20.0]).cumulative,
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn clarke_two_surplus_users() {
        let (phi, delta, en, e) = (0.02, 10.0, 20.0, 1.0);
        let t = tariff(phi, delta);
        let declared = [2.0, 1.0];
        // optimal aggregate -0.5 stays feasible with either user removed
        let point = LeaderStrategyPoint {
            price: price_for(-0.5, e, phi, delta, en),
            exchange: e,
        };
        let alloc = allocate(optimal_aggregate(point, &t, en, 0), &declared, 0).unwrap();
        for n in 0..2 {
            let k = clarke_payment(n, &declared, point, &t, en, 0).unwrap();
            let closed = simplified_payment(alloc.grid[n], point.price);
            assert!((k - closed).abs() <= 1e-9 * (1.0 + k.abs()), "{k} vs {closed}");
            assert!(k < 0.0);
        }
    }

    #[test]
    fn clarke_single_user_needs_zero_aggregate() {
        let (phi, delta, en) = (0.05, 8.0, 10.0);
        let t = tariff(phi, delta);
        // only E_P = 0 keeps the instance without the user feasible
        let point = LeaderStrategyPoint {
            price: price_for(0.0, 0.0, phi, delta, en),
            exchange: 0.0,
        };
        let k = clarke_payment(0, &[3.0], point, &t, en, 0).unwrap();
        assert_abs_diff_eq!(k, 0.0, epsilon = 1e-12);
        let pg = t.grid_price(en, 0);
        assert_abs_diff_eq!(pg, point.price, epsilon = 1e-12);
        let point = LeaderStrategyPoint {
            price: price_for(-1.0, 0.0, phi, delta, en),
            exchange: 0.0,
        };
        assert!(matches!(
            clarke_payment(0, &[3.0], point, &t, en, 0),
            Err(Error::Mechanism { .. })
        ));
    }

    #[test]
    fn clarke_mixed_step_is_zero() {
        let (phi, delta, en) = (0.02, 10.0, 20.0);
        let t = tariff(phi, delta);
        let point = LeaderStrategyPoint {
            price: price_for(0.0, 0.0, phi, delta, en),
            exchange: 0.0,
        };
        for n in 0..3 {
            let k = clarke_payment(n, &[2.0, -1.0, 0.5], point, &t, en, 0).unwrap();
            assert!(k.abs() < 1e-12);
        }
    }

    #[test]
    fn misreport_grid_shape() {
        let g = default_misreport_grid(2.0);
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[40], 4.0);
        let g = default_misreport_grid(0.0);
        assert_abs_diff_eq!(g[40] - g[0], 1.0, epsilon = 1e-15);
        assert!(g.contains(&0.0));
    }

    #[test]
    fn audit_truth_attains_minimum() {
        let (phi, delta, en, e) = (0.02, 10.0, 20.0, 0.0);
        let t = tariff(phi, delta);
        let declared = [2.0, 1.5];
        let point = LeaderStrategyPoint {
            price: price_for(-0.6, e, phi, delta, en),
            exchange: e,
        };
        for n in 0..2 {
            let truth = declared[n];
            let table = ic_audit(
                "u",
                n,
                &declared,
                truth,
                &default_misreport_grid(truth),
                point,
                &t,
                en,
                0,
                1e-7,
            )
            .unwrap();
            assert!(table.passed, "violation {}", table.violation);
            assert_abs_diff_eq!(table.truth_cost, -point.price * truth, epsilon = 1e-9);
        }
    }

    #[test]
    fn audit_zero_surplus_user() {
        let (phi, delta, en) = (0.02, 10.0, 20.0);
        let t = tariff(phi, delta);
        let declared = [2.0, 0.0];
        let point = LeaderStrategyPoint {
            price: price_for(-0.5, 0.0, phi, delta, en),
            exchange: 0.0,
        };
        let table = ic_audit(
            "u",
            1,
            &declared,
            0.0,
            &default_misreport_grid(0.0),
            point,
            &t,
            en,
            0,
            1e-7,
        )
        .unwrap();
        assert!(table.passed);
        assert_abs_diff_eq!(table.truth_cost, 0.0, epsilon = 1e-12);
        for r in &table.rows {
            if let Some(c) = r.cost {
                assert!(c >= -1e-9, "row {r:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn cost_independent_of_grid_trade(price in 0.1..60.0f64, s in -10.0..10.0f64, e in -10.0..10.0f64) {
            let k = simplified_payment(e, price);
            let c = user_cost(e + s, k, price);
            prop_assert!((c + price * s).abs() <= 1e-12 * (1.0 + (price * s).abs() + (price * e).abs()));
        }

        #[test]
        fn threshold_side_matches_aggregate_sign(phi in 0.01..2.0f64, delta in 0.0..30.0f64, en in -20.0..50.0f64, e in -20.0..20.0f64, agg in -20.0..20.0f64) {
            let t = tariff(phi, delta);
            let price = price_for(agg, e, phi, delta, en);
            let m = payoff_condition_bound(e, en, &t, 0);
            let pg = t.grid_price(e + en + agg, 0);
            // p_s - M = 2 phi E_P and p_g - M = phi E_P
            prop_assert!((price - m - 2.0 * phi * agg).abs() < 1e-9 * (1.0 + price.abs()));
            prop_assert!((pg - m - phi * agg).abs() < 1e-9 * (1.0 + pg.abs()));
            if agg.abs() > 1e-6 {
                prop_assert_eq!(pg > m, agg > 0.0);
            }
        }
    }
}
