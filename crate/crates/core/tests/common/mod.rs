//! Instance generators and independent oracles shared by the integration
//! tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sestrade::error::ConstraintFamily;
use sestrade::leader::{AggregateBounds, LeaderProblem, LeaderStrategy, PayoffCase};
use sestrade::model::{FlowSplit, SesParams, TimeGrid, UserProfile};
use sestrade::pricing::TariffParams;
use sestrade::retailer::{LeaderStrategyPoint, StepType};
use sestrade::stackelberg::{iterate, IterConfig};
use sestrade::{reference_scenario, EquilibriumResult, Error, Scenario};

/// Provider revenue from its cash flows: SES sales to participants minus
/// the grid bill for its exchange, with the retailer's optimal aggregate
/// substituted in.
pub fn cash_flow_revenue(p: &LeaderProblem, s: &LeaderStrategy) -> f64 {
    (0..p.steps())
        .map(|t| {
            let (phi, delta, en, total) = (p.phi[t], p.delta[t], p.non_participant_load[t], p.declared_total[t]);
            let (price, e) = (s.price[t], s.exchange[t]);
            let y = 0.5 * ((price - delta) / phi - en - e);
            let grid_price = phi * (e + en + y) + delta;
            -price * (y + total) - grid_price * e
        })
        .sum()
}

/// Random one-step leader problem with a box on the exchange. Returns the
/// problem and the box half-width.
pub fn one_step_problem(rng: &mut ChaCha8Rng) -> (LeaderProblem, f64) {
    let phi = rng.random_range(0.05..0.6);
    let delta = rng.random_range(2.0..12.0);
    let en = rng.random_range(2.0..20.0);
    let mag = rng.random_range(0.5..8.0);
    let total = if rng.random_bool(0.5) { mag } else { -mag };
    let kind = StepType::classify(&[total]);
    let (lo, hi) = kind.aggregate_range(total);
    let exchange_box = rng.random_range(2.0..20.0);
    let problem = LeaderProblem {
        phi: vec![phi],
        delta: vec![delta],
        non_participant_load: vec![en],
        declared_total: vec![total],
        step_type: vec![kind],
        payoff_case: vec![PayoffCase::NonNegative],
        bounds: vec![AggregateBounds {
            lo: Some(lo),
            hi: Some(hi),
            lo_family: ConstraintFamily::AllocationBounds,
            hi_family: ConstraintFamily::AllocationBounds,
        }],
        user_flows: vec![FlowSplit::default()],
        storage: None,
        exchange_bounds: Some(vec![(-exchange_box, exchange_box)]),
        p_min: 0.1,
    };
    (problem, exchange_box)
}

/// One step where every leave-one-out instance can still absorb the
/// retailer's optimal aggregate. Returns reports, the strategy point whose
/// optimal aggregate equals a drawn target, and the non-participant load.
pub fn feasible_step(rng: &mut ChaCha8Rng, users: usize, phi: f64, delta: f64) -> (Vec<f64>, LeaderStrategyPoint, f64) {
    let en = rng.random_range(0.0..20.0);
    let exchange = rng.random_range(-5.0..5.0);
    let roll: f64 = rng.random();
    let mut reports: Vec<f64> = (0..users)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.05..3.0)
            }
        })
        .collect();
    let target = if roll < 0.15 {
        // mixed: some users in surplus, some in deficit; nobody trades with the grid
        reports[0] = -reports[0].max(0.1);
        reports[1] = reports[1].max(0.1);
        0.0
    } else {
        let sign = if roll < 0.575 { 1.0 } else { -1.0 };
        reports.iter_mut().for_each(|s| *s *= sign);
        let total: f64 = reports.iter().map(|s| s.abs()).sum();
        let largest = reports.iter().map(|s| s.abs()).fold(0.0, f64::max);
        // the others always cover [0, total - largest] in magnitude
        -sign * rng.random_range(0.0..=1.0) * (total - largest)
    };
    let price = delta + phi * (2.0 * target + en + exchange);
    (reports, LeaderStrategyPoint { price, exchange }, en)
}

fn bell(h: f64, centre: f64, width: f64) -> f64 {
    (-((h - centre) / width).powi(2)).exp()
}

/// Small eight-step scenario with random households, storage and tariff.
pub fn random_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let steps = 8;
    let grid = TimeGrid::new(steps, 3.0).unwrap();
    let mut users = Vec::new();
    let participants = rng.random_range(2..=8);
    let outsiders = rng.random_range(0..=4);
    for i in 0..participants + outsiders {
        let base = rng.random_range(0.3..2.0);
        let peak = rng.random_range(0.5..4.0);
        let pv = if i < participants {
            rng.random_range(0.0..6.0)
        } else {
            0.0
        };
        let demand: Vec<f64> = (0..steps)
            .map(|t| base + peak * bell(grid.start_hour(t) + 1.5, 19.0, 3.0))
            .collect();
        let generation: Vec<f64> = (0..steps)
            .map(|t| pv * bell(grid.start_hour(t) + 1.5, 12.5, 3.0))
            .collect();
        users.push(UserProfile::new(format!("u{i}"), demand, generation, i < participants).unwrap());
    }
    let capacity = rng.random_range(5.0..40.0);
    let ses = SesParams::new(capacity, rng.random_range(0.97..1.0), 0.9, 1.1, 0.25 * capacity).unwrap();
    let tariff = TariffParams::constant(steps, rng.random_range(0.02..0.3), rng.random_range(3.0..15.0), 1e4).unwrap();
    Scenario::new(grid, users, ses, tariff, 0).unwrap()
}

pub const SWEEP_FRACTIONS: [f64; 11] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub struct Solved {
    pub name: String,
    pub scenario: Scenario,
    pub result: EquilibriumResult,
}

/// Every accepted run the equilibrium checks cover: the 40-household
/// reference case at each sweep fraction plus random small scenarios.
/// Random draws whose load cannot be kept positive are skipped; any other
/// failure panics.
pub fn solved_suite() -> Vec<Solved> {
    let config = IterConfig::default();
    let mut suite: Vec<Solved> = SWEEP_FRACTIONS
        .iter()
        .map(|&f| {
            let scenario = reference_scenario(40, f, 1).unwrap();
            let result = iterate(&scenario, &config, None).unwrap_or_else(|e| panic!("reference {f}: {e}"));
            Solved {
                name: format!("reference {f}"),
                scenario,
                result,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut drawn = 0;
    while drawn < 12 {
        let scenario = random_scenario(&mut rng);
        let result = match iterate(&scenario, &config, None) {
            Ok(r) => r,
            Err(Error::GridLoad { .. }) => continue,
            Err(e) => panic!("random {drawn}: {e}"),
        };
        drawn += 1;
        suite.push(Solved {
            name: format!("random {drawn}"),
            scenario,
            result,
        });
    }
    suite
}
