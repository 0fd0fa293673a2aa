//! Payment rule and retailer payoff over randomized instances.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{feasible_step, random_scenario};
use sestrade::error::ConstraintFamily;
use sestrade::mechanism::{clarke_payment, retailer_payoff, simplified_payment};
use sestrade::pricing::TariffParams;
use sestrade::retailer::{allocate, optimal_aggregate};
use sestrade::stackelberg::{iterate, IterConfig};
use sestrade::Error;

#[test]
fn clarke_payment_equals_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0usize;
    for instance in 0..1000 {
        let h = [1usize, 4, 48][instance % 3];
        let users = rng.random_range(2..=20);
        let phi: Vec<f64> = (0..h).map(|_| rng.random_range(0.01..0.5)).collect();
        let delta: Vec<f64> = (0..h).map(|_| rng.random_range(2.0..12.0)).collect();
        let tariff = TariffParams::new(phi.clone(), delta.clone(), 1e6).unwrap();
        for t in 0..h {
            let (reports, point, en) = feasible_step(&mut rng, users, phi[t], delta[t]);
            let alloc = allocate(optimal_aggregate(point, &tariff, en, t), &reports, t).unwrap();
            let mut sum = 0.0;
            for n in 0..users {
                let k = clarke_payment(n, &reports, point, &tariff, en, t).unwrap();
                let closed = simplified_payment(alloc.grid[n], point.price);
                assert!(
                    (k - closed).abs() <= 1e-9 * (1.0 + k.abs()),
                    "instance {instance} t {t} n {n}: {k} vs {closed}"
                );
                if point.price > 0.0 {
                    if reports[n] > 0.0 && alloc.grid[n] < 0.0 {
                        assert!(k < 0.0);
                    }
                    if reports[n] < 0.0 && alloc.grid[n] > 0.0 {
                        assert!(k > 0.0);
                    }
                }
                sum += k;
                checked += 1;
            }
            // budget: payments add up to the SES price on the aggregate
            let budget = point.price * alloc.aggregate;
            assert!((sum - budget).abs() <= 1e-9 * (1.0 + budget.abs()));
        }
    }
    assert!(checked > 100_000);
}

#[test]
fn retailer_payoff_non_negative_when_payoff_condition_binds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = IterConfig::default();
    let (mut binding, mut attempts) = (0usize, 0usize);
    while binding < 200 {
        attempts += 1;
        assert!(
            attempts <= 5000,
            "only {binding} binding scenarios in {attempts} attempts"
        );
        let scenario = random_scenario(&mut rng);
        let eq = match iterate(&scenario, &config, None) {
            Ok(eq) => eq,
            // midday PV can push the total load to zero, which no strategy fixes
            Err(Error::GridLoad { .. }) => continue,
            Err(e) => panic!("attempt {attempts}: {e}"),
        };
        let en = scenario.non_participant_load();
        let active = (0..scenario.grid.steps).any(|t| {
            let b = eq.problem.bounds[t];
            let y = eq.allocations[t].aggregate;
            let at = |bound: Option<f64>, family| {
                family == ConstraintFamily::PayoffCondition && bound.is_some_and(|v| (y - v).abs() <= 1e-7)
            };
            at(b.lo, b.lo_family) || at(b.hi, b.hi_family)
        });
        let aggregate: Vec<f64> = eq.allocations.iter().map(|a| a.aggregate).collect();
        let payoff = retailer_payoff(&eq.strategy, &aggregate, &scenario.tariff, &en);
        assert!(
            payoff.cumulative >= -1e-9,
            "attempt {attempts}: payoff {}",
            payoff.cumulative
        );
        if active {
            binding += 1;
        }
    }
}
