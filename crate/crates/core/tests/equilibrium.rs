//! Checks on every accepted run of the regression suite: certificate,
//! storage, convergence, determinism and accounting.

mod common;

use std::sync::LazyLock;

use common::{solved_suite, Solved};
use sestrade::mechanism::retailer_payoff;
use sestrade::metrics::ledger_check;
use sestrade::model::validate_trajectory;
use sestrade::stackelberg::follower_response;
use sestrade::{certify, iterate, IterConfig};

static SUITE: LazyLock<Vec<Solved>> = LazyLock::new(solved_suite);

#[test]
fn certificate_passes_everywhere() {
    for case in SUITE.iter() {
        let cert = certify(&case.result, &case.scenario, 10_000, 9);
        assert!(cert.passed, "{}: {cert:?}", case.name);
        assert!(
            cert.leader.accepted > 0,
            "{}: no feasible leader perturbation",
            case.name
        );
    }
}

#[test]
fn storage_stays_in_bounds_and_returns_to_start() {
    for case in SUITE.iter() {
        let storage = &case.result.storage;
        let q = storage.params.capacity;
        // the trajectory is re-simulated from the netted flows, so a level
        // on a bound can land a few ulps past it
        let worst = storage
            .charge
            .iter()
            .map(|&b| (-b).max(b - q))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= 1e-9, "{}: bound exceeded by {worst}", case.name);
        let end = storage.charge.last().unwrap();
        assert!((end - storage.params.initial_charge).abs() <= 1e-6, "{}", case.name);
        assert!(validate_trajectory(storage, 1e-6).passed(), "{}", case.name);
        for f in &case.result.exchange_flows {
            assert_eq!(f.charge * f.discharge, 0.0, "{}", case.name);
        }
    }
}

#[test]
fn converges_and_restarts_in_one_round() {
    let config = IterConfig::default();
    assert_eq!(config.tau, 1e-4);
    for case in SUITE.iter() {
        assert!(case.result.rounds <= 500, "{}", case.name);
        let again = iterate(&case.scenario, &config, Some(&case.result.warm_start())).unwrap();
        assert_eq!(again.rounds, 1, "{}", case.name);
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    for case in SUITE.iter().step_by(4) {
        let again = iterate(&case.scenario, &IterConfig::default(), None).unwrap();
        assert_eq!(again, case.result, "{}", case.name);
    }
}

#[test]
fn follower_response_is_stable_at_the_equilibrium() {
    for case in SUITE.iter() {
        let en = case.scenario.non_participant_load();
        let reports = case.scenario.reports();
        let response = follower_response(&case.result.strategy, &reports, &case.scenario.tariff, &en, true).unwrap();
        let norm = case
            .result
            .allocations
            .iter()
            .map(|a| a.aggregate.powi(2))
            .sum::<f64>()
            .sqrt();
        for (a, b) in response.iter().zip(&case.result.allocations) {
            assert!(
                (a.aggregate - b.aggregate).abs() <= 1e-9 * (1.0 + norm),
                "{}",
                case.name
            );
        }
    }
}

#[test]
fn payoff_is_non_negative_at_every_step() {
    for case in SUITE.iter() {
        let en = case.scenario.non_participant_load();
        let aggregate: Vec<f64> = case.result.allocations.iter().map(|a| a.aggregate).collect();
        let payoff = retailer_payoff(&case.result.strategy, &aggregate, &case.scenario.tariff, &en);
        for (t, u) in payoff.per_step.iter().enumerate() {
            assert!(*u >= -1e-9, "{} step {t}: {u}", case.name);
        }
    }
}

#[test]
fn money_and_energy_ledgers_close() {
    for case in SUITE.iter() {
        let check = ledger_check(&case.result, &case.scenario, 1e-9);
        assert!(check.passed, "{}: {check:?}", case.name);
    }
}
