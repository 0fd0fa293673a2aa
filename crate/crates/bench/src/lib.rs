//! Shared fixtures for the solver benchmarks.

use sestrade::{iterate, reference_scenario, EquilibriumResult, IterConfig, Scenario};

/// Reference case study and its converged equilibrium.
pub fn converged(n_total: usize, fraction: f64) -> (Scenario, EquilibriumResult) {
    let scenario = reference_scenario(n_total, fraction, 1).expect("reference scenario");
    let eq = iterate(&scenario, &IterConfig::default(), None).expect("reference scenario converges");
    (scenario, eq)
}
