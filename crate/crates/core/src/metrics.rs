//! Reported quantities: loads, prices, social and community costs,
//! per-user costs, peak-to-average ratio, and the money/energy ledger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::retailer_payoff;
use crate::pricing::TouTargets;
use crate::retailer::social_cost;
use crate::scenario::{apply_forecast_noise, reference_scenario_with, NoiseSpec, Scenario};
use crate::stackelberg::{iterate, EquilibriumResult, IterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCost {
    pub id: String,
    pub participating: bool,
    /// Sum over the horizon, cents.
    pub daily_cost: f64,
}

/// Mean daily cost per group; `None` when the group is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCosts {
    pub participating: Option<f64>,
    pub non_participating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total_load: Vec<f64>,
    pub grid_price: Vec<f64>,
    /// Absent for the baseline, which has no SES.
    pub ses_price: Option<Vec<f64>>,
    pub exchange: Vec<f64>,
    pub social_cost: Vec<f64>,
    pub social_cost_total: f64,
    pub community_cost: f64,
    pub retailer_payoff: f64,
    pub par: f64,
    pub user_costs: Vec<UserCost>,
    pub groups: GroupCosts,
}

/// `max E / mean E`.
pub fn par(load: &[f64]) -> Result<f64> {
    let mean = load.iter().sum::<f64>() / load.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::InvalidParameter {
            field: "load".into(),
            reason: format!("peak-to-average ratio needs a positive mean load, got {mean}"),
        });
    }
    Ok(load.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / mean)
}

/// Percentage reduction of the peak-to-average ratio against a baseline.
pub fn par_reduction(report: &RunReport, baseline: &RunReport) -> f64 {
    100.0 * (baseline.par - report.par) / baseline.par
}

fn group_means(costs: &[UserCost]) -> GroupCosts {
    let mean = |p: bool| {
        let v: Vec<f64> = costs
            .iter()
            .filter(|c| c.participating == p)
            .map(|c| c.daily_cost)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    GroupCosts {
        participating: mean(true),
        non_participating: mean(false),
    }
}

/// System without an SES: participants trade their whole surplus with the
/// grid and every user pays the grid price.
pub fn baseline_run(scenario: &Scenario) -> Result<RunReport> {
    let h = scenario.grid.steps;
    let tariff = &scenario.tariff;
    let en = scenario.non_participant_load();
    let mut ep = vec![0.0; h];
    for u in scenario.participants() {
        for (e, (d, g)) in ep.iter_mut().zip(u.demand.iter().zip(&u.generation)) {
            *e += d - g;
        }
    }
    let load: Vec<f64> = (0..h).map(|t| en[t] + ep[t]).collect();
    let check = tariff.validate_total_load(&load);
    if !check.passed() {
        return Err(Error::GridLoad { steps: check.steps() });
    }
    let pg: Vec<f64> = (0..h).map(|t| tariff.grid_price(load[t], t)).collect();
    let social: Vec<f64> = (0..h).map(|t| pg[t] * ep[t]).collect();
    let user_costs: Vec<UserCost> = scenario
        .users
        .iter()
        .map(|u| UserCost {
            id: u.id.clone(),
            participating: u.participating,
            daily_cost: (0..h).map(|t| pg[t] * (u.demand[t] - u.generation[t])).sum(),
        })
        .collect();
    Ok(RunReport {
        par: par(&load)?,
        social_cost_total: social.iter().sum(),
        community_cost: social.iter().sum(),
        retailer_payoff: 0.0,
        groups: group_means(&user_costs),
        total_load: load,
        grid_price: pg,
        ses_price: None,
        exchange: vec![0.0; h],
        social_cost: social,
        user_costs,
    })
}

/// `sum_t p_g (e_s + E_A) - p_s E_N`: what the SES provider, the
/// participants and the retailer pay between them.
pub fn community_cost(result: &EquilibriumResult, scenario: &Scenario) -> f64 {
    let en = scenario.non_participant_load();
    let load = result.total_load(&en);
    (0..load.len())
        .map(|t| scenario.tariff.grid_price(load[t], t) * load[t] - result.strategy.price[t] * en[t])
        .sum()
}

/// Daily cost of every user at an equilibrium. Participants pay through
/// the mechanism; non-participants pay the SES price on their net load.
pub fn user_costs(result: &EquilibriumResult, scenario: &Scenario) -> Vec<UserCost> {
    let h = result.strategy.steps();
    let mut costs: Vec<UserCost> = result
        .user_ids
        .iter()
        .enumerate()
        .map(|(n, id)| UserCost {
            id: id.clone(),
            participating: true,
            daily_cost: (0..h).map(|t| result.payments[t][n].total_cost).sum(),
        })
        .collect();
    costs.extend(scenario.non_participants().map(|u| {
        UserCost {
            id: u.id.clone(),
            participating: false,
            daily_cost: (0..h)
                .map(|t| result.strategy.price[t] * (u.demand[t] - u.generation[t]))
                .sum(),
        }
    }));
    costs
}

pub fn group_costs(result: &EquilibriumResult, scenario: &Scenario) -> GroupCosts {
    group_means(&user_costs(result, scenario))
}

pub fn system_report(result: &EquilibriumResult, scenario: &Scenario) -> Result<RunReport> {
    let tariff = &scenario.tariff;
    let en = scenario.non_participant_load();
    let load = result.total_load(&en);
    let h = load.len();
    let pg: Vec<f64> = (0..h).map(|t| tariff.grid_price(load[t], t)).collect();
    let social: Vec<f64> = (0..h)
        .map(|t| social_cost(&result.allocations[t], result.strategy.point(t), tariff, en[t], t))
        .collect();
    let ep: Vec<f64> = result.allocations.iter().map(|a| a.aggregate).collect();
    let payoff = retailer_payoff(&result.strategy, &ep, tariff, &en);
    let costs = user_costs(result, scenario);
    Ok(RunReport {
        par: par(&load)?,
        social_cost_total: social.iter().sum(),
        community_cost: community_cost(result, scenario),
        retailer_payoff: payoff.cumulative,
        groups: group_means(&costs),
        total_load: load,
        grid_price: pg,
        ses_price: Some(result.strategy.price.clone()),
        exchange: result.strategy.exchange.clone(),
        social_cost: social,
        user_costs: costs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerCheck {
    /// Largest per-step imbalance of the money flows between participants,
    /// non-participants, SES provider, retailer and grid, cents.
    pub max_money_residual: f64,
    /// Largest per-step gap in `E = e_s + E_N + sum of grid trades`, kWh.
    pub max_energy_residual: f64,
    pub passed: bool,
}

/// Checks that money and energy balance at every step.
///
/// Per step, participants pay `sum(-p_s x_n + k_n)`, non-participants pay
/// `p_s E_N`; the SES provider earns `-p_s sum(x_n) - p_g e_s`, the retailer
/// earns `U`, the grid earns `p_g E`. Payments in must equal earnings.
pub fn ledger_check(result: &EquilibriumResult, scenario: &Scenario, tol: f64) -> LedgerCheck {
    let tariff = &scenario.tariff;
    let en = scenario.non_participant_load();
    let load = result.total_load(&en);
    let ep: Vec<f64> = result.allocations.iter().map(|a| a.aggregate).collect();
    let payoff = retailer_payoff(&result.strategy, &ep, tariff, &en);
    let mut money = 0.0f64;
    let mut energy = 0.0f64;
    for t in 0..load.len() {
        let p = result.strategy.price[t];
        let e = result.strategy.exchange[t];
        let pg = tariff.grid_price(load[t], t);
        let alloc = &result.allocations[t];
        let grid_trades: f64 = alloc.grid.iter().sum();
        energy = energy.max((load[t] - (e + en[t] + grid_trades)).abs());

        let participants: f64 = result.payments[t].iter().map(|r| r.total_cost).sum();
        let paid = participants + p * en[t];
        let ses_income = -p * alloc.ses.iter().sum::<f64>() - pg * e;
        let earned = ses_income + payoff.per_step[t] + pg * load[t];
        money = money.max((paid - earned).abs());
    }
    LedgerCheck {
        max_money_residual: money,
        max_energy_residual: energy,
        passed: money <= tol && energy <= tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub participants: usize,
    pub par_baseline: f64,
    pub par_system: f64,
    pub par_reduction: f64,
    pub social_cost_baseline: f64,
    pub social_cost_system: f64,
    pub community_cost: f64,
    pub retailer_payoff: f64,
    pub participating_mean_cost: Option<f64>,
    pub non_participating_mean_cost: Option<f64>,
    pub rounds: usize,
}

/// Solves the reference scenario at each participating fraction and
/// compares it with its baseline.
pub fn sweep(
    n_total: usize,
    fractions: &[f64],
    seed: u64,
    targets: &TouTargets,
    config: &IterConfig,
) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&f| {
            let scenario = reference_scenario_with(n_total, f, seed, targets)?;
            let eq = iterate(&scenario, config, None)?;
            let system = system_report(&eq, &scenario)?;
            let baseline = baseline_run(&scenario)?;
            Ok(SweepRow {
                fraction: f,
                participants: scenario.participants().count(),
                par_baseline: baseline.par,
                par_system: system.par,
                par_reduction: par_reduction(&system, &baseline),
                social_cost_baseline: baseline.social_cost_total,
                social_cost_system: system.social_cost_total,
                community_cost: system.community_cost,
                retailer_payoff: system.retailer_payoff,
                participating_mean_cost: system.groups.participating,
                non_participating_mean_cost: system.groups.non_participating,
                rounds: eq.rounds,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub mape: f64,
    pub trials: usize,
    /// Mean over trials of the community cost realized on the true profiles.
    pub community_cost: f64,
    /// Mean over trials of the participants' mean realized daily cost.
    pub participating_mean_cost: f64,
    /// Share of perturbed samples clamped at zero.
    pub clamped_share: f64,
}

/// Solves on noisy forecasts and evaluates the outcome on the true
/// profiles: grid trades and the leader strategy come from the noisy
/// solve, while loads and surpluses are the true ones. Each trial uses the
/// same seed at every MAPE level, so rows differ only by noise scale.
pub fn noise_study(scenario: &Scenario, mapes: &[f64], trials: usize, config: &IterConfig) -> Result<Vec<NoiseRow>> {
    let true_en = scenario.non_participant_load();
    let tariff = &scenario.tariff;
    let participants: Vec<_> = scenario.participants().collect();
    mapes
        .iter()
        .map(|&mape| {
            let runs = if mape == 0.0 { 1 } else { trials.max(1) };
            let mut community = 0.0;
            let mut part_cost = 0.0;
            let mut clamped = 0usize;
            let mut samples = 0usize;
            for k in 0..runs {
                let spec = NoiseSpec {
                    mape,
                    seed: scenario.seed.wrapping_add(k as u64),
                };
                let (noisy, report) = apply_forecast_noise(scenario, &spec)?;
                clamped += report.clamped;
                samples += report.samples;
                let eq = iterate(&noisy, config, None)?;
                for t in 0..scenario.grid.steps {
                    let p = eq.strategy.price[t];
                    let load = eq.strategy.exchange[t] + true_en[t] + eq.allocations[t].aggregate;
                    community += tariff.grid_price(load, t) * load - p * true_en[t];
                }
                // a participant's realized cost is -p_s times its true surplus
                let mean: f64 = participants
                    .iter()
                    .map(|u| {
                        (0..scenario.grid.steps)
                            .map(|t| -eq.strategy.price[t] * (u.generation[t] - u.demand[t]))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / participants.len() as f64;
                part_cost += mean;
            }
            Ok(NoiseRow {
                mape,
                trials: runs,
                community_cost: community / runs as f64,
                participating_mean_cost: part_cost / runs as f64,
                clamped_share: if samples > 0 {
                    clamped as f64 / samples as f64
                } else {
                    0.0
                },
            })
        })
        .collect()
}
