//! Leader/follower best-response iteration and its equilibrium
//! certificate.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leader::{
    build_problem, solve_leader, split_and_repair, FollowerResponse, LeaderProblem, LeaderStrategy, PayoffCase,
    SolverConfig,
};
use crate::mechanism::{default_misreport_grid, ic_audit, simplified_payment, AuditTable, PaymentRecord};
use crate::model::{FlowSplit, SesState, SurplusReport};
use crate::pricing::TariffParams;
use crate::qp::RowKind;
use crate::retailer::{
    allocate, optimal_aggregate, reachable_aggregate_range, social_cost_of_aggregate, Allocation, StepType,
    AGGREGATE_TOL,
};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    /// Relative change of the leader strategy below which rounds stop.
    pub tau: f64,
    pub max_rounds: usize,
    /// Step taken towards each new leader solution, in (0, 1].
    pub relaxation: f64,
    pub p_min: f64,
    pub solver: SolverConfig,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            tau: 1e-4,
            max_rounds: 500,
            relaxation: 1.0,
            p_min: 0.1,
            solver: SolverConfig::default(),
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidParameter {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds", "must be at least 1");
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return bad("relaxation", "must lie in (0, 1]");
        }
        if !(self.p_min > 0.0) {
            return bad("p_min", "must be positive");
        }
        if !(self.solver.kkt_tol > 0.0) {
            return bad("kkt_tol", "must be positive");
        }
        Ok(())
    }
}

/// Starting point for [`iterate`] taken from an earlier result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub strategy: LeaderStrategy,
    pub payoff_cases: Vec<PayoffCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub strategy: LeaderStrategy,
    /// Exchange split as the last leader solve returned it.
    pub relaxed_exchange: Vec<FlowSplit>,
    /// Netted exchange after complementarity repair.
    pub exchange_flows: Vec<FlowSplit>,
    pub storage: SesState,
    /// Retailer's optimal aggregate at the final strategy.
    pub aggregate: Vec<f64>,
    pub user_ids: Vec<String>,
    pub allocations: Vec<Allocation>,
    /// Indexed `[step][participant]`.
    pub payments: Vec<Vec<PaymentRecord>>,
    pub rounds: usize,
    /// Relative change of the leader strategy after each round.
    pub history: Vec<f64>,
    pub payoff_cases: Vec<PayoffCase>,
    /// Leader problem of the final round.
    pub problem: LeaderProblem,
    pub kkt_residual: f64,
}

impl EquilibriumResult {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            strategy: self.strategy.clone(),
            payoff_cases: self.payoff_cases.clone(),
        }
    }

    /// Total grid load `e_s + E_N + sum of allocated grid trades`.
    pub fn total_load(&self, non_participant_load: &[f64]) -> Vec<f64> {
        (0..self.strategy.steps())
            .map(|t| self.strategy.exchange[t] + non_participant_load[t] + self.allocations[t].aggregate)
            .collect()
    }
}

/// Follower response at every step. With `strict` false the optimal
/// aggregate is first clamped into the allocatable range, which is only
/// needed for a starting point that is not itself a leader solution.
pub fn follower_response(
    strategy: &LeaderStrategy,
    reports: &[SurplusReport],
    tariff: &TariffParams,
    non_participant_load: &[f64],
    strict: bool,
) -> Result<Vec<Allocation>> {
    (0..strategy.steps())
        .map(|t| {
            let declared = Scenario::declared_at(reports, t);
            let point = strategy.point(t);
            let mut agg = optimal_aggregate(point, tariff, non_participant_load[t], t);
            let kind = StepType::classify(&declared);
            let (lo, hi) = kind.aggregate_range(declared.iter().sum());
            if !strict {
                agg = agg.clamp(lo, hi);
            } else if agg < lo - AGGREGATE_TOL || agg > hi + AGGREGATE_TOL {
                return Err(Error::InfeasibleAllocation {
                    step: t,
                    aggregate: agg,
                    declared_total: declared.iter().sum(),
                });
            }
            allocate(agg, &declared, t)
        })
        .collect()
}

/// Runs the best-response iteration to a fixed point.
///
/// Each round solves the leader problem against the previous follower
/// response, moves the strategy, and recomputes the response. Rounds stop
/// once the relative change is at most `tau` and the netted exchange gives
/// a valid storage trajectory under the new response.
pub fn iterate(scenario: &Scenario, config: &IterConfig, warm: Option<&WarmStart>) -> Result<EquilibriumResult> {
    config.validate()?;
    scenario.validate()?;
    let reports = scenario.reports();
    let en = scenario.non_participant_load();
    let tariff = &scenario.tariff;

    let (mut strategy, mut cases) = match warm {
        Some(w) => (w.strategy.clone(), Some(w.payoff_cases.clone())),
        None => (LeaderStrategy::initial(tariff, &en, config.p_min), None),
    };
    let allocations = follower_response(&strategy, &reports, tariff, &en, warm.is_some())?;
    let mut response = FollowerResponse::from_allocations(&allocations);
    let mut history = Vec::new();
    let mut last_repair_error = None;

    for round in 1..=config.max_rounds {
        let problem = build_problem(
            &reports,
            tariff,
            &en,
            &response,
            cases.as_deref(),
            &scenario.ses,
            config.p_min,
        )?;
        let sol = solve_leader(&problem, &config.solver)?;
        let (next, relaxed) = if config.relaxation < 1.0 {
            let s = sol.strategy.relax(&strategy, config.relaxation);
            let r = s.exchange.iter().map(|&e| FlowSplit::from_net(e)).collect();
            (s, r)
        } else {
            (sol.strategy.clone(), sol.relaxed.clone())
        };
        let change = next.relative_change(&strategy);
        history.push(change);
        cases = Some(problem.payoff_case.clone());

        let strict = !(config.relaxation < 1.0 && round == 1 && warm.is_none());
        let allocations = follower_response(&next, &reports, tariff, &en, strict)?;
        response = FollowerResponse::from_allocations(&allocations);
        strategy = next;

        match split_and_repair(&relaxed, &scenario.ses, &response.user_flows) {
            Ok((exchange_flows, storage)) if change <= config.tau => {
                let load: Vec<f64> = (0..strategy.steps())
                    .map(|t| strategy.exchange[t] + en[t] + allocations[t].aggregate)
                    .collect();
                let check = tariff.validate_total_load(&load);
                if !check.passed() {
                    return Err(Error::GridLoad { steps: check.steps() });
                }
                let aggregate = (0..strategy.steps())
                    .map(|t| optimal_aggregate(strategy.point(t), tariff, en[t], t))
                    .collect();
                let user_ids: Vec<String> = reports.iter().map(|r| r.id.clone()).collect();
                let payments = allocations
                    .iter()
                    .enumerate()
                    .map(|(t, a)| {
                        let p = strategy.price[t];
                        user_ids
                            .iter()
                            .enumerate()
                            .map(|(n, id)| PaymentRecord::new(id, t, p, a.ses[n], simplified_payment(a.grid[n], p)))
                            .collect()
                    })
                    .collect();
                return Ok(EquilibriumResult {
                    strategy,
                    relaxed_exchange: relaxed,
                    exchange_flows,
                    storage,
                    aggregate,
                    user_ids,
                    allocations,
                    payments,
                    rounds: round,
                    history,
                    payoff_cases: problem.payoff_case.clone(),
                    problem,
                    kkt_residual: sol.kkt_residual,
                });
            }
            Ok(_) => last_repair_error = None,
            Err(e) => last_repair_error = Some(e),
        }
    }
    let last_change = history.last().copied().unwrap_or(f64::INFINITY);
    match last_repair_error {
        Some(e) if last_change <= config.tau => Err(e),
        _ => Err(Error::NonConvergence {
            rounds: config.max_rounds,
            last_change,
            history,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerCheck {
    pub samples: usize,
    /// Smallest `C_t(E) - C_t(E_P*)` seen; negative means a sample did
    /// better than the equilibrium aggregate.
    pub worst_margin: f64,
    pub worst_step: usize,
    pub worst_aggregate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderCheck {
    pub samples: usize,
    /// Perturbations that stayed feasible.
    pub accepted: usize,
    /// Largest revenue gain over the equilibrium among accepted samples.
    pub max_improvement: f64,
    /// `(p, e, v)` offset achieving `max_improvement` when it is positive.
    pub improving_direction: Option<Vec<f64>>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub follower: FollowerCheck,
    pub leader: LeaderCheck,
    pub tolerance: f64,
    pub passed: bool,
}

/// Margin allowed by the certificate checks, in cents.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// Sampling certificate of an equilibrium.
///
/// The follower check draws aggregates over the range participants could
/// reach at each step, half uniformly and half near the equilibrium. The
/// leader check draws feasible perturbations of radius up to 1e-3 around
/// the final strategy in the final leader problem; directions are projected
/// onto the null space of the equality constraints and of a random subset
/// of the active inequalities so that feasible moves are actually found.
pub fn certify(result: &EquilibriumResult, scenario: &Scenario, samples: usize, seed: u64) -> CertificateReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = scenario.reports();
    let en = scenario.non_participant_load();
    let tariff = &scenario.tariff;
    let h = result.strategy.steps();

    let mut follower = FollowerCheck {
        samples: 0,
        worst_margin: f64::INFINITY,
        worst_step: 0,
        worst_aggregate: f64::NAN,
        passed: true,
    };
    for t in 0..h {
        let declared = Scenario::declared_at(&reports, t);
        let total: f64 = declared.iter().sum();
        let point = result.strategy.point(t);
        let star = result.aggregate[t];
        let c_star = social_cost_of_aggregate(star, total, point, tariff, en[t], t);
        let (lo, hi) = reachable_aggregate_range(&declared);
        let radius = 1e-3 * (1.0 + (hi - lo));
        for i in 0..samples {
            let e = if i % 2 == 0 || hi == lo {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            } else {
                (star + rng.random_range(-radius..=radius)).clamp(lo, hi)
            };
            let margin = social_cost_of_aggregate(e, total, point, tariff, en[t], t) - c_star;
            follower.samples += 1;
            if margin < follower.worst_margin {
                follower.worst_margin = margin;
                follower.worst_step = t;
                follower.worst_aggregate = e;
            }
        }
    }
    follower.passed = follower.worst_margin >= -CERTIFICATE_TOL;

    let leader = leader_check(result, samples.max(1), &mut rng);
    CertificateReport {
        passed: follower.passed && leader.passed,
        follower,
        leader,
        tolerance: CERTIFICATE_TOL,
    }
}

fn leader_check(result: &EquilibriumResult, samples: usize, rng: &mut ChaCha8Rng) -> LeaderCheck {
    let problem = &result.problem;
    let h = problem.steps();
    let n = 3 * h;
    let (qp, _) = problem.to_qp(0.0);
    let mut x_star = Vec::with_capacity(n);
    x_star.extend_from_slice(&result.strategy.price);
    x_star.extend_from_slice(&result.strategy.exchange);
    x_star.extend(result.relaxed_exchange.iter().map(|f| f.discharge));
    let f_star = problem.objective(&result.strategy);

    let equalities: Vec<usize> = (0..qp.rows.len()).filter(|&i| qp.rows[i].kind == RowKind::Eq).collect();
    let active: Vec<usize> = (0..qp.rows.len())
        .filter(|&i| qp.rows[i].kind == RowKind::Ge && qp.rows[i].slack(&x_star).abs() <= 1e-9)
        .collect();

    // orthonormal bases of the constraint spans to project out
    const SUBSETS: usize = 8;
    let bases: Vec<Vec<Vec<f64>>> = (0..SUBSETS)
        .map(|k| {
            let mut rows = equalities.clone();
            for &i in &active {
                if k == 0 || rng.random_bool(0.5) {
                    rows.push(i);
                }
            }
            if rows.is_empty() {
                return Vec::new();
            }
            let m = DMatrix::from_fn(n, rows.len(), |r, c| qp.rows[rows[c]].coeffs[r]);
            let svd = m.svd(true, false);
            let u = svd.u.expect("left singular vectors requested");
            let smax = svd.singular_values.max();
            (0..svd.singular_values.len())
                .filter(|&j| svd.singular_values[j] > 1e-10 * smax.max(1.0))
                .map(|j| u.column(j).iter().copied().collect())
                .collect()
        })
        .collect();

    let mut check = LeaderCheck {
        samples,
        accepted: 0,
        max_improvement: f64::NEG_INFINITY,
        improving_direction: None,
        passed: true,
    };
    for i in 0..samples {
        let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for q in &bases[i % SUBSETS] {
            let c: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
            for (di, qi) in d.iter_mut().zip(q) {
                *di -= c * qi;
            }
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let r = 1e-3 * rng.random::<f64>();
        let x: Vec<f64> = x_star.iter().zip(&d).map(|(a, b)| a + r * b / norm).collect();
        let s = LeaderStrategy {
            price: x[..h].to_vec(),
            exchange: x[h..2 * h].to_vec(),
        };
        if problem.constraint_violation(&s, &x[2 * h..]) > 1e-9 {
            continue;
        }
        check.accepted += 1;
        let gain = problem.objective(&s) - f_star;
        if gain > check.max_improvement {
            check.max_improvement = gain;
            if gain > CERTIFICATE_TOL {
                check.improving_direction = Some(x.iter().zip(&x_star).map(|(a, b)| a - b).collect());
            }
        }
    }
    check.passed = check.max_improvement <= CERTIFICATE_TOL;
    check
}

/// Truthfulness audit at a converged strategy for the selected
/// participants and steps (all of them when `None`), each over the default
/// 41-point misreport grid around the true surplus.
pub fn audit_equilibrium(
    result: &EquilibriumResult,
    scenario: &Scenario,
    users: Option<&[String]>,
    steps: Option<&[usize]>,
    tolerance: f64,
) -> Result<Vec<AuditTable>> {
    let participants: Vec<_> = scenario.participants().collect();
    if let Some(ids) = users {
        if let Some(missing) = ids.iter().find(|id| !participants.iter().any(|u| &u.id == *id)) {
            return Err(Error::Scenario(format!("no participating user `{missing}`")));
        }
    }
    let h = scenario.grid.steps;
    let all_steps: Vec<usize> = (0..h).collect();
    let steps = steps.unwrap_or(&all_steps);
    if let Some(&t) = steps.iter().find(|&&t| t >= h) {
        return Err(Error::Index { index: t, steps: h });
    }
    let reports = scenario.reports();
    let en = scenario.non_participant_load();
    let mut tables = Vec::new();
    for &t in steps {
        let declared = Scenario::declared_at(&reports, t);
        for (n, u) in participants.iter().enumerate() {
            if users.is_some_and(|ids| !ids.contains(&u.id)) {
                continue;
            }
            let truth = u.surplus(t)?;
            tables.push(ic_audit(
                &u.id,
                n,
                &declared,
                truth,
                &default_misreport_grid(truth),
                result.strategy.point(t),
                &scenario.tariff,
                en[t],
                t,
                tolerance,
            )?);
        }
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullGameRow {
    pub declared: f64,
    /// User's realized cost over the horizon, when the game re-converged.
    pub daily_cost: Option<f64>,
    pub error: Option<String>,
    pub truthful: bool,
}

/// Re-solves the whole game for each misreport of one user at one step and
/// records the user's realized daily cost. The leader reacts to the
/// misreport here, so this sweep is diagnostic only: truthfulness is
/// guaranteed for a fixed leader strategy, not for this setting.
pub fn full_game_audit(
    scenario: &Scenario,
    equilibrium: &EquilibriumResult,
    user: &str,
    step: usize,
    grid: &[f64],
    config: &IterConfig,
) -> Result<Vec<FullGameRow>> {
    let profile = scenario
        .participants()
        .find(|u| u.id == user)
        .ok_or_else(|| Error::Scenario(format!("no participating user `{user}`")))?;
    let n = scenario
        .participants()
        .position(|u| u.id == user)
        .expect("participant found above");
    let truth = profile.surplus(step)?;
    let base = scenario.reports()[n].declared.clone();
    let mut candidates = grid.to_vec();
    if !candidates.contains(&base[step]) {
        candidates.push(base[step]);
    }
    let warm = equilibrium.warm_start();
    Ok(candidates
        .into_iter()
        .map(|report| {
            let mut s = scenario.clone();
            let mut declared = base.clone();
            declared[step] = report;
            s.declared.insert(user.to_string(), declared);
            let outcome = iterate(&s, config, Some(&warm)).or_else(|_| iterate(&s, config, None));
            match outcome {
                Ok(eq) => {
                    let cost = (0..eq.strategy.steps())
                        .map(|t| {
                            let p = eq.strategy.price[t];
                            let e = eq.allocations[t].grid[n];
                            let s_true = profile.generation[t] - profile.demand[t];
                            -p * (e + s_true) + simplified_payment(e, p)
                        })
                        .sum();
                    FullGameRow {
                        declared: report,
                        daily_cost: Some(cost),
                        error: None,
                        truthful: report == truth,
                    }
                }
                Err(e) => FullGameRow {
                    declared: report,
                    daily_cost: None,
                    error: Some(e.to_string()),
                    truthful: report == truth,
                },
            }
        })
        .collect())
}
