//! The SES provider's revenue maximization.
//!
//! Substituting the retailer's optimal aggregate into the provider's revenue
//! gives a separable concave quadratic in `(p_s(t), e_s(t))`. The feasible
//! set is polyhedral: a price floor, an interval on the retailer's optimal
//! aggregate (allocation bounds intersected with the payoff condition), and
//! the storage trajectory bounds with user SES flows held fixed at the last
//! follower response.
//!
//! The storage constraints need the exchange split into charge and
//! discharge parts. The problem is posed over `(p, e, v)` with `e` the net
//! exchange and `v` the discharge part, so `e⁺ = e + v`, `e⁻ = v`.
//! Simultaneous charge and discharge (`v > max(0, -e)`) is allowed by the
//! relaxation and removed afterwards by [`split_and_repair`].

use serde::{Deserialize, Serialize};

use crate::error::{ConstraintFamily, Error, Result};
use crate::model::{validate_trajectory, FlowSplit, SesParams, SesState, SurplusReport, BOUNDARY_TOL};
use crate::pricing::TariffParams;
use crate::qp::{self, QpError, QpOptions, QpProblem, Row, RowKind};
use crate::retailer::{Allocation, LeaderStrategyPoint, StepType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderStrategy {
    /// SES unit price per step, cents/kWh.
    pub price: Vec<f64>,
    /// SES exchange with the grid per step, kWh.
    pub exchange: Vec<f64>,
}

impl LeaderStrategy {
    pub fn steps(&self) -> usize {
        self.price.len()
    }

    pub fn point(&self, t: usize) -> LeaderStrategyPoint {
        LeaderStrategyPoint {
            price: self.price[t],
            exchange: self.exchange[t],
        }
    }

    /// Starting point of the iteration: the payoff threshold with no
    /// exchange, lifted to the price floor where needed.
    pub fn initial(tariff: &TariffParams, non_participant_load: &[f64], p_min: f64) -> Self {
        let price = non_participant_load
            .iter()
            .enumerate()
            .map(|(t, &en)| (tariff.delta[t] + tariff.phi[t] * en).max(p_min))
            .collect();
        Self {
            price,
            exchange: vec![0.0; non_participant_load.len()],
        }
    }

    fn norm(&self) -> f64 {
        self.price
            .iter()
            .chain(&self.exchange)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `|self - previous|_2 / |self|_2` over the stacked vector.
    pub fn relative_change(&self, previous: &LeaderStrategy) -> f64 {
        let diff: f64 = self
            .price
            .iter()
            .zip(&previous.price)
            .chain(self.exchange.iter().zip(&previous.exchange))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let n = self.norm();
        if n > 0.0 {
            diff / n
        } else {
            diff
        }
    }

    /// `(1 - w) * previous + w * self`.
    pub fn relax(&self, previous: &LeaderStrategy, w: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - w) * y + w * x).collect();
        Self {
            price: mix(&self.price, &previous.price),
            exchange: mix(&self.exchange, &previous.exchange),
        }
    }
}

/// Which side of the payoff threshold the retailer's total load sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffCase {
    /// `E_A >= 0`, so the price must be at or above the threshold.
    NonNegative,
    /// `E_A < 0`, so the price must be at or below the threshold.
    Negative,
}

impl PayoffCase {
    /// Case implied by a total participant-plus-non-participant load,
    /// keeping `previous` when the load sits exactly on zero.
    pub fn from_load(load: f64, previous: Option<PayoffCase>) -> Self {
        if load > 0.0 {
            PayoffCase::NonNegative
        } else if load < 0.0 {
            PayoffCase::Negative
        } else {
            previous.unwrap_or(PayoffCase::NonNegative)
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PayoffCase::NonNegative => PayoffCase::Negative,
            PayoffCase::Negative => PayoffCase::NonNegative,
        }
    }

    /// Interval on the retailer's optimal aggregate. Besides the price side
    /// of the threshold it pins the sign of `E_A = E_P + E_N`, so the case
    /// cannot be contradicted by the solution it produces.
    pub fn interval(self, non_participant_load: f64) -> (Option<f64>, Option<f64>) {
        match self {
            PayoffCase::NonNegative => (Some(0.0f64.max(-non_participant_load)), None),
            PayoffCase::Negative => (None, Some(0.0f64.min(-non_participant_load))),
        }
    }
}

/// Interval on the retailer's optimal aggregate at one step. `None` is
/// unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateBounds {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub lo_family: ConstraintFamily,
    pub hi_family: ConstraintFamily,
}

impl AggregateBounds {
    pub fn intersect(kind: StepType, declared_total: f64, case: PayoffCase, non_participant_load: f64) -> Self {
        let (tlo, thi) = kind.aggregate_range(declared_total);
        let (plo, phi) = case.interval(non_participant_load);
        let (lo, lo_family) = match plo {
            Some(p) if p > tlo => (p, ConstraintFamily::PayoffCondition),
            _ => (tlo, ConstraintFamily::AllocationBounds),
        };
        let (hi, hi_family) = match phi {
            Some(p) if p < thi => (p, ConstraintFamily::PayoffCondition),
            _ => (thi, ConstraintFamily::AllocationBounds),
        };
        Self {
            lo: Some(lo),
            hi: Some(hi),
            lo_family,
            hi_family,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!((self.lo, self.hi), (Some(a), Some(b)) if a > b)
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo - tol) && self.hi.is_none_or(|hi| v <= hi + tol)
    }

    /// Distance from `v` to the interval.
    pub fn violation(&self, v: f64) -> f64 {
        let below = self.lo.map_or(0.0, |lo| lo - v);
        let above = self.hi.map_or(0.0, |hi| v - hi);
        below.max(above).max(0.0)
    }
}

/// Objective coefficients at one step: revenue is
/// `lambda p² + mu p + nu e² + xi e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub xi: f64,
}

/// What the leader knows about the follower from the previous round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerResponse {
    /// Participants' total grid trade per step.
    pub aggregate: Vec<f64>,
    /// Participants' SES charge and discharge totals per step.
    pub user_flows: Vec<FlowSplit>,
}

impl FollowerResponse {
    pub fn from_allocations(allocations: &[Allocation]) -> Self {
        Self {
            aggregate: allocations.iter().map(|a| a.aggregate).collect(),
            user_flows: allocations
                .iter()
                .map(|a| crate::model::aggregate_user_flows(a.ses.iter().copied()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderProblem {
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub non_participant_load: Vec<f64>,
    pub declared_total: Vec<f64>,
    pub step_type: Vec<StepType>,
    pub payoff_case: Vec<PayoffCase>,
    pub bounds: Vec<AggregateBounds>,
    /// Participants' SES flows, fixed for this solve.
    pub user_flows: Vec<FlowSplit>,
    /// `None` drops the storage constraints entirely.
    pub storage: Option<SesParams>,
    /// Optional box on the exchange per step.
    pub exchange_bounds: Option<Vec<(f64, f64)>>,
    pub p_min: f64,
}

/// Constraint family and step of a QP row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub family: ConstraintFamily,
    pub step: Option<usize>,
}

impl LeaderProblem {
    pub fn steps(&self) -> usize {
        self.phi.len()
    }

    pub fn coefficients(&self, t: usize) -> Coefficients {
        let (phi, delta, en) = (self.phi[t], self.delta[t], self.non_participant_load[t]);
        Coefficients {
            lambda: -0.5 / phi,
            mu: 0.5 * (en + delta / phi) - self.declared_total[t],
            nu: -0.5 * phi,
            xi: -0.5 * (phi * en + delta),
        }
    }

    /// Retailer's optimal aggregate at `(p, e)`.
    pub fn aggregate_at(&self, price: f64, exchange: f64, t: usize) -> f64 {
        0.5 * ((price - self.delta[t]) / self.phi[t] - self.non_participant_load[t] - exchange)
    }

    /// Revenue as the separable quadratic in `(p, e)`.
    pub fn objective(&self, strategy: &LeaderStrategy) -> f64 {
        (0..self.steps())
            .map(|t| {
                let c = self.coefficients(t);
                let (p, e) = (strategy.price[t], strategy.exchange[t]);
                c.lambda * p * p + c.mu * p + c.nu * e * e + c.xi * e
            })
            .sum()
    }

    /// Storage trajectory for a relaxed exchange split.
    pub fn storage_trajectory(&self, exchange: &[FlowSplit]) -> Option<SesState> {
        self.storage
            .map(|ses| SesState::simulate(ses, exchange, &self.user_flows))
    }

    /// Largest violation of any constraint, in the constraint's own units
    /// (cents/kWh for the price floor, kWh otherwise). `discharge` is the
    /// relaxed discharge part `v`.
    pub fn constraint_violation(&self, strategy: &LeaderStrategy, discharge: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        let mut split = Vec::with_capacity(self.steps());
        for t in 0..self.steps() {
            let (p, e, v) = (strategy.price[t], strategy.exchange[t], discharge[t]);
            worst = worst.max(self.p_min - p);
            worst = worst.max(-v).max(-(e + v));
            worst = worst.max(self.bounds[t].violation(self.aggregate_at(p, e, t)));
            if let Some(b) = &self.exchange_bounds {
                worst = worst.max(b[t].0 - e).max(e - b[t].1);
            }
            split.push(FlowSplit {
                charge: e + v,
                discharge: v,
            });
        }
        if let Some(state) = self.storage_trajectory(&split) {
            let q = state.params.capacity;
            let last = state.charge.len() - 1;
            for (t, &b) in state.charge.iter().enumerate() {
                if t == last {
                    worst = worst.max((b - state.params.initial_charge).abs());
                } else {
                    worst = worst.max(-b).max(b - q);
                }
            }
        }
        worst
    }

    /// Minimization form over `x = (p, e, v)` with unit-norm rows.
    /// `regularization` is the curvature given to `v`.
    pub fn to_qp(&self, regularization: f64) -> (QpProblem, Vec<RowTag>) {
        let h = self.steps();
        let n = 3 * h;
        let (ip, ie, iv) = (0, h, 2 * h);
        let mut hessian = vec![0.0; n * n];
        let mut linear = vec![0.0; n];
        for t in 0..h {
            let c = self.coefficients(t);
            hessian[(ip + t) * n + ip + t] = -2.0 * c.lambda;
            hessian[(ie + t) * n + ie + t] = -2.0 * c.nu;
            hessian[(iv + t) * n + iv + t] = regularization;
            linear[ip + t] = -c.mu;
            linear[ie + t] = -c.xi;
        }

        let mut rows = Vec::new();
        let mut tags = Vec::new();
        let mut push = |coeffs: Vec<f64>, rhs: f64, kind: RowKind, family, step| {
            let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
            rows.push(Row {
                coeffs: coeffs.iter().map(|c| c / norm).collect(),
                rhs: rhs / norm,
                kind,
            });
            tags.push(RowTag { family, step });
        };
        let unit = |i: usize, s: f64| {
            let mut c = vec![0.0; n];
            c[i] = s;
            c
        };

        for t in 0..h {
            push(
                unit(ip + t, 1.0),
                self.p_min,
                RowKind::Ge,
                ConstraintFamily::PriceFloor,
                Some(t),
            );
            push(
                unit(iv + t, 1.0),
                0.0,
                RowKind::Ge,
                ConstraintFamily::ChargeSplit,
                Some(t),
            );
            let mut c = unit(iv + t, 1.0);
            c[ie + t] = 1.0;
            push(c, 0.0, RowKind::Ge, ConstraintFamily::ChargeSplit, Some(t));

            // E_P = p/(2 phi) - e/2 - k
            let k = 0.5 * (self.delta[t] / self.phi[t] + self.non_participant_load[t]);
            let mut a = vec![0.0; n];
            a[ip + t] = 0.5 / self.phi[t];
            a[ie + t] = -0.5;
            let b = self.bounds[t];
            match (b.lo, b.hi) {
                (Some(lo), Some(hi)) if lo == hi => {
                    push(a, lo + k, RowKind::Eq, b.lo_family, Some(t));
                }
                (lo, hi) => {
                    if let Some(lo) = lo {
                        push(a.clone(), lo + k, RowKind::Ge, b.lo_family, Some(t));
                    }
                    if let Some(hi) = hi {
                        push(
                            a.iter().map(|v| -v).collect(),
                            -hi - k,
                            RowKind::Ge,
                            b.hi_family,
                            Some(t),
                        );
                    }
                }
            }
            if let Some(eb) = &self.exchange_bounds {
                let (lo, hi) = eb[t];
                push(
                    unit(ie + t, 1.0),
                    lo,
                    RowKind::Ge,
                    ConstraintFamily::ExchangeBounds,
                    Some(t),
                );
                push(
                    unit(ie + t, -1.0),
                    -hi,
                    RowKind::Ge,
                    ConstraintFamily::ExchangeBounds,
                    Some(t),
                );
            }
        }

        if let Some(ses) = &self.storage {
            // b_t = c_t + sum_{u<=t} alpha^(t-u) (eta+ e_u + (eta+ - eta-) v_u)
            let mut c_t = ses.initial_charge;
            let mut coeff = vec![0.0; n];
            for t in 0..h {
                for v in coeff.iter_mut() {
                    *v *= ses.leakage;
                }
                coeff[ie + t] = ses.charge_eff;
                coeff[iv + t] = ses.charge_eff - ses.discharge_eff;
                let u = self.user_flows[t];
                c_t = ses.leakage * c_t + ses.charge_eff * u.charge - ses.discharge_eff * u.discharge;
                if t + 1 == h {
                    push(
                        coeff.clone(),
                        ses.initial_charge - c_t,
                        RowKind::Eq,
                        ConstraintFamily::StorageBoundary,
                        Some(t),
                    );
                } else {
                    push(
                        coeff.clone(),
                        -c_t,
                        RowKind::Ge,
                        ConstraintFamily::StorageLower,
                        Some(t),
                    );
                    push(
                        coeff.iter().map(|v| -v).collect(),
                        c_t - ses.capacity,
                        RowKind::Ge,
                        ConstraintFamily::StorageUpper,
                        Some(t),
                    );
                }
            }
        }

        (QpProblem { hessian, linear, rows }, tags)
    }
}

/// Direct form of the provider's revenue: what participants pay for SES
/// energy minus what the grid exchange costs.
pub fn revenue(strategy: &LeaderStrategy, user_ses_totals: &[f64], grid_price: &[f64]) -> f64 {
    (0..strategy.steps())
        .map(|t| -strategy.price[t] * user_ses_totals[t] - grid_price[t] * strategy.exchange[t])
        .sum()
}

/// Assembles the leader problem for one round.
///
/// The payoff case at each step follows the sign of `E_A` in `response`,
/// with ties resolved by `previous_cases`. When that case leaves no feasible
/// aggregate the other one is tried; if both are empty the step is
/// reported infeasible.
#[allow(clippy::too_many_arguments)]
pub fn build_problem(
    reports: &[SurplusReport],
    tariff: &TariffParams,
    non_participant_load: &[f64],
    response: &FollowerResponse,
    previous_cases: Option<&[PayoffCase]>,
    ses: &SesParams,
    p_min: f64,
) -> Result<LeaderProblem> {
    let h = tariff.steps();
    if !(p_min > 0.0) {
        return Err(Error::InvalidParameter {
            field: "p_min".into(),
            reason: format!("must be positive, got {p_min}"),
        });
    }
    for (field, len) in [
        ("non_participant_load", non_participant_load.len()),
        ("response.aggregate", response.aggregate.len()),
        ("response.user_flows", response.user_flows.len()),
    ] {
        if len != h {
            return Err(Error::InvalidParameter {
                field: field.into(),
                reason: format!("expected {h} entries, got {len}"),
            });
        }
    }
    if let Some(r) = reports.iter().find(|r| r.declared.len() != h) {
        return Err(Error::InvalidParameter {
            field: format!("declared surplus of `{}`", r.id),
            reason: format!("expected {h} entries, got {}", r.declared.len()),
        });
    }

    let mut declared_total = Vec::with_capacity(h);
    let mut step_type = Vec::with_capacity(h);
    let mut payoff_case = Vec::with_capacity(h);
    let mut bounds = Vec::with_capacity(h);
    for t in 0..h {
        let declared: Vec<f64> = reports.iter().map(|r| r.declared[t]).collect();
        let total: f64 = declared.iter().sum();
        let kind = StepType::classify(&declared);
        let en = non_participant_load[t];
        let prev = previous_cases.map(|c| c[t]);
        let mut case = PayoffCase::from_load(response.aggregate[t] + en, prev);
        let mut b = AggregateBounds::intersect(kind, total, case, en);
        if b.is_empty() {
            case = case.flipped();
            b = AggregateBounds::intersect(kind, total, case, en);
            if b.is_empty() {
                return Err(Error::LeaderInfeasible {
                    family: ConstraintFamily::PayoffCondition,
                    step: Some(t),
                });
            }
        }
        declared_total.push(total);
        step_type.push(kind);
        payoff_case.push(case);
        bounds.push(b);
    }

    Ok(LeaderProblem {
        phi: tariff.phi.clone(),
        delta: tariff.delta.clone(),
        non_participant_load: non_participant_load.to_vec(),
        declared_total,
        step_type,
        payoff_case,
        bounds,
        user_flows: response.user_flows.clone(),
        storage: Some(*ses),
        exchange_bounds: ses.exchange_limit.map(|l| vec![(-l, l); h]),
        p_min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Acceptance threshold on the scaled KKT residual.
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Curvature on the discharge split; keeps the QP strictly convex.
    pub regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 100_000,
            regularization: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderSolution {
    pub strategy: LeaderStrategy,
    /// Relaxed exchange split as solved, before netting.
    pub relaxed: Vec<FlowSplit>,
    pub revenue: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Constraints holding with equality at the solution.
    pub active: Vec<RowTag>,
}

/// Scaled KKT residual of `x` with multipliers `u`: stationarity, primal
/// feasibility, dual sign and complementary slackness.
fn kkt_residual(qp: &QpProblem, x: &[f64], u: &[f64]) -> f64 {
    let scale = 1.0 + qp.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = qp.stationarity_residual(x, u) / scale;
    r = r.max(qp.max_violation(x));
    for (row, &ui) in qp.rows.iter().zip(u) {
        if row.kind == RowKind::Ge {
            r = r.max(-ui / scale);
            r = r.max((ui * row.slack(x)).abs() / scale);
        }
    }
    r
}

pub fn solve_leader(problem: &LeaderProblem, config: &SolverConfig) -> Result<LeaderSolution> {
    let h = problem.steps();
    let (qp_reg, tags) = problem.to_qp(config.regularization);
    let opts = QpOptions {
        max_iter: config.max_iter,
        ..QpOptions::default()
    };
    let sol = qp::solve(&qp_reg, &opts).map_err(|e| match e {
        QpError::Infeasible { row } => Error::LeaderInfeasible {
            family: tags[row].family,
            step: tags[row].step,
        },
        QpError::MaxIterations { iterations, x } => Error::SolverMaxIterations {
            iterations,
            residual: qp_reg.max_violation(&x),
            best_iterate: x,
        },
        QpError::NotPositiveDefinite => Error::InvalidParameter {
            field: "phi".into(),
            reason: "leader objective is not strictly concave".into(),
        },
    })?;

    // Drop the regularization on the active set found above.
    let mut qp_exact = qp_reg.clone();
    for t in 0..h {
        qp_exact.hessian[(2 * h + t) * 3 * h + 2 * h + t] = 0.0;
    }
    let mut x = sol.x.clone();
    let mut u = sol.multipliers.clone();
    let mut residual = kkt_residual(&qp_exact, &x, &u);
    if let Some((px, pu)) = qp::polish(&qp_exact, &sol.active) {
        let r = kkt_residual(&qp_exact, &px, &pu);
        if r < residual {
            x = px;
            u = pu;
            residual = r;
        }
    }
    if residual > config.kkt_tol {
        return Err(Error::SolverInaccurate {
            residual,
            tolerance: config.kkt_tol,
        });
    }

    let strategy = LeaderStrategy {
        price: x[..h].to_vec(),
        exchange: x[h..2 * h].to_vec(),
    };
    let relaxed = (0..h)
        .map(|t| {
            let v = x[2 * h + t].max(0.0);
            FlowSplit {
                charge: (x[h + t] + v).max(0.0),
                discharge: v,
            }
        })
        .collect();
    let active = sol
        .active
        .iter()
        .filter(|&&i| u[i] != 0.0 || qp_exact.rows[i].kind == RowKind::Eq)
        .map(|&i| tags[i])
        .collect();
    Ok(LeaderSolution {
        revenue: problem.objective(&strategy),
        strategy,
        relaxed,
        kkt_residual: residual,
        iterations: sol.iterations,
        active,
    })
}

/// Nets each step's relaxed exchange to a single signed flow, recomputes
/// the storage trajectory with the given user flows and validates it.
pub fn split_and_repair(
    relaxed: &[FlowSplit],
    ses: &SesParams,
    user_flows: &[FlowSplit],
) -> Result<(Vec<FlowSplit>, SesState)> {
    let netted: Vec<FlowSplit> = relaxed.iter().map(|f| FlowSplit::from_net(f.net())).collect();
    let state = SesState::simulate(*ses, &netted, user_flows);
    let report = validate_trajectory(&state, BOUNDARY_TOL);
    if !report.passed() {
        let v = &report.violations[0];
        return Err(Error::ComplementarityRepair {
            detail: format!(
                "{} violation(s); first at step {} ({:?}, {:.3e} kWh)",
                report.violations.len(),
                v.step,
                v.kind,
                v.magnitude
            ),
        });
    }
    Ok((netted, state))
}
