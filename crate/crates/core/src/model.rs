//! Time grid, user profiles and shared-storage physics.
//!
//! Step indices are 0-based throughout the crate: index `t` covers the
//! interval that the usual 1-based notation calls step `t + 1`. The storage
//! charge before the first step, `b(0)`, is kept in [`SesParams`] and is not
//! part of the trajectory vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance (kWh) for the end-of-horizon boundary condition.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub step_hours: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, step_hours: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter {
                field: "steps".into(),
                reason: "horizon needs at least one step".into(),
            });
        }
        if !(step_hours > 0.0) {
            return Err(Error::InvalidParameter {
                field: "step_hours".into(),
                reason: format!("must be positive, got {step_hours}"),
            });
        }
        Ok(Self { steps, step_hours })
    }

    /// Hour of day at the start of step `t`.
    pub fn start_hour(&self, t: usize) -> f64 {
        (t as f64 * self.step_hours) % 24.0
    }

    pub fn check_len(&self, field: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.steps {
            return Err(Error::Scenario(format!(
                "`{field}` has length {} but the horizon has {} steps",
                v.len(),
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
    pub participating: bool,
}

impl UserProfile {
    pub fn new(id: impl Into<String>, demand: Vec<f64>, generation: Vec<f64>, participating: bool) -> Result<Self> {
        let id = id.into();
        if demand.len() != generation.len() {
            return Err(Error::Scenario(format!(
                "user `{id}`: demand has {} samples, generation has {}",
                demand.len(),
                generation.len()
            )));
        }
        for (field, v) in [("demand", &demand), ("generation", &generation)] {
            if let Some((t, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0) || !x.is_finite()) {
                return Err(Error::Scenario(format!(
                    "user `{id}`: {field}[{t}] = {x} must be finite and non-negative"
                )));
            }
        }
        Ok(Self {
            id,
            demand,
            generation,
            participating,
        })
    }

    pub fn steps(&self) -> usize {
        self.demand.len()
    }

    /// Generation minus demand at step `t`.
    pub fn surplus(&self, t: usize) -> Result<f64> {
        if t >= self.steps() {
            return Err(Error::Index {
                index: t,
                steps: self.steps(),
            });
        }
        Ok(self.generation[t] - self.demand[t])
    }

    pub fn surplus_profile(&self) -> Vec<f64> {
        self.generation.iter().zip(&self.demand).map(|(g, d)| g - d).collect()
    }

    /// Net grid load `d - g` of a user trading only with the grid.
    pub fn net_load(&self) -> Vec<f64> {
        self.demand.iter().zip(&self.generation).map(|(d, g)| d - g).collect()
    }
}

/// Surplus a participating user declares to the retailer. No sign
/// constraint: any value may be declared at any step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurplusReport {
    pub id: String,
    pub declared: Vec<f64>,
}

impl SurplusReport {
    pub fn truthful(profile: &UserProfile) -> Self {
        Self {
            id: profile.id.clone(),
            declared: profile.surplus_profile(),
        }
    }
}

/// Grid trade of a user given its SES trade `x` and surplus `s`: `e = x - s`.
pub fn grid_trade_from_ses_trade(x: f64, s: f64) -> f64 {
    x - s
}

/// Inverse of [`grid_trade_from_ses_trade`].
pub fn ses_trade_from_grid_trade(e: f64, s: f64) -> f64 {
    e + s
}

/// Closed interval of feasible grid trades for a declared surplus: a surplus
/// user sells at most what it declares, a deficit user buys at most its
/// declared deficit.
pub fn user_grid_bounds(declared: f64) -> (f64, f64) {
    if declared > 0.0 {
        (-declared, 0.0)
    } else if declared < 0.0 {
        (0.0, -declared)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SesParams {
    pub capacity: f64,
    pub leakage: f64,
    pub charge_eff: f64,
    pub discharge_eff: f64,
    pub initial_charge: f64,
    /// Largest energy the SES may buy from or sell to the grid per step,
    /// kWh. Unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange_limit: Option<f64>,
}

impl SesParams {
    pub fn new(capacity: f64, leakage: f64, charge_eff: f64, discharge_eff: f64, initial_charge: f64) -> Result<Self> {
        let p = Self {
            capacity,
            leakage,
            charge_eff,
            discharge_eff,
            initial_charge,
            exchange_limit: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidParameter {
                field: field.into(),
                reason,
            })
        };
        if !(self.capacity > 0.0) || !self.capacity.is_finite() {
            return bad("capacity", format!("must be positive, got {}", self.capacity));
        }
        if !(self.leakage > 0.0 && self.leakage <= 1.0) {
            return bad("leakage", format!("must lie in (0, 1], got {}", self.leakage));
        }
        if !(self.charge_eff > 0.0 && self.charge_eff <= 1.0) {
            return bad("charge_eff", format!("must lie in (0, 1], got {}", self.charge_eff));
        }
        if !(self.discharge_eff >= 1.0) || !self.discharge_eff.is_finite() {
            return bad(
                "discharge_eff",
                format!("must be at least 1, got {}", self.discharge_eff),
            );
        }
        if !(self.initial_charge >= 0.0 && self.initial_charge <= self.capacity) {
            return bad(
                "initial_charge",
                format!("must lie in [0, {}], got {}", self.capacity, self.initial_charge),
            );
        }
        if let Some(l) = self.exchange_limit {
            if !(l >= 0.0) || !l.is_finite() {
                return bad("exchange_limit", format!("must be finite and non-negative, got {l}"));
            }
        }
        Ok(())
    }
}

/// Charge/discharge decomposition of a signed flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowSplit {
    pub charge: f64,
    pub discharge: f64,
}

impl FlowSplit {
    /// Canonical split of a signed net flow into positive and negative parts.
    pub fn from_net(net: f64) -> Self {
        if net >= 0.0 {
            Self {
                charge: net,
                discharge: 0.0,
            }
        } else {
            Self {
                charge: 0.0,
                discharge: -net,
            }
        }
    }

    pub fn net(&self) -> f64 {
        self.charge - self.discharge
    }

    pub fn is_complementary(&self) -> bool {
        self.charge * self.discharge == 0.0
    }
}

impl std::ops::Add for FlowSplit {
    type Output = FlowSplit;

    fn add(self, rhs: FlowSplit) -> FlowSplit {
        FlowSplit {
            charge: self.charge + rhs.charge,
            discharge: self.discharge + rhs.discharge,
        }
    }
}

/// Aggregate of per-user SES flows at one step. Users are split
/// individually, so the aggregate may carry both charge and discharge.
pub fn aggregate_user_flows(ses_trades: impl IntoIterator<Item = f64>) -> FlowSplit {
    ses_trades
        .into_iter()
        .map(FlowSplit::from_net)
        .fold(FlowSplit::default(), |acc, f| acc + f)
}

/// Storage charge at the end of a step.
pub fn step_charge(prev: f64, ses_flow: FlowSplit, user_flows: FlowSplit, params: &SesParams) -> f64 {
    params.leakage * prev + params.charge_eff * (ses_flow.charge + user_flows.charge)
        - params.discharge_eff * (ses_flow.discharge + user_flows.discharge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesState {
    pub params: SesParams,
    /// `charge[t]` is the level at the end of step `t`.
    pub charge: Vec<f64>,
}

impl SesState {
    pub fn simulate(params: SesParams, ses_flows: &[FlowSplit], user_flows: &[FlowSplit]) -> Self {
        let mut b = params.initial_charge;
        let charge = ses_flows
            .iter()
            .zip(user_flows)
            .map(|(s, u)| {
                b = step_charge(b, *s, *u, &params);
                b
            })
            .collect();
        Self { params, charge }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    BelowZero,
    AboveCapacity,
    Boundary,
    NonPositiveLoad,
    AboveLoadCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Outcome of a data check; failures are listed, never raised.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.violations.iter().map(|v| v.step).collect();
        s.dedup();
        s
    }
}

/// Checks `0 <= b(t) <= Q_M` for every step and `|b(H) - b(0)| <= tol`.
///
/// The capacity bounds are checked with the same tolerance so that a
/// trajectory sitting exactly on a bound is not rejected for rounding.
pub fn validate_trajectory(state: &SesState, tol: f64) -> ValidationReport {
    let q = state.params.capacity;
    let mut violations = Vec::new();
    for (t, &b) in state.charge.iter().enumerate() {
        if b < -tol {
            violations.push(Violation {
                step: t,
                kind: ViolationKind::BelowZero,
                magnitude: -b,
            });
        } else if b > q + tol {
            violations.push(Violation {
                step: t,
                kind: ViolationKind::AboveCapacity,
                magnitude: b - q,
            });
        }
    }
    if let Some(&last) = state.charge.last() {
        let gap = last - state.params.initial_charge;
        if gap.abs() > tol {
            violations.push(Violation {
                step: state.charge.len() - 1,
                kind: ViolationKind::Boundary,
                magnitude: gap,
            });
        }
    }
    ValidationReport { violations }
}
