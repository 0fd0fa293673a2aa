//! Quadratic grid cost and the linear grid price derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TimeGrid, ValidationReport, Violation, ViolationKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffParams {
    /// Quadratic coefficient per step, cents/kWh².
    pub phi: Vec<f64>,
    /// Linear coefficient per step, cents/kWh.
    pub delta: Vec<f64>,
    /// Largest grid load the network supports, kWh per step.
    pub e_max: f64,
}

impl TariffParams {
    pub fn new(phi: Vec<f64>, delta: Vec<f64>, e_max: f64) -> Result<Self> {
        let t = Self { phi, delta, e_max };
        t.validate()?;
        Ok(t)
    }

    pub fn constant(steps: usize, phi: f64, delta: f64, e_max: f64) -> Result<Self> {
        Self::new(vec![phi; steps], vec![delta; steps], e_max)
    }

    pub fn steps(&self) -> usize {
        self.phi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.delta.len() {
            return Err(Error::Scenario(format!(
                "tariff `phi` has {} entries but `delta` has {}",
                self.phi.len(),
                self.delta.len()
            )));
        }
        if let Some((t, v)) = self
            .phi
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                field: format!("phi[{t}]"),
                reason: format!("must be positive, got {v}"),
            });
        }
        if let Some((t, v)) = self
            .delta
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                field: format!("delta[{t}]"),
                reason: format!("must be non-negative, got {v}"),
            });
        }
        if !(self.e_max > 0.0) {
            return Err(Error::InvalidParameter {
                field: "e_max".into(),
                reason: format!("must be positive, got {}", self.e_max),
            });
        }
        Ok(())
    }

    /// Retailer's cost of buying `load` kWh from the grid at step `t`.
    pub fn grid_cost(&self, load: f64, t: usize) -> f64 {
        self.phi[t] * load * load + self.delta[t] * load
    }

    /// Unit grid price at step `t`: [`Self::grid_cost`] divided by the load.
    pub fn grid_price(&self, load: f64, t: usize) -> f64 {
        self.phi[t] * load + self.delta[t]
    }

    /// Checks `0 < E(t) < E_max` at every step.
    pub fn validate_total_load(&self, load: &[f64]) -> ValidationReport {
        let mut violations = Vec::new();
        for (t, &e) in load.iter().enumerate() {
            if !(e > 0.0) {
                violations.push(Violation {
                    step: t,
                    kind: ViolationKind::NonPositiveLoad,
                    magnitude: e,
                });
            } else if !(e < self.e_max) {
                violations.push(Violation {
                    step: t,
                    kind: ViolationKind::AboveLoadCap,
                    magnitude: e - self.e_max,
                });
            }
        }
        ValidationReport { violations }
    }
}

/// Two-level time-of-use calibration targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouTargets {
    /// Lowest and highest unit grid price the calibrated tariff should
    /// produce on the reference load, cents/kWh.
    pub price_low: f64,
    pub price_high: f64,
    /// Average unit grid price over the horizon, cents/kWh.
    pub price_avg: f64,
    /// `phi_peak / phi_offpeak`.
    pub peak_ratio: f64,
    /// Peak window as hours of day, start inclusive, end exclusive.
    pub peak_start_hour: f64,
    pub peak_end_hour: f64,
}

impl Default for TouTargets {
    fn default() -> Self {
        Self {
            price_low: 10.0,
            price_high: 55.0,
            price_avg: 25.0,
            peak_ratio: 1.5,
            peak_start_hour: 16.0,
            peak_end_hour: 23.0,
        }
    }
}

impl TouTargets {
    pub fn is_peak(&self, grid: &TimeGrid, t: usize) -> bool {
        let h = grid.start_hour(t);
        h >= self.peak_start_hour && h < self.peak_end_hour
    }
}

/// Calibrates a two-level tariff against a reference load profile.
///
/// The off-peak quadratic coefficient is chosen so that the spread of
/// `phi_t * E(t) + delta` over the horizon equals `price_high - price_low`,
/// and the constant `delta` so that its mean equals `price_avg`.
pub fn calibrate_tou(
    grid: &TimeGrid,
    reference_load: &[f64],
    targets: &TouTargets,
    e_max: f64,
) -> Result<TariffParams> {
    grid.check_len("reference_load", reference_load)?;
    if !(targets.price_high > targets.price_low) {
        return Err(Error::InvalidParameter {
            field: "price_high".into(),
            reason: "must exceed price_low".into(),
        });
    }
    if !(targets.peak_ratio > 0.0) {
        return Err(Error::InvalidParameter {
            field: "peak_ratio".into(),
            reason: "must be positive".into(),
        });
    }
    let weight: Vec<f64> = (0..grid.steps)
        .map(|t| {
            if targets.is_peak(grid, t) {
                targets.peak_ratio
            } else {
                1.0
            }
        })
        .collect();
    let scaled: Vec<f64> = weight.iter().zip(reference_load).map(|(w, e)| w * e).collect();
    let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return Err(Error::InvalidParameter {
            field: "reference_load".into(),
            reason: "flat weighted load cannot be calibrated to a price range".into(),
        });
    }
    let phi_off = (targets.price_high - targets.price_low) / (hi - lo);
    let mean_scaled = scaled.iter().sum::<f64>() / grid.steps as f64;
    let delta = targets.price_avg - phi_off * mean_scaled;
    if delta < 0.0 {
        return Err(Error::InvalidParameter {
            field: "price_avg".into(),
            reason: format!("calibration needs a negative delta ({delta:.4}); raise the average price target"),
        });
    }
    TariffParams::new(
        weight.iter().map(|w| w * phi_off).collect(),
        vec![delta; grid.steps],
        e_max,
    )
}
