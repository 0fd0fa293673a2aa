//! Scenario construction, file I/O and forecast noise.
//!
//! A scenario file is one JSON document:
//!
//! ```json
//! {
//!   "horizon": { "steps": 48, "step_hours": 0.5 },
//!   "ses": { "capacity": 80.0, "leakage": 0.9978, "charge_eff": 0.9,
//!            "discharge_eff": 1.1, "initial_charge": 20.0 },
//!   "tariff": { "phi": [...], "delta": [...], "e_max": 500.0 },
//!   "seed": 7,
//!   "users": [
//!     { "id": "p01", "participating": true,
//!       "demand_kwh": [...], "generation_kwh": [...] },
//!     { "id": "n01", "participating": false, "profile_csv": "n01.csv" }
//!   ]
//! }
//! ```
//!
//! A user gives either inline profiles or a CSV path (relative to the
//! scenario file) with columns `step,demand_kwh,generation_kwh`. A
//! participating user may add `declared_surplus_kwh` to report something
//! other than its true surplus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SesParams, SurplusReport, TimeGrid, UserProfile};
use crate::pricing::{calibrate_tou, TariffParams, TouTargets};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: TimeGrid,
    pub users: Vec<UserProfile>,
    pub ses: SesParams,
    pub tariff: TariffParams,
    /// Declared surplus for participants that do not report truthfully.
    pub declared: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
}

impl Scenario {
    pub fn new(
        grid: TimeGrid,
        users: Vec<UserProfile>,
        ses: SesParams,
        tariff: TariffParams,
        seed: u64,
    ) -> Result<Self> {
        let s = Self {
            grid,
            users,
            ses,
            tariff,
            declared: BTreeMap::new(),
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.ses.validate()?;
        self.tariff.validate()?;
        if self.tariff.steps() != self.grid.steps {
            return Err(Error::Scenario(format!(
                "tariff covers {} steps but the horizon has {}",
                self.tariff.steps(),
                self.grid.steps
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &self.users {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Scenario(format!("duplicate user id `{}`", u.id)));
            }
            self.grid.check_len(&format!("users[{}].demand_kwh", u.id), &u.demand)?;
            self.grid
                .check_len(&format!("users[{}].generation_kwh", u.id), &u.generation)?;
        }
        if !self.users.iter().any(|u| u.participating) {
            return Err(Error::Scenario("scenario needs at least one participating user".into()));
        }
        for (id, d) in &self.declared {
            match self.users.iter().find(|u| &u.id == id) {
                Some(u) if u.participating => {}
                Some(_) => {
                    return Err(Error::Scenario(format!(
                        "user `{id}` declares a surplus but does not participate"
                    )))
                }
                None => return Err(Error::Scenario(format!("declared surplus for unknown user `{id}`"))),
            }
            self.grid.check_len(&format!("users[{id}].declared_surplus_kwh"), d)?;
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Scenario(format!("user `{id}`: declared surplus must be finite")));
            }
        }
        Ok(())
    }

    pub fn participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| u.participating)
    }

    pub fn non_participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| !u.participating)
    }

    /// `E_N(t)`: net load of the non-participating users.
    pub fn non_participant_load(&self) -> Vec<f64> {
        let mut load = vec![0.0; self.grid.steps];
        for u in self.non_participants() {
            for (l, (d, g)) in load.iter_mut().zip(u.demand.iter().zip(&u.generation)) {
                *l += d - g;
            }
        }
        load
    }

    /// What each participant reports, in participant order.
    pub fn reports(&self) -> Vec<SurplusReport> {
        self.participants()
            .map(|u| match self.declared.get(&u.id) {
                Some(d) => SurplusReport {
                    id: u.id.clone(),
                    declared: d.clone(),
                },
                None => SurplusReport::truthful(u),
            })
            .collect()
    }

    /// Declared surpluses at step `t`, in participant order.
    pub fn declared_at(reports: &[SurplusReport], t: usize) -> Vec<f64> {
        reports.iter().map(|r| r.declared[t]).collect()
    }
}

/// Storage defaults: 80 kWh, 10% daily leakage over a 48-step day, 0.9
/// charge and 1.1 discharge factors, starting at a quarter of capacity.
pub fn default_ses(steps: usize) -> SesParams {
    let capacity = 80.0;
    SesParams {
        capacity,
        leakage: 0.9f64.powf(1.0 / steps as f64),
        charge_eff: 0.9,
        discharge_eff: 1.1,
        initial_charge: 0.25 * capacity,
        exchange_limit: None,
    }
}

/// Daily energy of the synthetic per-household base profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseProfileParams {
    pub daily_demand_kwh: f64,
    pub daily_pv_kwh: f64,
}

impl Default for BaseProfileParams {
    fn default() -> Self {
        Self {
            daily_demand_kwh: 9.6,
            daily_pv_kwh: 1.44,
        }
    }
}

/// Synthetic per-household base profiles in kWh per step: a demand curve
/// with a morning bump and a pronounced evening peak, and a midday PV bell,
/// each scaled to its daily energy. At the default ratio PV stays just
/// below base demand, so aggregate load is positive at any participation.
pub fn base_profiles(grid: &TimeGrid, params: &BaseProfileParams) -> Result<(Vec<f64>, Vec<f64>)> {
    for (field, v) in [
        ("daily_demand_kwh", params.daily_demand_kwh),
        ("daily_pv_kwh", params.daily_pv_kwh),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter {
                field: field.into(),
                reason: format!("must be finite and non-negative, got {v}"),
            });
        }
    }
    let bump = |h: f64, centre: f64, width: f64| (-((h - centre) / width).powi(2)).exp();
    let hours: Vec<f64> = (0..grid.steps)
        .map(|t| grid.start_hour(t) + 0.5 * grid.step_hours)
        .collect();
    let shape_d: Vec<f64> = hours
        .iter()
        .map(|&h| 0.18 + 0.25 * bump(h, 7.5, 1.2) + 0.12 * bump(h, 13.0, 3.0) + 0.70 * bump(h, 19.0, 2.0))
        .collect();
    let shape_pv: Vec<f64> = hours.iter().map(|&h| bump(h, 12.5, 2.5)).collect();
    let scaled = |shape: Vec<f64>, total: f64| {
        let sum: f64 = shape.iter().sum();
        shape.into_iter().map(|v| v * total / sum).collect::<Vec<f64>>()
    };
    Ok((
        scaled(shape_d, params.daily_demand_kwh),
        scaled(shape_pv, params.daily_pv_kwh),
    ))
}

const DOWN_FACTORS: [f64; 5] = [0.84, 0.86, 0.88, 0.90, 0.92];
const UP_FACTORS: [f64; 5] = [1.08, 1.10, 1.12, 1.14, 1.16];

/// Builds the case-study population: half the participants have demand
/// scaled down, half scaled up (factor lists repeat beyond ten users), all
/// share the base PV profile; non-participants have base demand and no PV.
///
/// The tariff is calibrated to `targets` on the load of all households with
/// no PV, so it does not depend on the participating fraction.
pub fn generate_case_study(
    n_total: usize,
    participating_fraction: f64,
    base_demand: &[f64],
    base_pv: &[f64],
    targets: &TouTargets,
    seed: u64,
) -> Result<Scenario> {
    if !(0.0..=1.0).contains(&participating_fraction) {
        return Err(Error::InvalidParameter {
            field: "fraction".into(),
            reason: format!("must lie in [0, 1], got {participating_fraction}"),
        });
    }
    if base_demand.len() != base_pv.len() {
        return Err(Error::Scenario(format!(
            "base demand has {} steps but base PV has {}",
            base_demand.len(),
            base_pv.len()
        )));
    }
    let n_part = (n_total as f64 * participating_fraction).round() as usize;
    if n_part == 0 || n_part % 2 == 1 {
        return Err(Error::InvalidParameter {
            field: "fraction".into(),
            reason: format!(
                "{participating_fraction} of {n_total} users gives {n_part} participants; an even, non-zero count is needed"
            ),
        });
    }
    let steps = base_demand.len();
    let grid = TimeGrid::new(steps, 24.0 / steps as f64)?;
    let half = n_part / 2;
    let mut users = Vec::with_capacity(n_total);
    for i in 0..n_part {
        let factor = if i < half {
            DOWN_FACTORS[i % DOWN_FACTORS.len()]
        } else {
            UP_FACTORS[(i - half) % UP_FACTORS.len()]
        };
        users.push(UserProfile::new(
            format!("p{:02}", i + 1),
            base_demand.iter().map(|d| d * factor).collect(),
            base_pv.to_vec(),
            true,
        )?);
    }
    for i in 0..n_total - n_part {
        users.push(UserProfile::new(
            format!("n{:02}", i + 1),
            base_demand.to_vec(),
            vec![0.0; steps],
            false,
        )?);
    }
    let reference: Vec<f64> = base_demand.iter().map(|d| d * n_total as f64).collect();
    let peak = reference.iter().cloned().fold(0.0, f64::max);
    let tariff = calibrate_tou(&grid, &reference, targets, 4.0 * peak)?;
    Scenario::new(grid, users, default_ses(steps), tariff, seed)
}

/// The reference synthetic scenario over a 48-step day with default base
/// profiles and tariff targets.
pub fn reference_scenario(n_total: usize, participating_fraction: f64, seed: u64) -> Result<Scenario> {
    reference_scenario_with(n_total, participating_fraction, seed, &TouTargets::default())
}

/// [`reference_scenario`] with the tariff calibrated to other targets.
pub fn reference_scenario_with(
    n_total: usize,
    participating_fraction: f64,
    seed: u64,
    targets: &TouTargets,
) -> Result<Scenario> {
    let grid = TimeGrid::new(48, 0.5)?;
    let (demand, pv) = base_profiles(&grid, &BaseProfileParams::default())?;
    generate_case_study(n_total, participating_fraction, &demand, &pv, targets, seed)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    horizon: TimeGrid,
    ses: SesParams,
    tariff: TariffParams,
    #[serde(default)]
    seed: u64,
    users: Vec<UserEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserEntry {
    id: String,
    participating: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demand_kwh: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generation_kwh: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    declared_surplus_kwh: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    step: usize,
    demand_kwh: f64,
    generation_kwh: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_profile_csv(path: &Path, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => parse_err(format!("{other:?}")),
    })?;
    let mut demand = Vec::with_capacity(steps);
    let mut generation = Vec::with_capacity(steps);
    for (i, row) in reader.deserialize::<ProfileRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(format!("line {line}: {e}")))?;
        if row.step != i {
            return Err(parse_err(format!("line {line}: expected step {i}, found {}", row.step)));
        }
        if !(row.demand_kwh >= 0.0) || !(row.generation_kwh >= 0.0) {
            return Err(parse_err(format!(
                "line {line}: demand and generation must be non-negative"
            )));
        }
        demand.push(row.demand_kwh);
        generation.push(row.generation_kwh);
    }
    if demand.len() != steps {
        return Err(parse_err(format!("{} rows, expected {steps}", demand.len())));
    }
    Ok((demand, generation))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let grid = TimeGrid::new(file.horizon.steps, file.horizon.step_hours)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut users = Vec::with_capacity(file.users.len());
    let mut declared = BTreeMap::new();
    for (i, u) in file.users.into_iter().enumerate() {
        let (demand, generation) = match (u.demand_kwh, u.generation_kwh, &u.profile_csv) {
            (Some(d), Some(g), None) => (d, g),
            (None, None, Some(csv)) => read_profile_csv(&base.join(csv), grid.steps)?,
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!(
                        "users[{i}] (`{}`): give either demand_kwh and generation_kwh, or profile_csv",
                        u.id
                    ),
                })
            }
        };
        for (field, v) in [("demand_kwh", &demand), ("generation_kwh", &generation)] {
            if v.len() != grid.steps {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!("users[{i}].{field} has {} entries, expected {}", v.len(), grid.steps),
                });
            }
        }
        if let Some(d) = u.declared_surplus_kwh {
            declared.insert(u.id.clone(), d);
        }
        users.push(UserProfile::new(u.id, demand, generation, u.participating)?);
    }
    let scenario = Scenario {
        grid,
        users,
        ses: file.ses,
        tariff: file.tariff,
        declared,
        seed: file.seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Writes the scenario as a single JSON document with inline profiles.
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ScenarioFile {
        horizon: scenario.grid,
        ses: scenario.ses,
        tariff: scenario.tariff.clone(),
        seed: scenario.seed,
        users: scenario
            .users
            .iter()
            .map(|u| UserEntry {
                id: u.id.clone(),
                participating: u.participating,
                demand_kwh: Some(u.demand.clone()),
                generation_kwh: Some(u.generation.clone()),
                profile_csv: None,
                declared_surplus_kwh: scenario.declared.get(&u.id).cloned(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Target mean absolute percentage error of the perturbed samples.
    pub mape: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Standard deviation of the relative error. For a zero-mean Gaussian
    /// the mean absolute value is `sigma * sqrt(2/pi)`, so this choice makes
    /// the expected absolute relative error equal the target.
    pub fn sigma(&self) -> f64 {
        self.mape / 100.0 * (std::f64::consts::PI / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseReport {
    pub samples: usize,
    /// Samples pushed below zero by the noise and clamped back.
    pub clamped: usize,
}

/// Multiplies every demand and generation sample by `1 + eps`, with
/// independent Gaussian `eps`, clamping negative results to zero. Draws are
/// made in a fixed order so that two specs with the same seed share their
/// standard-normal draws.
pub fn apply_forecast_noise(scenario: &Scenario, spec: &NoiseSpec) -> Result<(Scenario, NoiseReport)> {
    if !(0.0..=100.0).contains(&spec.mape) {
        return Err(Error::InvalidParameter {
            field: "mape".into(),
            reason: format!("must lie in [0, 100], got {}", spec.mape),
        });
    }
    let mut out = scenario.clone();
    let mut report = NoiseReport::default();
    if spec.mape == 0.0 {
        return Ok((out, report));
    }
    let sigma = spec.sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for u in &mut out.users {
        for v in u.demand.iter_mut().chain(u.generation.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = *v * (1.0 + sigma * z);
            report.samples += 1;
            if x < 0.0 {
                report.clamped += 1;
                *v = 0.0;
            } else {
                *v = x;
            }
        }
    }
    Ok((out, report))
}
