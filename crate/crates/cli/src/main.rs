mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sestrade::mechanism::AuditTable;
use sestrade::metrics::{self, ledger_check, system_report, RunReport};
use sestrade::scenario::{load_scenario, reference_scenario_with};
use sestrade::stackelberg::{audit_equilibrium, certify, iterate, CertificateReport};
use sestrade::{Error, IterConfig, Scenario, TouTargets};

use output::{sha256_hex, Header, OutDir};

const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NON_CONVERGENCE: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "sestrade",
    version,
    about = "Shared-storage energy trading equilibrium solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Solve for the equilibrium, certify it and write reports.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Follower samples per step for the certificate.
        #[arg(long, default_value_t = 10_000)]
        certificate_samples: usize,
    },
    /// Evaluate the system without storage.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Audit truthful reporting at the converged strategy.
    IcAudit {
        #[command(flatten)]
        common: Common,
        /// Participant to audit; repeat for several. Defaults to all.
        #[arg(long = "user")]
        audit_users: Vec<String>,
        /// Step to audit; repeat for several. Defaults to all.
        #[arg(long = "step")]
        audit_steps: Vec<usize>,
        /// Largest cost advantage a misreport may have, cents.
        #[arg(long, default_value_t = 1e-7, allow_negative_numbers = true)]
        tolerance: f64,
    },
    /// Solve the generated case study over a range of participating fractions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
        )]
        fractions: Vec<f64>,
    },
    /// Solve on noisy forecasts and evaluate costs on the true profiles.
    NoiseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50.0)]
        mape_max: f64,
        #[arg(long, default_value_t = 5.0)]
        mape_step: f64,
        /// Noise draws averaged per MAPE level.
        #[arg(long, default_value_t = 5)]
        noise_trials: usize,
    },
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "generate")]
    scenario: Option<PathBuf>,
    /// Use the synthetic case study instead of a file.
    #[arg(long)]
    generate: bool,
    #[arg(long, default_value_t = 40)]
    users: usize,
    #[arg(long, default_value_t = 0.25)]
    fraction: f64,
    /// Lowest unit grid price the generated tariff gives on the reference
    /// load, cents/kWh.
    #[arg(long, default_value_t = 10.0)]
    price_low: f64,
    /// Highest unit grid price on the reference load, cents/kWh.
    #[arg(long, default_value_t = 55.0)]
    price_high: f64,
    /// Average unit grid price on the reference load, cents/kWh.
    #[arg(long, default_value_t = 25.0)]
    price_avg: f64,
    /// Seed of the generated scenario; overrides a loaded scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tau: f64,
    #[arg(long, default_value_t = 500)]
    max_rounds: usize,
    #[arg(long, default_value_t = 1e-8)]
    kkt_tol: f64,
    #[arg(long, default_value_t = 0.1)]
    p_min: f64,
    /// Output directory; not part of the configuration hash.
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
}

impl Common {
    fn tou_targets(&self) -> TouTargets {
        TouTargets {
            price_low: self.price_low,
            price_high: self.price_high,
            price_avg: self.price_avg,
            ..TouTargets::default()
        }
    }

    fn iter_config(&self) -> IterConfig {
        let mut c = IterConfig {
            tau: self.tau,
            max_rounds: self.max_rounds,
            p_min: self.p_min,
            ..IterConfig::default()
        };
        c.solver.kkt_tol = self.kkt_tol;
        c
    }

    /// Resolved scenario and the hash of its source file, if any.
    fn scenario(&self) -> Result<(Scenario, Option<String>), Failure> {
        match &self.scenario {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                let mut s = load_scenario(path)?;
                if let Some(seed) = self.seed {
                    s.seed = seed;
                }
                Ok((s, Some(sha256_hex(&bytes))))
            }
            None if self.generate => Ok((
                reference_scenario_with(self.users, self.fraction, self.seed.unwrap_or(1), &self.tou_targets())?,
                None,
            )),
            None => Err(Failure::usage("one of --scenario or --generate is required")),
        }
    }
}

/// Failure carried to the exit path.
struct Failure {
    code: u8,
    category: String,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            category: "usage".into(),
            message: message.into(),
        }
    }

    fn check(category: &str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECK_FAILED,
            category: category.into(),
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Index { .. }
            | Error::InvalidParameter { .. }
            | Error::Scenario(_)
            | Error::Parse { .. }
            | Error::Io { .. } => EXIT_USAGE,
            Error::NonConvergence { .. } | Error::SolverMaxIterations { .. } | Error::SolverInaccurate { .. } => {
                EXIT_NON_CONVERGENCE
            }
            Error::InfeasibleAllocation { .. }
            | Error::Mechanism { .. }
            | Error::LeaderInfeasible { .. }
            | Error::GridLoad { .. }
            | Error::ComplementarityRepair { .. } => EXIT_INFEASIBLE,
        };
        Self {
            code,
            category: e.category().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_USAGE,
            category: "io".into(),
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    cli: &'a Cli,
    scenario_sha256: Option<String>,
}

fn out_dir(cli: &Cli, common: &Common, seed: u64, scenario_sha256: Option<String>) -> Result<OutDir, Failure> {
    common.iter_config().validate()?;
    let header = Header::new(seed, &HashedConfig { cli, scenario_sha256 });
    Ok(OutDir::create(&common.out, header)?)
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    hour: f64,
    total_load: f64,
    grid_price: f64,
    ses_price: Option<f64>,
    exchange: f64,
    non_participant_load: f64,
    storage: Option<f64>,
    social_cost: f64,
}

fn step_rows(report: &RunReport, scenario: &Scenario, storage: Option<&[f64]>) -> Vec<StepRow> {
    let en = scenario.non_participant_load();
    (0..report.total_load.len())
        .map(|t| StepRow {
            step: t,
            hour: scenario.grid.start_hour(t),
            total_load: report.total_load[t],
            grid_price: report.grid_price[t],
            ses_price: report.ses_price.as_ref().map(|p| p[t]),
            exchange: report.exchange[t],
            non_participant_load: en[t],
            storage: storage.map(|b| b[t]),
            social_cost: report.social_cost[t],
        })
        .collect()
}

fn solve(cli: &Cli, common: &Common, certificate_samples: usize) -> Result<(), Failure> {
    let (scenario, hash) = common.scenario()?;
    let out = out_dir(cli, common, scenario.seed, hash)?;
    let eq = iterate(&scenario, &common.iter_config(), None)?;
    let report = system_report(&eq, &scenario)?;
    let ledger = ledger_check(&eq, &scenario, 1e-9);

    #[derive(Serialize)]
    struct Summary<'a> {
        rounds: usize,
        par: f64,
        social_cost_total: f64,
        community_cost: f64,
        retailer_payoff: f64,
        groups: metrics::GroupCosts,
        ledger: &'a metrics::LedgerCheck,
        user_costs: &'a [metrics::UserCost],
    }
    #[derive(Serialize)]
    struct EquilibriumDoc<'a> {
        summary: Summary<'a>,
        equilibrium: &'a sestrade::EquilibriumResult,
    }
    out.json(
        "equilibrium.json",
        &EquilibriumDoc {
            summary: Summary {
                rounds: eq.rounds,
                par: report.par,
                social_cost_total: report.social_cost_total,
                community_cost: report.community_cost,
                retailer_payoff: report.retailer_payoff,
                groups: report.groups,
                ledger: &ledger,
                user_costs: &report.user_costs,
            },
            equilibrium: &eq,
        },
    )?;
    out.csv("report.csv", &step_rows(&report, &scenario, Some(&eq.storage.charge)))?;

    #[derive(Serialize)]
    struct RoundRow {
        round: usize,
        relative_change: f64,
    }
    let rounds: Vec<RoundRow> = eq
        .history
        .iter()
        .enumerate()
        .map(|(i, &c)| RoundRow {
            round: i + 1,
            relative_change: c,
        })
        .collect();
    out.csv("convergence.csv", &rounds)?;

    let cert: CertificateReport = certify(&eq, &scenario, certificate_samples, scenario.seed);
    out.json("certificate.json", &cert)?;
    println!(
        "converged in {} rounds, PAR {:.4}, social cost {:.2} cents, certificate {}",
        eq.rounds,
        report.par,
        report.social_cost_total,
        if cert.passed { "passed" } else { "FAILED" }
    );
    if !cert.passed {
        return Err(Failure::check(
            "certificate",
            format!(
                "follower margin {:e}, leader improvement {:e}",
                cert.follower.worst_margin, cert.leader.max_improvement
            ),
        ));
    }
    if !ledger.passed {
        return Err(Failure::check(
            "ledger",
            format!(
                "money residual {:e}, energy residual {:e}",
                ledger.max_money_residual, ledger.max_energy_residual
            ),
        ));
    }
    Ok(())
}

fn baseline(cli: &Cli, common: &Common) -> Result<(), Failure> {
    let (scenario, hash) = common.scenario()?;
    let out = out_dir(cli, common, scenario.seed, hash)?;
    let report = metrics::baseline_run(&scenario)?;
    out.json("baseline.json", &report)?;
    out.csv("baseline_report.csv", &step_rows(&report, &scenario, None))?;
    println!(
        "baseline PAR {:.4}, social cost {:.2} cents",
        report.par, report.social_cost_total
    );
    Ok(())
}

#[derive(Serialize)]
struct AuditCsvRow<'a> {
    user: &'a str,
    step: usize,
    true_surplus: f64,
    declared: f64,
    truthful: bool,
    cost: Option<f64>,
    payment: Option<f64>,
    grid_trade: Option<f64>,
    physically_infeasible: bool,
    pivot_exact: bool,
    violation: f64,
    passed: bool,
}

fn audit_rows(tables: &[AuditTable]) -> Vec<AuditCsvRow<'_>> {
    tables
        .iter()
        .flat_map(|t| {
            t.rows.iter().map(move |r| AuditCsvRow {
                user: &t.user,
                step: t.step,
                true_surplus: t.true_surplus,
                declared: r.declared,
                truthful: r.truthful,
                cost: r.cost,
                payment: r.payment,
                grid_trade: r.grid_trade,
                physically_infeasible: r.physically_infeasible,
                pivot_exact: t.pivot_exact,
                violation: t.violation,
                passed: t.passed,
            })
        })
        .collect()
}

fn ic_audit(cli: &Cli, common: &Common, users: &[String], steps: &[usize], tolerance: f64) -> Result<(), Failure> {
    let (scenario, hash) = common.scenario()?;
    let out = out_dir(cli, common, scenario.seed, hash)?;
    let eq = iterate(&scenario, &common.iter_config(), None)?;
    let tables = audit_equilibrium(
        &eq,
        &scenario,
        (!users.is_empty()).then_some(users),
        (!steps.is_empty()).then_some(steps),
        tolerance,
    )?;
    out.csv("audit.csv", &audit_rows(&tables))?;
    let failed = tables.iter().filter(|t| !t.passed).count();
    let worst = tables.iter().map(|t| t.violation).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "audited {} user-steps, {failed} violations, worst {worst:e}",
        tables.len()
    );
    if failed > 0 {
        return Err(Failure::check(
            "audit",
            format!("{failed} user-steps exceed tolerance {tolerance:e}; worst violation {worst:e}"),
        ));
    }
    Ok(())
}

fn sweep(cli: &Cli, common: &Common, fractions: &[f64]) -> Result<(), Failure> {
    if common.scenario.is_some() {
        return Err(Failure::usage(
            "sweep generates its scenarios; use --users and --seed instead of --scenario",
        ));
    }
    let seed = common.seed.unwrap_or(1);
    let out = out_dir(cli, common, seed, None)?;
    let rows = metrics::sweep(
        common.users,
        fractions,
        seed,
        &common.tou_targets(),
        &common.iter_config(),
    )?;
    out.csv("sweep.csv", &rows)?;
    for r in &rows {
        println!("fraction {:.2}: PAR reduction {:.2}%", r.fraction, r.par_reduction);
    }
    Ok(())
}

fn noise_study(cli: &Cli, common: &Common, mape_max: f64, mape_step: f64, trials: usize) -> Result<(), Failure> {
    if mape_step.is_nan() || mape_step <= 0.0 || !(0.0..=100.0).contains(&mape_max) {
        return Err(Failure::usage(
            "--mape-step must be positive and --mape-max within [0, 100]",
        ));
    }
    let (scenario, hash) = common.scenario()?;
    let out = out_dir(cli, common, scenario.seed, hash)?;
    let levels = ((mape_max / mape_step) + 1e-9).floor() as usize;
    let mapes: Vec<f64> = (0..=levels).map(|i| i as f64 * mape_step).collect();
    let rows = metrics::noise_study(&scenario, &mapes, trials, &common.iter_config())?;
    out.csv("noise.csv", &rows)?;
    for r in &rows {
        println!(
            "MAPE {:>5.1}%: community cost {:.2}, participant mean cost {:.2}",
            r.mape, r.community_cost, r.participating_mean_cost
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Solve {
            common,
            certificate_samples,
        } => solve(cli, common, *certificate_samples),
        Command::Baseline { common } => baseline(cli, common),
        Command::IcAudit {
            common,
            audit_users,
            audit_steps,
            tolerance,
        } => ic_audit(cli, common, audit_users, audit_steps, *tolerance),
        Command::Sweep { common, fractions } => sweep(cli, common, fractions),
        Command::NoiseStudy {
            common,
            mape_max,
            mape_step,
            noise_trials,
        } => noise_study(cli, common, *mape_max, *mape_step, *noise_trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = serde_json::json!({
                "error": { "category": f.category, "message": f.message, "exit_code": f.code }
            });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
