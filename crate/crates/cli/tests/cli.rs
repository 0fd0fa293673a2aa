use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sestrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sestrade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn error_category(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).expect("error is json");
    v["error"]["category"].as_str().unwrap().to_string()
}

const TWO_STEP: &str = r#"{
  "horizon": { "steps": 2, "step_hours": 12.0 },
  "ses": { "capacity": 20.0, "leakage": 0.5, "charge_eff": 0.9, "discharge_eff": 1.1,
           "initial_charge": 10.0, "exchange_limit": LIMIT },
  "tariff": { "phi": [0.5, 0.5], "delta": [5.0, 5.0], "e_max": 1000.0 },
  "seed": 3,
  "users": [
    { "id": "a", "participating": true, "demand_kwh": [2.0, 3.0], "generation_kwh": [0.0, 0.0] },
    { "id": "b", "participating": true, "demand_kwh": [1.0, 2.0], "generation_kwh": [0.5, 0.0] },
    { "id": "n", "participating": false, "demand_kwh": [4.0, 4.0], "generation_kwh": [0.0, 0.0] }
  ]
}"#;

#[test]
fn solve_writes_reports_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sestrade(&["solve", "--generate", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["equilibrium.json", "report.csv", "convergence.csv", "certificate.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let eq = json(&dir.path().join("equilibrium.json"));
    assert_eq!(eq["header"]["seed"], 1);
    assert_eq!(eq["header"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(eq["summary"]["ledger"]["passed"].as_bool().unwrap());
    assert_eq!(json(&dir.path().join("certificate.json"))["passed"], true);

    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("# tool: sestrade-cli\n"));
    assert_eq!(csv_rows(&dir.path().join("report.csv")).len(), 48);
    assert!(!csv_rows(&dir.path().join("convergence.csv")).is_empty());
}

#[test]
fn solve_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = sestrade(&[
            "solve",
            "--generate",
            "--certificate-samples",
            "200",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for f in ["equilibrium.json", "report.csv", "convergence.csv", "certificate.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn config_hash_tracks_configuration() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    sestrade(&["baseline", "--generate", "--out", a.path().to_str().unwrap()]);
    sestrade(&[
        "baseline",
        "--generate",
        "--fraction",
        "0.5",
        "--out",
        b.path().to_str().unwrap(),
    ]);
    let ha = json(&a.path().join("baseline.json"))["header"]["config_hash"].clone();
    let hb = json(&b.path().join("baseline.json"))["header"]["config_hash"].clone();
    assert_ne!(ha, hb);
}

#[test]
fn infeasible_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, TWO_STEP.replace("LIMIT", "0.0")).unwrap();
    let o = sestrade(&[
        "solve",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_category(&o), "leader-infeasible");

    std::fs::write(&path, TWO_STEP.replace("LIMIT", "50.0")).unwrap();
    let o = sestrade(&[
        "solve",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = sestrade(&["solve", "--scenario", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_category(&o), "usage");

    assert_eq!(sestrade(&["solve"]).status.code(), Some(1));
    assert_eq!(sestrade(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        sestrade(&[
            "solve",
            "--generate",
            "--tau",
            "0",
            "--out",
            dir.path().to_str().unwrap()
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(sestrade(&["--help"]).status.code(), Some(0));
}

#[test]
fn scenario_without_participants_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let text = TWO_STEP
        .replace("LIMIT", "50.0")
        .replace("\"participating\": true", "\"participating\": false");
    std::fs::write(&path, text).unwrap();
    let o = sestrade(&[
        "baseline",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn par_reduction_from_solve_and_baseline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(
        sestrade(&["solve", "--generate", "--certificate-samples", "100", "--out", out])
            .status
            .success()
    );
    assert!(sestrade(&["baseline", "--generate", "--out", out]).status.success());
    let system = json(&dir.path().join("equilibrium.json"))["summary"]["par"]
        .as_f64()
        .unwrap();
    let baseline = json(&dir.path().join("baseline.json"))["par"].as_f64().unwrap();
    let reduction = 100.0 * (baseline - system) / baseline;
    assert!((25.0..35.0).contains(&reduction), "{reduction}");
    assert_eq!(csv_rows(&dir.path().join("baseline_report.csv")).len(), 48);
}

#[test]
fn single_user_step_audit_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sestrade(&["ic-audit", "--generate", "--user", "p03", "--step", "24", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("audit.csv"));
    assert!(rows.iter().all(|r| &r[0] == "p03" && &r[1] == "24"));
    assert!(rows.len() >= 41);

    let o = sestrade(&[
        "ic-audit",
        "--generate",
        "--user",
        "p03",
        "--step",
        "24",
        "--tolerance",
        "-1",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_category(&o), "audit");
}

#[test]
fn full_audit_of_reference_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sestrade(&["ic-audit", "--generate", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_single_fraction_and_default_trend() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(sestrade(&["sweep", "--fractions", "0.25", "--out", out])
        .status
        .success());
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")).len(), 1);

    assert!(sestrade(&["sweep", "--out", out]).status.success());
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 11);
    let reductions: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(reductions.windows(2).all(|w| w[1] >= w[0]), "{reductions:?}");
    for r in &rows {
        let part: f64 = r[9].parse().unwrap();
        if !r[10].is_empty() {
            assert!(part < r[10].parse::<f64>().unwrap());
        }
    }
}

#[test]
fn sweep_rejects_scenario_file() {
    let o = sestrade(&["sweep", "--scenario", "x.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn noise_study_zero_row_matches_noiseless_solve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sestrade(&[
        "noise-study",
        "--generate",
        "--mape-max",
        "10",
        "--mape-step",
        "5",
        "--noise-trials",
        "2",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("noise.csv"));
    assert_eq!(rows.len(), 3);
    assert!(
        sestrade(&["solve", "--generate", "--certificate-samples", "100", "--out", out])
            .status
            .success()
    );
    let community = json(&dir.path().join("equilibrium.json"))["summary"]["community_cost"]
        .as_f64()
        .unwrap();
    let zero: f64 = rows[0][2].parse().unwrap();
    assert!(
        (zero - community).abs() <= 1e-9 * (1.0 + community.abs()),
        "{zero} vs {community}"
    );
}

#[test]
fn tariff_targets_shape_the_generated_scenario() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(
        sestrade(&["baseline", "--generate", "--out", a.path().to_str().unwrap()])
            .status
            .success()
    );
    let o = sestrade(&[
        "baseline",
        "--generate",
        "--price-high",
        "70",
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spread = |d: &Path| {
        let prices: Vec<f64> = json(&d.join("baseline.json"))["grid_price"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        prices.iter().cloned().fold(f64::MIN, f64::max) - prices.iter().cloned().fold(f64::MAX, f64::min)
    };
    assert!(spread(b.path()) > spread(a.path()));

    let o = sestrade(&[
        "baseline",
        "--generate",
        "--price-low",
        "60",
        "--out",
        a.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
