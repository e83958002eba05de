//! `bunchkit policy-scan`: replay the calibrated structural model under
//! alternative kink designs.
//!
//! Given an agent CSV, a calibration source (a `report.json` from `estimate`
//! or a `truth.json` from `simulate`), the baseline policy, and a scenario
//! list, each agent's ability is inverted from its observed choice and its
//! assignment and outcome are recomputed under every scenario:
//!
//! - ability: n = z/(1-t)^e below the threshold, n = z/(1-t-dt)^e above it,
//!   and n = z*/(1-t)^e inside the bunching region (bunchers are
//!   interval-identified; we assign the marginal low type, a conservative
//!   convention that keeps the baseline a fixed point);
//! - choice: the interior solution n(1-rate)^e on whichever side admits it,
//!   otherwise bunch at the scenario threshold;
//! - outcome: y' = y + mu ln(z'/z) - lambda (T'(z') - T(z)), exact under the
//!   quasi-linear structural model.
//!
//! Output `scenarios.csv` has one row per scenario plus a leading baseline
//! row computed from the observed data, which any scenario identical to the
//! baseline policy reproduces exactly.

use std::path::PathBuf;

use bunchkit_core::{tax_amount, KinkPolicy};

use crate::csvio;
use crate::CliError;

#[derive(clap::Args)]
pub struct ScanArgs {
    /// Agent CSV with header `agent_id,z,y,group`
    #[arg(long)]
    pub input: PathBuf,

    /// Calibration source: report.json from `estimate` or truth.json from
    /// `simulate` (needs numeric mu, lambda, and elasticity)
    #[arg(long)]
    pub calibration: PathBuf,

    /// Baseline kink threshold z*
    #[arg(long, default_value_t = 100.0)]
    pub z_star: f64,

    /// Baseline marginal rate below the threshold
    #[arg(long, default_value_t = 0.2)]
    pub t: f64,

    /// Baseline rate increase at the threshold
    #[arg(long, default_value_t = 0.3)]
    pub delta_t: f64,

    /// Bunching half-width below z* used to classify observed agents
    #[arg(long, default_value_t = 0.0)]
    pub u1: f64,

    /// Bunching half-width above z* used to classify observed agents
    #[arg(long, default_value_t = 0.0)]
    pub u2: f64,

    /// Scenario CSV with header `z_star,delta_t`, one alternative per row
    #[arg(long)]
    pub scenarios: PathBuf,

    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

struct Calibration {
    mu: f64,
    lambda: f64,
    e: f64,
}

fn load_calibration(path: &PathBuf) -> Result<Calibration, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: not valid JSON: {e}", path.display())))?;
    let field = |key: &str| -> Result<f64, CliError> {
        value
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| CliError::input(format!("{}: no numeric `{key}` — run is uncalibrated", path.display())))
    };
    Ok(Calibration { mu: field("mu")?, lambda: field("lambda")?, e: field("elasticity")? })
}

fn load_scenarios(path: &PathBuf) -> Result<Vec<(f64, f64)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::input(format!("scenario header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers != ["z_star", "delta_t"] {
        return Err(CliError::input(format!(
            "scenario header must be `z_star,delta_t`, got `{}`",
            headers.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(format!("scenario row {}: {e}", i + 2)))?;
        let z_star = record.get(0).and_then(|s| s.parse::<f64>().ok());
        let delta_t = record.get(1).and_then(|s| s.parse::<f64>().ok());
        match (z_star, delta_t) {
            (Some(z), Some(dt)) => rows.push((z, dt)),
            _ => return Err(CliError::input(format!("scenario row {}: cannot parse", i + 2))),
        }
    }
    if rows.is_empty() {
        return Err(CliError::input("scenario file has no rows"));
    }
    Ok(rows)
}

/// Structural ability inverted from the observed assignment choice.
fn invert_ability(z: f64, baseline: &KinkPolicy, e: f64) -> f64 {
    let lo = z_lo(baseline);
    let hi = z_hi(baseline);
    if z < lo {
        z / (1.0 - baseline.t).powf(e)
    } else if z > hi {
        z / (1.0 - baseline.t - baseline.delta_t).powf(e)
    } else {
        baseline.z_star / (1.0 - baseline.t).powf(e)
    }
}

fn z_lo(p: &KinkPolicy) -> f64 {
    p.z_star - p.u1
}

fn z_hi(p: &KinkPolicy) -> f64 {
    p.z_star + p.u2
}

/// Optimal assignment under a scenario kink for an agent of ability `n`.
fn scenario_choice(n: f64, scenario: &KinkPolicy, e: f64) -> f64 {
    let z_low = n * (1.0 - scenario.t).powf(e);
    if z_low <= scenario.z_star {
        return z_low;
    }
    let z_high = n * (1.0 - scenario.t - scenario.delta_t).powf(e);
    if z_high > scenario.z_star {
        z_high
    } else {
        scenario.z_star
    }
}

struct Totals {
    total_z: f64,
    total_payments: f64,
    mean_outcome: f64,
    sd_outcome: f64,
}

fn totals(zs: &[f64], ys: &[f64], policy: &KinkPolicy) -> Result<Totals, CliError> {
    let n = zs.len() as f64;
    let total_z: f64 = zs.iter().sum();
    let mut total_payments = 0.0;
    for &z in zs {
        total_payments += tax_amount(policy, z)?;
    }
    let mean = ys.iter().sum::<f64>() / n;
    let var = if ys.len() > 1 {
        ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(Totals { total_z, total_payments, mean_outcome: mean, sd_outcome: var.sqrt() })
}

pub fn run(args: &ScanArgs) -> Result<(), CliError> {
    let baseline = KinkPolicy::new(args.z_star, args.t, args.delta_t, args.u1, args.u2)?;
    let cal = load_calibration(&args.calibration)?;
    if !(cal.e > 0.0) {
        return Err(CliError::input(format!("elasticity must be positive, got {}", cal.e)));
    }
    let scenarios = load_scenarios(&args.scenarios)?;
    let samples = csvio::read_agents(&args.input)?;
    if samples.iter().any(|s| s.z <= 0.0) {
        return Err(CliError::input("policy-scan requires strictly positive z (ability inversion)"));
    }
    std::fs::create_dir_all(&args.out)?;

    let abilities: Vec<f64> = samples.iter().map(|s| invert_ability(s.z, &baseline, cal.e)).collect();

    let mut out = String::from(
        "scenario,z_star,delta_t,total_z,total_payments,mean_outcome,sd_outcome\n",
    );
    let mut push_row = |label: &str, z_star: f64, delta_t: f64, t: &Totals| {
        out.push_str(&format!(
            "{label},{z_star:.14e},{delta_t:.14e},{:.14e},{:.14e},{:.14e},{:.14e}\n",
            t.total_z, t.total_payments, t.mean_outcome, t.sd_outcome
        ));
    };

    let base_z: Vec<f64> = samples.iter().map(|s| s.z).collect();
    let base_y: Vec<f64> = samples.iter().map(|s| s.y).collect();
    let base_totals = totals(&base_z, &base_y, &baseline)?;
    push_row("baseline", baseline.z_star, baseline.delta_t, &base_totals);

    for (i, &(z_star, delta_t)) in scenarios.iter().enumerate() {
        let scenario = KinkPolicy::new(z_star, baseline.t, delta_t, 0.0, 0.0)?;
        let mut zs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for (s, &n) in samples.iter().zip(&abilities) {
            let z_new = scenario_choice(n, &scenario, cal.e);
            let dy = cal.mu * (z_new / s.z).ln()
                - cal.lambda * (tax_amount(&scenario, z_new)? - tax_amount(&baseline, s.z)?);
            zs.push(z_new);
            ys.push(s.y + dy);
        }
        let t = totals(&zs, &ys, &scenario)?;
        push_row(&format!("{}", i + 1), z_star, delta_t, &t);
    }

    std::fs::write(args.out.join("scenarios.csv"), out)
        .map_err(|e| CliError::input(format!("cannot write scenarios.csv: {e}")))?;

    csvio::write_manifest(
        &args.out,
        "policy-scan",
        args.input.to_str().unwrap_or("<input>"),
        Some(&baseline),
        &format!("calibration={}", args.calibration.display()),
        None,
        &["scenarios.csv"],
    )
}
