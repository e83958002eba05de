//! `bunchkit estimate`: the full pipeline on an agent CSV.
//!
//! Outputs, all in `--out`:
//! - `report.json` — fixed field names {delta_z_star, excess_bunching,
//!   elasticity, mu, lambda, te_shifter, te_buncher, se:{...}, converged,
//!   iterations}, plus diagnostics and an optional parallel-shift baseline
//!   section;
//! - `density_bins.csv` — bin_center,observed,counterfactual,
//!   shifter_extrapolated (NaN outside the diffuse region);
//! - `outcome_bins.csv` — bin_center,observed,auxiliary,counterfactual;
//! - `manifest.json` — run provenance (the only file with a timestamp).
//!
//! `counterfactual_side = high_rate` in the config file routes to the
//! mirrored bunch-up estimator, which targets the linear high-rate schedule
//! and reports the never-taker effect in place of the shifter/buncher pair.

use std::path::PathBuf;

use bunchkit_core::extensions::bunch_up::estimate_bunch_up;
use bunchkit_core::{
    bin_samples, bootstrap_pipeline, calibrate_elasticity, parallel_shift_baseline, run_estimate,
    AgentSample, BunchingMode, CounterfactualSide, EstimationConfig, KinkPolicy,
};

use crate::csvio;
use crate::jsonfmt::{self, Obj};
use crate::kv;
use crate::CliError;

#[derive(clap::Args)]
pub struct EstimateArgs {
    /// Agent CSV with header `agent_id,z,y,group` (group optional)
    #[arg(long)]
    pub input: PathBuf,

    /// Kink threshold z*
    #[arg(long, default_value_t = 100.0)]
    pub z_star: f64,

    /// Marginal rate below the threshold
    #[arg(long, default_value_t = 0.2)]
    pub t: f64,

    /// Rate increase at the threshold
    #[arg(long, default_value_t = 0.3)]
    pub delta_t: f64,

    /// Diffuse bunching half-width below z* (0 = sharp)
    #[arg(long, default_value_t = 0.0)]
    pub u1: f64,

    /// Diffuse bunching half-width above z* (0 = sharp)
    #[arg(long, default_value_t = 0.0)]
    pub u2: f64,

    /// Estimation config file, flat `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Bootstrap replicates for standard errors (0 = skip)
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,

    /// Bootstrap RNG seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also report the parallel-shift baseline estimate
    #[arg(long)]
    pub baseline: bool,

    /// Worker threads for the bootstrap (defaults to all cores)
    #[arg(long)]
    pub threads: Option<usize>,

    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: &EstimateArgs) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        // Ignore the error from a pool that is already initialized (tests
        // call `run` repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let policy = KinkPolicy::new(args.z_star, args.t, args.delta_t, args.u1, args.u2)?;
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
            kv::estimation_from_kv(&text)?
        }
        None => EstimationConfig::default(),
    };
    let samples = csvio::read_agents(&args.input)?;
    std::fs::create_dir_all(&args.out)?;

    if config.counterfactual_side == CounterfactualSide::HighRate {
        return run_bunch_up(args, &samples, &policy, &config);
    }

    let result = run_estimate(&samples, &policy, &config)?;
    let density = &result.density;
    let outcome = &result.outcome;

    let se = if args.bootstrap > 0 {
        let report = bootstrap_pipeline(&samples, &policy, &config, args.bootstrap, args.seed)?;
        Some(
            Obj::new()
                .num("delta_z_star", report.se_delta_z)
                .num("mu", report.se_mu)
                .num("lambda", report.se_lambda)
                .num("te_shifter", report.se_te_shifter)
                .num("te_buncher", report.se_te_buncher)
                .int("bootstrap_reps", report.bootstrap_reps as u64)
                .int("failed_replicates", report.failed_replicates as u64)
                .int("seed", report.seed)
                .render(),
        )
    } else {
        None
    };

    let mut report = Obj::new()
        .num("delta_z_star", density.delta_z_star)
        .num("excess_bunching", density.excess_bunching)
        .raw(
            "elasticity",
            match (result.elasticity, &result.elasticity_note) {
                (Some(e), _) => jsonfmt::num(e),
                (None, Some(note)) => jsonfmt::string(note),
                (None, None) => "null".to_string(),
            },
        )
        .opt_num("mu", result.calibration.as_ref().map(|c| c.mu))
        .opt_num("lambda", result.calibration.as_ref().map(|c| c.lambda))
        .opt_num("te_shifter", result.te_shifter)
        .opt_num("te_buncher", result.te_buncher)
        .raw("se", se.unwrap_or_else(|| "null".to_string()))
        .bool("converged", density.converged)
        .int("iterations", density.iterations_used as u64)
        .str("mode", mode_tag(result.mode))
        .num("final_residual", density.final_residual)
        .opt_num("te_buncher_structural", result.te_buncher_structural)
        .opt_num("buncher_outcome_at_kink", result.buncher_outcome_at_kink);
    if let Some(note) = &result.calibration_note {
        report = report.str("calibration_note", note);
    }
    if let Some(note) = &result.te_buncher_note {
        report = report.str("te_buncher_note", note);
    }

    if args.baseline {
        let base = parallel_shift_baseline(&samples, &policy, &config)?;
        report = report.raw(
            "baseline",
            Obj::new()
                .num("delta_z_star", base.delta_z_star)
                .num("excess_bunching", base.excess_bunching)
                .opt_num("elasticity", calibrate_elasticity(base.delta_z_star, &policy).ok())
                .render(),
        );
    }
    report = report.str("manifest", "manifest.json");
    csvio::write_json(&args.out.join("report.json"), &report.render())?;

    // Plot tables. The shifter extrapolation only exists on the m2 diffuse
    // bins just above the threshold; everything else is NaN.
    let grid = density.grid;
    let diffuse_lo = density.threshold_bin + 1;
    csvio::write_bins(
        &args.out.join("density_bins.csv"),
        "bin_center,observed,counterfactual,shifter_extrapolated",
        (0..grid.n_bins).map(|j| {
            let extrap = if j >= diffuse_lo && j < diffuse_lo + density.m2 {
                density.shifter_diffuse_counts[j - diffuse_lo]
            } else {
                f64::NAN
            };
            vec![grid.center(j), density.observed.counts[j], density.counterfactual_counts[j], extrap]
        }),
    )?;

    // The outcome grid can extend past the density grid (relocated shifters
    // land above the observed maximum); observed means are looked up by bin
    // center since both grids share the width and threshold alignment.
    let ogrid = outcome.grid;
    csvio::write_bins(
        &args.out.join("outcome_bins.csv"),
        "bin_center,observed,auxiliary,counterfactual",
        (0..ogrid.n_bins).map(|j| {
            let c = ogrid.center(j);
            let observed = grid
                .index_of(c)
                .and_then(|k| density.observed.mean_outcome(k))
                .unwrap_or(f64::NAN);
            vec![c, observed, outcome.auxiliary_outcomes[j], outcome.counterfactual_outcomes[j]]
        }),
    )?;

    write_manifest(args)?;

    if !density.converged {
        return Err(CliError::non_convergence(format!(
            "marginal-response search did not converge in {} iterations (residual {:.3e}); outputs were still written",
            density.iterations_used, density.final_residual
        )));
    }
    Ok(())
}

fn mode_tag(mode: BunchingMode) -> &'static str {
    match mode {
        BunchingMode::Sharp => "sharp",
        BunchingMode::Diffuse => "diffuse",
    }
}

fn run_bunch_up(
    args: &EstimateArgs,
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<(), CliError> {
    if args.bootstrap > 0 {
        return Err(CliError::input("--bootstrap is not supported with counterfactual_side = high_rate"));
    }
    if args.baseline {
        return Err(CliError::input("--baseline is not supported with counterfactual_side = high_rate"));
    }
    let est = estimate_bunch_up(samples, policy, config)?;

    let report = Obj::new()
        .num("delta_z_star", est.delta_z_star_act)
        .num("excess_bunching", est.excess_bunching)
        .raw(
            "elasticity",
            match est.elasticity {
                Some(e) => jsonfmt::num(e),
                None => jsonfmt::string("unidentified (100% marginal rate)"),
            },
        )
        .num("mu", est.mu)
        .num("lambda", est.lambda)
        .opt_num("te_shifter", None)
        .opt_num("te_buncher", None)
        .raw("se", "null")
        .bool("converged", est.converged)
        .int("iterations", est.iterations_used as u64)
        .str("mode", "bunch_up")
        .num("final_residual", est.final_residual)
        .num("never_taker_te", est.never_taker_te)
        .str("manifest", "manifest.json")
        .render();
    csvio::write_json(&args.out.join("report.json"), &report)?;

    let grid = est.grid;
    let observed = bin_samples(samples, grid);
    csvio::write_bins(
        &args.out.join("density_bins.csv"),
        "bin_center,observed,counterfactual,shifter_extrapolated",
        (0..grid.n_bins).map(|j| {
            vec![grid.center(j), observed.counts[j], est.counterfactual_counts[j], f64::NAN]
        }),
    )?;
    csvio::write_bins(
        &args.out.join("outcome_bins.csv"),
        "bin_center,observed,auxiliary,counterfactual",
        (0..grid.n_bins).map(|j| {
            let mean = observed.mean_outcome(j).unwrap_or(f64::NAN);
            vec![grid.center(j), mean, f64::NAN, est.counterfactual_outcomes[j]]
        }),
    )?;

    write_manifest(args)?;

    if !est.converged {
        return Err(CliError::non_convergence(format!(
            "mirror search did not converge in {} iterations (residual {:.3e}); outputs were still written",
            est.iterations_used, est.final_residual
        )));
    }
    Ok(())
}

fn write_manifest(args: &EstimateArgs) -> Result<(), CliError> {
    let policy = KinkPolicy::new(args.z_star, args.t, args.delta_t, args.u1, args.u2)?;
    let config_echo = match &args.config {
        Some(path) => std::fs::read_to_string(path).unwrap_or_default(),
        None => String::new(),
    };
    csvio::write_manifest(
        &args.out,
        "estimate",
        args.input.to_str().unwrap_or("<input>"),
        Some(&policy),
        &config_echo,
        (args.bootstrap > 0).then_some(args.seed),
        &["report.json", "density_bins.csv", "outcome_bins.csv"],
    )
}
