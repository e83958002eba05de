//! Pipeline orchestration: density -> outcome -> calibration -> effects,
//! plus agent-level bootstrap standard errors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EstimationConfig;
use crate::density::{calibrate_elasticity, estimate_density_from_partition, DensityEstimate};
use crate::effects::{
    buncher_outcome_sharp, te_buncher_structural, te_bunchers_diffuse, te_bunchers_sharp,
    te_shifters, BunchingMode,
};
use crate::error::{Error, Result};
use crate::outcome::{calibrate_mu_lambda, estimate_outcome_from_partition, Calibration, OutcomeEstimate};
use crate::partition::Partition;
use crate::policy::KinkPolicy;
use crate::sample::{validate_samples, AgentSample};

/// Everything one pass of the pipeline produces. Pieces that a dataset cannot
/// identify (e.g. the elasticity at a 100% marginal rate) are `None` with a
/// note instead of failing the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub density: DensityEstimate,
    pub outcome: OutcomeEstimate,
    pub elasticity: Option<f64>,
    pub elasticity_note: Option<String>,
    pub calibration: Option<Calibration>,
    pub calibration_note: Option<String>,
    pub te_shifter: Option<f64>,
    pub te_buncher: Option<f64>,
    pub te_buncher_note: Option<String>,
    pub buncher_outcome_at_kink: Option<f64>,
    pub te_buncher_structural: Option<f64>,
    pub mode: BunchingMode,
}

pub(crate) fn run_estimate_from_partition(
    part: &Partition,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<EstimateResult> {
    let density = estimate_density_from_partition(part, config)?;
    let outcome = estimate_outcome_from_partition(part, density.delta_z_star, config)?;

    let (elasticity, elasticity_note) = match calibrate_elasticity(density.delta_z_star, policy) {
        Ok(e) => (Some(e), None),
        Err(Error::ElasticityUnidentified) => {
            (None, Some("unidentified (100% marginal rate)".to_string()))
        }
        Err(e) => return Err(e),
    };
    let (calibration, calibration_note) = match calibrate_mu_lambda(
        outcome.level_break,
        outcome.slope_break,
        density.delta_z_star,
        policy,
        config.outcome_level_convention,
    ) {
        Ok(c) => (Some(c), None),
        Err(e @ (Error::MuUnidentified | Error::LambdaUnidentified)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };

    let mode = if density.m1 + density.m2 > 0 { BunchingMode::Diffuse } else { BunchingMode::Sharp };
    let te_shifter = te_shifters(&density, &outcome, policy).ok();
    let te_buncher_res = match mode {
        BunchingMode::Sharp => te_bunchers_sharp(&density, &outcome, policy, config),
        BunchingMode::Diffuse => te_bunchers_diffuse(&density, &outcome, policy, config),
    };
    let (te_buncher, te_buncher_note) = match te_buncher_res {
        Ok(v) => (Some(v), None),
        Err(e @ Error::ThinBuncherMass(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let buncher_outcome_at_kink = {
        let t = density.threshold_bin;
        density.observed.mean_outcome(t).and_then(|y| {
            buncher_outcome_sharp(
                density.observed.counts[t],
                density.counterfactual_counts[t],
                y,
                outcome.counterfactual_outcomes[t],
                config.excess_mass_floor,
            )
            .ok()
        })
    };
    let te_buncher_structural = calibration
        .as_ref()
        .and_then(|c| te_buncher_structural(c, &density, policy).ok());

    Ok(EstimateResult {
        density,
        outcome,
        elasticity,
        elasticity_note,
        calibration,
        calibration_note,
        te_shifter,
        te_buncher,
        te_buncher_note,
        buncher_outcome_at_kink,
        te_buncher_structural,
        mode,
    })
}

/// Run the full estimation pipeline once.
pub fn run_estimate(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<EstimateResult> {
    validate_samples(samples)?;
    let part = Partition::new(samples, None, policy, config)?;
    run_estimate_from_partition(&part, policy, config)
}

/// Point estimates with bootstrap standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectsReport {
    pub te_shifter: f64,
    pub te_buncher: f64,
    pub buncher_outcome_at_kink: f64,
    pub calibration: Calibration,
    pub delta_z_star: f64,
    pub excess_bunching: f64,
    pub mode: BunchingMode,
    pub se_te_shifter: f64,
    pub se_te_buncher: f64,
    pub se_mu: f64,
    pub se_lambda: f64,
    pub se_delta_z: f64,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub failed_replicates: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct ReplicateStats {
    delta_z: f64,
    mu: Option<f64>,
    lambda: Option<f64>,
    te_shifter: Option<f64>,
    te_buncher: Option<f64>,
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

fn se_of(stats: &[ReplicateStats], f: impl Fn(&ReplicateStats) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = stats.iter().filter_map(f).collect();
    sample_sd(&vals)
}

/// Bootstrap with a caller-supplied resampling scheme: `fill(rep, mults)`
/// writes the per-agent multiplicities of replicate `rep`. Used directly in
/// tests (e.g. identity resampling must give zero SEs); production code goes
/// through [`bootstrap_pipeline`].
pub fn bootstrap_pipeline_with<F>(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
    reps: usize,
    seed: u64,
    fill: F,
) -> Result<EffectsReport>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if reps < 2 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 2 replicates, got {reps}")));
    }
    validate_samples(samples)?;
    let base = Partition::new(samples, None, policy, config)?;
    let point = run_estimate_from_partition(&base, policy, config)?;
    let calibration = point
        .calibration
        .clone()
        .ok_or_else(|| Error::Estimation(point.calibration_note.clone().unwrap_or_default()))?;
    let te_shifter = point.te_shifter.ok_or(Error::EmptyShifterRegion)?;
    let te_buncher = point
        .te_buncher
        .ok_or_else(|| Error::ThinBuncherMass(point.te_buncher_note.clone().unwrap_or_default()))?;

    let results: Vec<Option<ReplicateStats>> = (0..reps)
        .into_par_iter()
        .map_init(
            || (base.clone(), vec![0.0f64; samples.len()]),
            |(part, mults), rep| {
                mults.iter_mut().for_each(|m| *m = 0.0);
                fill(rep, mults);
                part.reweight(samples, Some(mults.as_slice()));
                let r = run_estimate_from_partition(part, policy, config).ok()?;
                if !r.density.converged {
                    return None;
                }
                Some(ReplicateStats {
                    delta_z: r.density.delta_z_star,
                    mu: r.calibration.as_ref().map(|c| c.mu),
                    lambda: r.calibration.as_ref().map(|c| c.lambda),
                    te_shifter: r.te_shifter,
                    te_buncher: r.te_buncher,
                })
            },
        )
        .collect();
    let ok: Vec<ReplicateStats> = results.iter().flatten().copied().collect();
    let failed = reps - ok.len();
    if failed * 5 > reps {
        return Err(Error::TooManyBootstrapFailures { failed, total: reps });
    }

    Ok(EffectsReport {
        te_shifter,
        te_buncher,
        buncher_outcome_at_kink: point.buncher_outcome_at_kink.unwrap_or(f64::NAN),
        calibration,
        delta_z_star: point.density.delta_z_star,
        excess_bunching: point.density.excess_bunching,
        mode: point.mode,
        se_te_shifter: se_of(&ok, |s| s.te_shifter),
        se_te_buncher: se_of(&ok, |s| s.te_buncher),
        se_mu: se_of(&ok, |s| s.mu),
        se_lambda: se_of(&ok, |s| s.lambda),
        se_delta_z: se_of(&ok, |s| Some(s.delta_z)),
        bootstrap_reps: reps,
        seed,
        failed_replicates: failed,
    })
}

/// Resample agents with replacement, rerun the full pipeline per replicate,
/// and report standard deviations across replicates as standard errors.
/// Deterministic given `seed` (each replicate owns an RNG stream), regardless
/// of parallel scheduling. More than 20% failed replicates is an error.
pub fn bootstrap_pipeline(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
    reps: usize,
    seed: u64,
) -> Result<EffectsReport> {
    let n = samples.len();
    bootstrap_pipeline_with(samples, policy, config, reps, seed, move |rep, mults| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64 + 1);
        for _ in 0..n {
            mults[rng.random_range(0..n)] += 1.0;
        }
    })
}
