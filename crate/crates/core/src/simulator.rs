//! Synthetic agent populations with known ground truth.
//!
//! Agents have quasi-linear isoelastic preferences: under a linear marginal
//! rate `1 - t` an agent of ability `n` chooses `z = n (1 - t)^e`. A kink at
//! `z_star` splits the population into always-takers (counterfactual choice
//! below the threshold), bunchers (relocate exactly to the threshold), and
//! shifters (cut z by the constant share `z_star / (z_star + delta_z_star)`).
//! Optional layers: a fixed share of inattentive stayers, diffusion noise
//! around the targeted z, misreporting against a convex relabelling cost, and
//! per-group heterogeneous elasticities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extensions::relabel::{relabel_forward, relabel_map, RelabelMap};
use crate::policy::{tax_amount, KinkPolicy};
use crate::sample::AgentSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbilityDist {
    Uniform { lo: f64, hi: f64 },
    LogNormal { location: f64, scale: f64 },
    Exponential { rate: f64 },
    /// Linearly decreasing density on [lo, hi] (right triangle, mode at lo).
    Triangular { lo: f64, hi: f64 },
}

/// One elasticity for everyone, or a finite mixture of labelled groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElasticitySpec {
    Constant(f64),
    Groups(Vec<GroupSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub e: f64,
    pub share: f64,
}

/// Functional form of the z-dependence of the outcome equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// y = y_pre(n) + mu ln z - lambda T(z): the canonical form.
    Log,
    /// y = y_pre(n) + mu (z / z_ct - 1) - lambda T(z): matches the
    /// linear-share calibration convention exactly.
    LinearShare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_agents: usize,
    pub seed: u64,
    pub ability: AbilityDist,
    pub elasticity: ElasticitySpec,
    pub mu: f64,
    pub lambda: f64,
    /// Polynomial coefficients of y_pre(n), constant term first.
    pub y_pre_coeffs: Vec<f64>,
    pub outcome_model: OutcomeModel,
    /// Share of would-be responders who stay at their counterfactual z.
    pub stayer_share: f64,
    /// Std dev of Normal noise added to the targeted z of bunchers and
    /// shifters, truncated at three sigmas so role tags stay meaningful.
    pub diffusion_sigma: f64,
    /// Relabelling cost scale c (quadratic cost c delta^2 / 2); `None` means
    /// no misreporting.
    pub relabel_cost: Option<f64>,
    pub outcome_noise_sigma: f64,
}

impl SimulationConfig {
    /// The canonical test population: lognormal ability centered so that
    /// roughly 20% of agents bunch at z_star = 100, e = 0.5, mu = 10,
    /// lambda = 0.05, quadratic y_pre, no noise or frictions.
    pub fn standard(n_agents: usize, seed: u64) -> Self {
        SimulationConfig {
            n_agents,
            seed,
            ability: AbilityDist::LogNormal { location: 4.7167, scale: 0.45 },
            elasticity: ElasticitySpec::Constant(0.5),
            mu: 10.0,
            lambda: 0.05,
            y_pre_coeffs: vec![5.0, 0.02, -5e-5],
            outcome_model: OutcomeModel::Log,
            stayer_share: 0.0,
            diffusion_sigma: 0.0,
            relabel_cost: None,
            outcome_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.ability {
            AbilityDist::Uniform { lo, hi } => {
                if !(*hi > *lo && *lo > 0.0) {
                    return Err(Error::InvalidConfig(format!("bad uniform ability range [{lo}, {hi}]")));
                }
            }
            AbilityDist::LogNormal { scale, .. } => {
                if !(*scale > 0.0) {
                    return Err(Error::InvalidConfig("lognormal scale must be positive".into()));
                }
            }
            AbilityDist::Exponential { rate } => {
                if !(*rate > 0.0) {
                    return Err(Error::InvalidConfig("exponential rate must be positive".into()));
                }
            }
            AbilityDist::Triangular { lo, hi } => {
                if !(*hi > *lo && *lo > 0.0) {
                    return Err(Error::InvalidConfig(format!("bad triangular ability range [{lo}, {hi}]")));
                }
            }
        }
        match &self.elasticity {
            ElasticitySpec::Constant(e) => {
                if !(*e > 0.0) {
                    return Err(Error::InvalidConfig(format!("elasticity must be positive, got {e}")));
                }
            }
            ElasticitySpec::Groups(groups) => {
                if groups.is_empty() {
                    return Err(Error::InvalidConfig("elasticity groups must be non-empty".into()));
                }
                let total: f64 = groups.iter().map(|g| g.share).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!("group shares sum to {total}, expected 1")));
                }
                if groups.iter().any(|g| !(g.e > 0.0) || !(g.share >= 0.0)) {
                    return Err(Error::InvalidConfig("group elasticities must be positive, shares non-negative".into()));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.stayer_share) {
            return Err(Error::InvalidConfig(format!("stayer share {} outside [0, 1]", self.stayer_share)));
        }
        if self.diffusion_sigma < 0.0 || self.outcome_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise scales must be non-negative".into()));
        }
        if let Some(c) = self.relabel_cost {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("relabel cost must be positive, got {c}")));
            }
            if self.stayer_share > 0.0 || self.diffusion_sigma > 0.0 {
                return Err(Error::InvalidConfig(
                    "relabelling cannot be combined with stayers or diffusion".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AlwaysTaker,
    Buncher,
    Shifter,
    Stayer,
    NeverTaker,
}

/// An observed sample together with the latent quantities the estimators are
/// supposed to recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub sample: AgentSample,
    pub ability: f64,
    pub elasticity: f64,
    pub true_z_ct: f64,
    pub true_y_ct: f64,
    pub role: Role,
    /// Relabelling degree delta (0 without misreporting).
    pub true_delta: f64,
}

/// Brute-force population truths, no estimation involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Marginal buncher response of the reported z (share-weighted across
    /// groups under heterogeneity).
    pub delta_z_star: f64,
    /// Share-weighted elasticity.
    pub elasticity: f64,
    pub mu: f64,
    pub lambda: f64,
    /// Mean of (y - y_ct) over tagged shifters (NaN if there are none).
    pub te_shifter: f64,
    /// Mean of (y - y_ct) over tagged bunchers (NaN if there are none).
    pub te_buncher: f64,
    /// Total weight of tagged bunchers.
    pub excess_bunching: f64,
    /// Shifter-weighted mean of ln(z_ct / z): the log-space shift.
    pub mean_log_shift: f64,
    pub n_always_takers: usize,
    pub n_bunchers: usize,
    pub n_shifters: usize,
    pub n_stayers: usize,
}

fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn draw_ability(dist: &AbilityDist, rng: &mut ChaCha8Rng) -> f64 {
    match *dist {
        AbilityDist::Uniform { lo, hi } => rng.random_range(lo..hi),
        AbilityDist::LogNormal { location, scale } => {
            LogNormal::new(location, scale).expect("validated").sample(rng)
        }
        AbilityDist::Exponential { rate } => Exp::new(rate).expect("validated").sample(rng),
        AbilityDist::Triangular { lo, hi } => {
            // Inverse CDF of the decreasing right triangle on [lo, hi].
            let u: f64 = rng.random();
            hi - (hi - lo) * (1.0 - u).sqrt()
        }
    }
}

/// Draws (elasticity, group label) for one agent.
fn draw_elasticity(spec: &ElasticitySpec, rng: &mut ChaCha8Rng) -> (f64, Option<String>) {
    match spec {
        ElasticitySpec::Constant(e) => (*e, None),
        ElasticitySpec::Groups(groups) => {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for g in groups {
                acc += g.share;
                if u < acc {
                    return (g.e, Some(g.label.clone()));
                }
            }
            let last = groups.last().expect("non-empty");
            (last.e, Some(last.label.clone()))
        }
    }
}

/// Generate the population under the linear low-rate policy: no kink applied,
/// every agent at z_ct = n (1 - t)^e with y_ct priced at the linear tax t z.
pub fn generate_counterfactual(config: &SimulationConfig, policy: &KinkPolicy) -> Result<Vec<TaggedSample>> {
    let mut tagged = generate(config, policy)?;
    for s in &mut tagged {
        s.sample.z = s.true_z_ct;
        s.sample.y = s.true_y_ct;
        s.role = Role::AlwaysTaker;
        s.true_delta = 0.0;
    }
    Ok(tagged)
}

/// Generate the observed population under the kinked policy. Identical seeds
/// give bit-identical output.
pub fn generate(config: &SimulationConfig, policy: &KinkPolicy) -> Result<Vec<TaggedSample>> {
    config.validate()?;
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (config.outcome_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.outcome_noise_sigma).expect("validated"));
    let diffusion = (config.diffusion_sigma > 0.0)
        .then(|| Normal::new(0.0, config.diffusion_sigma).expect("validated"));

    let mut out = Vec::with_capacity(config.n_agents);
    for _ in 0..config.n_agents {
        // Fixed draw order per agent keeps the stream layout stable.
        let n = draw_ability(&config.ability, &mut rng);
        let (e, group) = draw_elasticity(&config.elasticity, &mut rng);
        let eps_y = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        let stays = config.stayer_share > 0.0 && rng.random_range(0.0..1.0) < config.stayer_share;
        let eps_z = diffusion.as_ref().map_or(0.0, |d| {
            let raw: f64 = d.sample(&mut rng);
            raw.clamp(-3.0 * config.diffusion_sigma, 3.0 * config.diffusion_sigma)
        });

        let y_pre = polyval(&config.y_pre_coeffs, n) + eps_y;
        let a = match config.relabel_cost {
            Some(c) => relabelled_agent(config, policy, c, n, e, y_pre)?,
            None => plain_agent(config, policy, n, e, y_pre, stays, eps_z)?,
        };
        out.push(TaggedSample {
            sample: AgentSample { z: a.z, y: a.y, group, weight: 1.0 },
            ability: n,
            elasticity: e,
            true_z_ct: a.z_ct,
            true_y_ct: a.y_ct,
            role: a.role,
            true_delta: a.delta,
        });
    }
    Ok(out)
}

struct AgentDraw {
    z: f64,
    y: f64,
    z_ct: f64,
    y_ct: f64,
    role: Role,
    delta: f64,
}

/// z-dependent part of the outcome equation.
fn outcome_term(model: OutcomeModel, mu: f64, z: f64, z_ct: f64) -> f64 {
    match model {
        OutcomeModel::Log => mu * z.ln(),
        OutcomeModel::LinearShare => mu * (z / z_ct - 1.0),
    }
}

fn plain_agent(
    config: &SimulationConfig,
    policy: &KinkPolicy,
    n: f64,
    e: f64,
    y_pre: f64,
    stays: bool,
    eps_z: f64,
) -> Result<AgentDraw> {
    let z_ct = n * (1.0 - policy.t).powf(e);
    let y_ct = y_pre + outcome_term(config.outcome_model, config.mu, z_ct, z_ct)
        - config.lambda * policy.t * z_ct;
    let n_low = policy.z_star / (1.0 - policy.t).powf(e);
    let n_high = policy.z_star / (1.0 - policy.t - policy.delta_t).powf(e);

    let (role, z) = if policy.delta_t == 0.0 || n <= n_low {
        (Role::AlwaysTaker, z_ct)
    } else if stays {
        (Role::Stayer, z_ct)
    } else if n <= n_high {
        (Role::Buncher, policy.z_star + eps_z)
    } else {
        // Target z_ct * z_star / (z_star + delta_z_star) = n (1-t-dt)^e.
        (Role::Shifter, n * (1.0 - policy.t - policy.delta_t).powf(e) + eps_z)
    };
    let y = y_pre + outcome_term(config.outcome_model, config.mu, z, z_ct)
        - config.lambda * tax_amount(policy, z)?;
    Ok(AgentDraw { z, y, z_ct, y_ct, role, delta: 0.0 })
}

fn relabelled_agent(
    config: &SimulationConfig,
    policy: &KinkPolicy,
    c: f64,
    n: f64,
    e: f64,
    y_pre: f64,
) -> Result<AgentDraw> {
    let q = relabel_forward(policy, c)?;
    let RelabelMap { z_reported, z_real, delta, role } = relabel_map(policy, c, n, e)?;
    // Counterfactual: linear low rate with misreporting at degree delta_ct.
    let a_ct = (1.0 - policy.t * (1.0 - q.delta_ct) - c * q.delta_ct * q.delta_ct / 2.0).powf(e);
    let z_rl_ct = n * a_ct;
    let z_ct = z_rl_ct * (1.0 - q.delta_ct);
    let y_ct = y_pre + outcome_term(config.outcome_model, config.mu, z_rl_ct, z_rl_ct)
        - config.lambda * policy.t * z_ct;
    // Outcome depends on real z, the payment on reported z.
    let y = y_pre + outcome_term(config.outcome_model, config.mu, z_real, z_rl_ct)
        - config.lambda * tax_amount(policy, z_reported)?;
    Ok(AgentDraw { z: z_reported, y, z_ct, y_ct, role, delta })
}

/// Saez closed form for the marginal buncher response at elasticity `e`;
/// 0 when there is no kink.
pub fn saez_delta_z(policy: &KinkPolicy, e: f64) -> f64 {
    if policy.delta_t == 0.0 {
        return 0.0;
    }
    let ratio = ((1.0 - policy.t) / (1.0 - policy.t - policy.delta_t)).powf(e);
    policy.z_star * (ratio - 1.0)
}

/// Brute-force truths from the tagged population (no estimation).
pub fn ground_truth(tagged: &[TaggedSample], config: &SimulationConfig, policy: &KinkPolicy) -> GroundTruth {
    let mut te_s = (0.0, 0.0);
    let mut te_b = (0.0, 0.0);
    let mut log_shift = (0.0, 0.0);
    let mut counts = [0usize; 4];
    for s in tagged {
        let w = s.sample.weight;
        match s.role {
            Role::AlwaysTaker | Role::NeverTaker => counts[0] += 1,
            Role::Buncher => {
                counts[1] += 1;
                te_b.0 += w * (s.sample.y - s.true_y_ct);
                te_b.1 += w;
            }
            Role::Shifter => {
                counts[2] += 1;
                te_s.0 += w * (s.sample.y - s.true_y_ct);
                te_s.1 += w;
                log_shift.0 += w * (s.true_z_ct / s.sample.z).ln();
                log_shift.1 += w;
            }
            Role::Stayer => counts[3] += 1,
        }
    }
    let (elasticity, delta_z_star) = match &config.elasticity {
        ElasticitySpec::Constant(e) => (*e, truth_delta_z(config, policy, *e)),
        ElasticitySpec::Groups(groups) => (
            groups.iter().map(|g| g.share * g.e).sum(),
            groups.iter().map(|g| g.share * truth_delta_z(config, policy, g.e)).sum(),
        ),
    };
    GroundTruth {
        delta_z_star,
        elasticity,
        mu: config.mu,
        lambda: config.lambda,
        te_shifter: if te_s.1 > 0.0 { te_s.0 / te_s.1 } else { f64::NAN },
        te_buncher: if te_b.1 > 0.0 { te_b.0 / te_b.1 } else { f64::NAN },
        excess_bunching: te_b.1,
        mean_log_shift: if log_shift.1 > 0.0 { log_shift.0 / log_shift.1 } else { 0.0 },
        n_always_takers: counts[0],
        n_bunchers: counts[1],
        n_shifters: counts[2],
        n_stayers: counts[3],
    }
}

/// Marginal response of the *reported* z: the Saez closed form, adjusted for
/// misreporting when a relabelling cost is active.
fn truth_delta_z(config: &SimulationConfig, policy: &KinkPolicy, e: f64) -> f64 {
    match config.relabel_cost {
        None => saez_delta_z(policy, e),
        Some(c) => {
            let q = match relabel_forward(policy, c) {
                Ok(q) => q,
                Err(_) => return f64::NAN,
            };
            let a_ct = (1.0 - policy.t * (1.0 - q.delta_ct) - c * q.delta_ct * q.delta_ct / 2.0).powf(e);
            let t_hi = policy.t + policy.delta_t;
            let a_sh = (1.0 - t_hi * (1.0 - q.delta_shifter) - c * q.delta_shifter * q.delta_shifter / 2.0).powf(e);
            policy.z_star * (a_ct * (1.0 - q.delta_ct)) / (a_sh * (1.0 - q.delta_shifter)) - policy.z_star
        }
    }
}

/// Strip the tags for feeding the estimators.
pub fn to_samples(tagged: &[TaggedSample]) -> Vec<AgentSample> {
    tagged.iter().map(|t| t.sample.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn policy() -> KinkPolicy {
        KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap()
    }

    #[test]
    fn counterfactual_choice_closed_form() {
        // n = 125, e = 0.5, t = 0.2 -> z_ct = 125 * 0.894427 = 111.803
        let z_ct = 125.0 * (1.0f64 - 0.2).powf(0.5);
        assert_relative_eq!(z_ct, 111.8034, epsilon = 1e-4);
    }

    #[test]
    fn roles_follow_ability_brackets() {
        let config = SimulationConfig::standard(2000, 7);
        let tagged = generate(&config, &policy()).unwrap();
        let n_low = 100.0 / 0.8f64.powf(0.5);
        let n_high = 100.0 / 0.5f64.powf(0.5);
        assert_relative_eq!(n_high, 141.4214, epsilon = 1e-4);
        for t in &tagged {
            match t.role {
                Role::AlwaysTaker => assert!(t.ability <= n_low + 1e-9),
                Role::Buncher => {
                    assert!(t.ability > n_low && t.ability <= n_high + 1e-9);
                    assert_relative_eq!(t.sample.z, 100.0);
                }
                Role::Shifter => assert!(t.ability > n_high - 1e-9),
                _ => panic!("unexpected role without stayers/relabelling"),
            }
        }
        let gt = ground_truth(&tagged, &config, &policy());
        assert_eq!(gt.n_always_takers + gt.n_bunchers + gt.n_shifters + gt.n_stayers, 2000);
        assert!(gt.n_bunchers > 0 && gt.n_shifters > 0 && gt.n_always_takers > 0);
    }

    #[test]
    fn shifter_ratio_is_exact() {
        let config = SimulationConfig::standard(5000, 11);
        let tagged = generate(&config, &policy()).unwrap();
        let ratio = (0.8f64 / 0.5).powf(0.5);
        for t in tagged.iter().filter(|t| t.role == Role::Shifter) {
            // z_ct / z = (z* + delta_z*) / z* exactly, up to float rounding of
            // the two closed forms.
            assert_relative_eq!(t.true_z_ct / t.sample.z, ratio, epsilon = 1e-12);
        }
    }

    #[test]
    fn marginal_buncher_approaches_the_closed_form() {
        let config = SimulationConfig::standard(100_000, 3);
        let tagged = generate(&config, &policy()).unwrap();
        let top = tagged
            .iter()
            .filter(|t| t.role == Role::Buncher)
            .map(|t| t.true_z_ct)
            .fold(0.0f64, f64::max);
        assert_relative_eq!(top, 126.4911, epsilon = 0.05);
    }

    #[test]
    fn zero_kink_means_no_response() {
        let mut config = SimulationConfig::standard(1000, 5);
        config.mu = 0.0;
        config.lambda = 0.0;
        let flat = KinkPolicy::sharp(100.0, 0.2, 0.0).unwrap();
        let tagged = generate(&config, &flat).unwrap();
        for t in &tagged {
            assert_eq!(t.role, Role::AlwaysTaker);
            assert_relative_eq!(t.sample.z, t.true_z_ct);
            assert_relative_eq!(t.sample.y, t.true_y_ct);
        }
        let gt = ground_truth(&tagged, &config, &flat);
        assert_eq!(gt.delta_z_star, 0.0);
    }

    #[test]
    fn determinism_is_bit_exact() {
        let config = SimulationConfig::standard(500, 42);
        let a = generate(&config, &policy()).unwrap();
        let b = generate(&config, &policy()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_closed_form() {
        let config = SimulationConfig::standard(10, 1);
        let tagged = generate(&config, &policy()).unwrap();
        let gt = ground_truth(&tagged, &config, &policy());
        assert_relative_eq!(gt.delta_z_star, 26.4911, epsilon = 1e-4);
    }

    #[test]
    fn buncher_te_is_definitional() {
        let config = SimulationConfig::standard(20_000, 9);
        let tagged = generate(&config, &policy()).unwrap();
        let gt = ground_truth(&tagged, &config, &policy());
        let (sum, w): (f64, f64) = tagged
            .iter()
            .filter(|t| t.role == Role::Buncher)
            .map(|t| (t.sample.y - t.true_y_ct, t.sample.weight))
            .fold((0.0, 0.0), |(s, w), (d, wi)| (s + d * wi, w + wi));
        assert_relative_eq!(gt.te_buncher, sum / w, epsilon = 1e-12);
    }

    #[test]
    fn stayers_keep_counterfactual_position() {
        let mut config = SimulationConfig::standard(5000, 13);
        config.stayer_share = 0.3;
        let tagged = generate(&config, &policy()).unwrap();
        let gt = ground_truth(&tagged, &config, &policy());
        assert!(gt.n_stayers > 0);
        for t in tagged.iter().filter(|t| t.role == Role::Stayer) {
            assert_relative_eq!(t.sample.z, t.true_z_ct);
            assert!(t.true_z_ct > 100.0);
        }
        // Realized stayer share among responders close to the configured one.
        let responders = gt.n_bunchers + gt.n_shifters + gt.n_stayers;
        let share = gt.n_stayers as f64 / responders as f64;
        assert!((share - 0.3).abs() < 0.03, "share {share}");
    }

    #[test]
    fn group_draws_follow_shares() {
        let mut config = SimulationConfig::standard(20_000, 17);
        config.elasticity = ElasticitySpec::Groups(vec![
            GroupSpec { label: "low".into(), e: 0.3, share: 0.5 },
            GroupSpec { label: "high".into(), e: 0.7, share: 0.5 },
        ]);
        let tagged = generate(&config, &policy()).unwrap();
        let low = tagged.iter().filter(|t| t.sample.group.as_deref() == Some("low")).count();
        assert!((low as f64 / 20_000.0 - 0.5).abs() < 0.02);
        let gt = ground_truth(&tagged, &config, &policy());
        assert_relative_eq!(gt.elasticity, 0.5);
    }
}
