//! Flat key = value configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Unknown keys are an error so typos surface instead of silently
//! falling back to defaults.

use std::collections::BTreeMap;

use bunchkit_core::simulator::{AbilityDist, ElasticitySpec, GroupSpec, OutcomeModel, SimulationConfig};
use bunchkit_core::{CounterfactualSide, EstimationConfig, KinkPolicy, LevelConvention};

use crate::CliError;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::input(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take_parse<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| CliError::input(format!("key `{key}`: cannot parse `{v}`"))),
    }
}

fn reject_leftovers(map: &BTreeMap<String, String>, context: &str) -> Result<(), CliError> {
    if let Some(key) = map.keys().next() {
        return Err(CliError::input(format!("unknown {context} key `{key}`")));
    }
    Ok(())
}

/// Policy keys: z_star, t, delta_t, u1, u2. Consumes them from `map`.
pub fn policy_from_kv(map: &mut BTreeMap<String, String>) -> Result<KinkPolicy, CliError> {
    let z_star = take_parse(map, "z_star")?.unwrap_or(100.0);
    let t = take_parse(map, "t")?.unwrap_or(0.2);
    let delta_t = take_parse(map, "delta_t")?.unwrap_or(0.3);
    let u1 = take_parse(map, "u1")?.unwrap_or(0.0);
    let u2 = take_parse(map, "u2")?.unwrap_or(0.0);
    KinkPolicy::new(z_star, t, delta_t, u1, u2).map_err(CliError::from)
}

/// `dist(arg, ...)` shorthand: lognormal(m,s), uniform(lo,hi),
/// exponential(rate), triangular(lo,hi).
fn parse_ability(v: &str) -> Result<AbilityDist, CliError> {
    let bad = || CliError::input(format!("ability: cannot parse `{v}`"));
    let (name, rest) = v.split_once('(').ok_or_else(bad)?;
    let args: Vec<f64> = rest
        .trim_end_matches(')')
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match (name.trim(), args.as_slice()) {
        ("lognormal", [location, scale]) => Ok(AbilityDist::LogNormal { location: *location, scale: *scale }),
        ("uniform", [lo, hi]) => Ok(AbilityDist::Uniform { lo: *lo, hi: *hi }),
        ("exponential", [rate]) => Ok(AbilityDist::Exponential { rate: *rate }),
        ("triangular", [lo, hi]) => Ok(AbilityDist::Triangular { lo: *lo, hi: *hi }),
        _ => Err(bad()),
    }
}

/// Either a single elasticity (`0.5`) or comma-separated `label:e:share`
/// groups (`low:0.3:0.5,high:0.7:0.5`).
fn parse_elasticity(v: &str) -> Result<ElasticitySpec, CliError> {
    if let Ok(e) = v.parse::<f64>() {
        return Ok(ElasticitySpec::Constant(e));
    }
    let mut groups = Vec::new();
    for part in v.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        let [label, e, share] = fields.as_slice() else {
            return Err(CliError::input(format!("elasticity: expected `label:e:share`, got `{part}`")));
        };
        groups.push(GroupSpec {
            label: label.to_string(),
            e: e.parse().map_err(|_| CliError::input(format!("elasticity: bad e in `{part}`")))?,
            share: share.parse().map_err(|_| CliError::input(format!("elasticity: bad share in `{part}`")))?,
        });
    }
    Ok(ElasticitySpec::Groups(groups))
}

/// Simulation config file: simulation keys plus the policy block.
pub fn simulation_from_kv(text: &str) -> Result<(SimulationConfig, KinkPolicy), CliError> {
    let mut map = parse_kv(text)?;
    let policy = policy_from_kv(&mut map)?;
    let mut sim = SimulationConfig::standard(
        take_parse(&mut map, "n_agents")?.unwrap_or(200_000),
        take_parse(&mut map, "seed")?.unwrap_or(0),
    );
    if let Some(v) = map.remove("ability") {
        sim.ability = parse_ability(&v)?;
    }
    if let Some(v) = map.remove("elasticity") {
        sim.elasticity = parse_elasticity(&v)?;
    }
    if let Some(mu) = take_parse(&mut map, "mu")? {
        sim.mu = mu;
    }
    if let Some(lambda) = take_parse(&mut map, "lambda")? {
        sim.lambda = lambda;
    }
    if let Some(v) = map.remove("y_pre_coeffs") {
        sim.y_pre_coeffs = v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::input(format!("y_pre_coeffs: cannot parse `{v}`")))?;
    }
    if let Some(v) = map.remove("outcome_model") {
        sim.outcome_model = match v.as_str() {
            "log" => OutcomeModel::Log,
            "linear_share" => OutcomeModel::LinearShare,
            other => {
                return Err(CliError::input(format!(
                    "outcome_model must be log or linear_share, got `{other}`"
                )))
            }
        };
    }
    if let Some(s) = take_parse(&mut map, "stayer_share")? {
        sim.stayer_share = s;
    }
    if let Some(s) = take_parse(&mut map, "diffusion_sigma")? {
        sim.diffusion_sigma = s;
    }
    if let Some(c) = take_parse(&mut map, "relabel_cost")? {
        sim.relabel_cost = Some(c);
    }
    if let Some(s) = take_parse(&mut map, "outcome_noise_sigma")? {
        sim.outcome_noise_sigma = s;
    }
    reject_leftovers(&map, "simulation")?;
    sim.validate()?;
    Ok((sim, policy))
}

/// Estimation config file: keys mirror `EstimationConfig`.
pub fn estimation_from_kv(text: &str) -> Result<EstimationConfig, CliError> {
    let mut map = parse_kv(text)?;
    let mut cfg = EstimationConfig::default();
    if let Some(v) = take_parse(&mut map, "poly_order_density")? {
        cfg.poly_order_density = v;
    }
    if let Some(v) = take_parse(&mut map, "poly_order_outcome")? {
        cfg.poly_order_outcome = v;
    }
    if let Some(v) = take_parse(&mut map, "max_iterations")? {
        cfg.max_iterations = v;
    }
    if let Some(v) = take_parse(&mut map, "delta_z_tolerance")? {
        cfg.delta_z_tolerance = Some(v);
    }
    if let Some(v) = take_parse(&mut map, "bin_width")? {
        cfg.bin_width = Some(v);
    }
    if let Some(v) = map.remove("reference_multiples") {
        cfg.reference_multiples = v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::input(format!("reference_multiples: cannot parse `{v}`")))?;
    }
    if let Some(v) = map.remove("counterfactual_side") {
        cfg.counterfactual_side = match v.as_str() {
            "low_rate" => CounterfactualSide::LowRate,
            "high_rate" => CounterfactualSide::HighRate,
            other => {
                return Err(CliError::input(format!(
                    "counterfactual_side must be low_rate or high_rate, got `{other}`"
                )))
            }
        };
    }
    if let Some(v) = map.remove("outcome_level_convention") {
        cfg.outcome_level_convention = match v.as_str() {
            "linear_share" => LevelConvention::LinearShare,
            "log_share" => LevelConvention::LogShare,
            other => {
                return Err(CliError::input(format!(
                    "outcome_level_convention must be linear_share or log_share, got `{other}`"
                )))
            }
        };
    }
    if let Some(v) = take_parse(&mut map, "excess_mass_floor")? {
        cfg.excess_mass_floor = v;
    }
    if let Some(v) = take_parse(&mut map, "fit_span_bins")? {
        cfg.fit_span_bins = v;
    }
    if let Some(v) = take_parse(&mut map, "outcome_span_bins")? {
        cfg.outcome_span_bins = v;
    }
    reject_leftovers(&map, "estimation")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_are_ignored() {
        let map = parse_kv("# hello\n\n a = 1 # inline\nb= two\n").unwrap();
        assert_eq!(map.get("a").unwrap(), "1");
        assert_eq!(map.get("b").unwrap(), "two");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(estimation_from_kv("polyy = 3\n").is_err());
        assert!(simulation_from_kv("n_agent = 10\n").is_err());
    }

    #[test]
    fn group_elasticities_parse() {
        let (sim, policy) = simulation_from_kv(
            "n_agents = 10\nelasticity = low:0.3:0.5,high:0.7:0.5\nability = exponential(0.0125)\nz_star = 80\n",
        )
        .unwrap();
        assert_eq!(policy.z_star, 80.0);
        match sim.elasticity {
            ElasticitySpec::Groups(g) => assert_eq!(g.len(), 2),
            _ => panic!("expected groups"),
        }
    }
}
