//! `bunchkit simulate`: synthetic agents plus a ground-truth sidecar.
//!
//! Outputs, all in `--out`:
//! - `agents.csv` — header exactly `agent_id,z,y,group`; one row per agent;
//!   `group` is empty without elasticity heterogeneity;
//! - `truth.json` — population ground truths and the per-agent role tags
//!   (always_taker / buncher / shifter / stayer / never_taker);
//! - `manifest.json` — run provenance (the only file with a timestamp).

use std::path::PathBuf;

use bunchkit_core::simulator::{self, Role};

use crate::csvio;
use crate::jsonfmt::{self, Obj};
use crate::kv;
use crate::CliError;

#[derive(clap::Args)]
pub struct SimulateArgs {
    /// Simulation config file, flat `key = value` lines (keys mirror the
    /// simulator config plus the policy block z_star/t/delta_t/u1/u2)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    /// Override the config file's number of agents
    #[arg(long)]
    pub n_agents: Option<usize>,

    /// Override the config file's RNG seed
    #[arg(long)]
    pub seed: Option<u64>,
}

fn role_tag(role: Role) -> &'static str {
    match role {
        Role::AlwaysTaker => "always_taker",
        Role::Buncher => "buncher",
        Role::Shifter => "shifter",
        Role::Stayer => "stayer",
        Role::NeverTaker => "never_taker",
    }
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let config_text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let (mut sim, policy) = kv::simulation_from_kv(&config_text)?;
    if let Some(n) = args.n_agents {
        sim.n_agents = n;
    }
    if let Some(s) = args.seed {
        sim.seed = s;
    }

    std::fs::create_dir_all(&args.out)?;
    let tagged = simulator::generate(&sim, &policy)?;
    let truth = simulator::ground_truth(&tagged, &sim, &policy);

    let mut csv = String::from("agent_id,z,y,group\n");
    for (i, t) in tagged.iter().enumerate() {
        let group = t.sample.group.as_deref().unwrap_or("");
        csv.push_str(&format!("{i},{:.14e},{:.14e},{group}\n", t.sample.z, t.sample.y));
    }
    std::fs::write(args.out.join("agents.csv"), csv)?;

    let nan_null = |x: f64| if x.is_finite() { Some(x) } else { None };
    let truth_json = Obj::new()
        .num("delta_z_star", truth.delta_z_star)
        .num("excess_bunching", truth.excess_bunching)
        .num("elasticity", truth.elasticity)
        .num("mu", truth.mu)
        .num("lambda", truth.lambda)
        .opt_num("te_shifter", nan_null(truth.te_shifter))
        .opt_num("te_buncher", nan_null(truth.te_buncher))
        .opt_num("mean_log_shift", nan_null(truth.mean_log_shift))
        .int("n_always_takers", truth.n_always_takers as u64)
        .int("n_bunchers", truth.n_bunchers as u64)
        .int("n_shifters", truth.n_shifters as u64)
        .int("n_stayers", truth.n_stayers as u64)
        .raw("roles", jsonfmt::array_str(tagged.iter().map(|t| role_tag(t.role))))
        .str("manifest", "manifest.json")
        .render();
    csvio::write_json(&args.out.join("truth.json"), &truth_json)?;

    csvio::write_manifest(
        &args.out,
        "simulate",
        args.config.as_ref().map_or("<defaults>", |p| p.to_str().unwrap_or("<config>")),
        Some(&policy),
        &config_text,
        Some(sim.seed),
        &["agents.csv", "truth.json"],
    )
}
