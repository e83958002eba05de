//! Agent CSV ingestion and plot-data export.
//!
//! Input schema: header `agent_id,z,y,group` (the group column may be
//! omitted), one row per agent, UTF-8, comma-separated. Schema violations are
//! reported with their row numbers.

use std::path::Path;

use bunchkit_core::AgentSample;

use crate::jsonfmt;
use crate::CliError;

pub fn read_agents(path: &Path) -> Result<Vec<AgentSample>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(format!("cannot read header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_group = match cols.as_slice() {
        ["agent_id", "z", "y", "group"] => true,
        ["agent_id", "z", "y"] => false,
        other => {
            return Err(CliError::input(format!(
                "header must be `agent_id,z,y,group` (group optional), got `{}`",
                other.join(",")
            )))
        }
    };

    let mut samples = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                bad_rows.push(row);
                continue;
            }
        };
        let z = record.get(1).and_then(|s| s.parse::<f64>().ok());
        let y = record.get(2).and_then(|s| s.parse::<f64>().ok());
        match (z, y) {
            (Some(z), Some(y)) => {
                let group = if has_group {
                    record.get(3).filter(|s| !s.is_empty()).map(str::to_string)
                } else {
                    None
                };
                samples.push(AgentSample { z, y, group, weight: 1.0 });
            }
            _ => bad_rows.push(row),
        }
        if bad_rows.len() > 20 {
            break;
        }
    }
    if !bad_rows.is_empty() {
        return Err(CliError::input(format!(
            "rows with unparseable z/y: {}{}",
            bad_rows.iter().take(20).map(|r| r.to_string()).collect::<Vec<_>>().join(", "),
            if bad_rows.len() > 20 { ", ..." } else { "" }
        )));
    }
    Ok(samples)
}

/// Write a plot CSV: fixed header, one row per bin, floats at 15 significant
/// digits with `NaN` marking bins outside an estimate's span.
pub fn write_bins(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| format!("{v:.14e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, format!("{body}\n"))
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// The run manifest: a sidecar with everything needed to reproduce the run.
/// It is the one file allowed to contain a timestamp, so the data outputs
/// stay byte-identical across reruns; they reference it by name instead of
/// embedding it.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    input: &str,
    policy: Option<&bunchkit_core::KinkPolicy>,
    config_echo: &str,
    seed: Option<u64>,
    outputs: &[&str],
) -> Result<(), CliError> {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut obj = jsonfmt::Obj::new()
        .str("command", command)
        .str("input", input)
        .str("config_echo", config_echo)
        .int("timestamp_unix", timestamp)
        .str("software_version", env!("CARGO_PKG_VERSION"));
    if let Some(p) = policy {
        obj = obj.raw(
            "policy",
            jsonfmt::Obj::new()
                .num("z_star", p.z_star)
                .num("t", p.t)
                .num("delta_t", p.delta_t)
                .num("u1", p.u1)
                .num("u2", p.u2)
                .render(),
        );
    }
    if let Some(s) = seed {
        obj = obj.int("seed", s);
    }
    obj = obj.raw("outputs", jsonfmt::array_str(outputs.iter().copied()));
    write_json(&out_dir.join("manifest.json"), &obj.render())
}
