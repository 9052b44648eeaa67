//! Artifact files: full-precision CSV tables plus a JSON report. Floats are
//! written with 17 significant digits so a re-read reproduces them exactly.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DVector;
use serde_json::{json, Map, Value};

use teamopt::{SolveReport, SufficiencyCertificate};

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// `trajectories.csv`: one row per node with the state, the costate, and the
/// per-decision-maker control blocks.
pub fn write_trajectories(
    dir: &Path,
    times: &[f64],
    xs: &[DVector<f64>],
    psis: &[DVector<f64>],
    us: &[DVector<f64>],
    dm_dims: &[usize],
) -> Result<()> {
    let n = xs[0].len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("psi_{i}")));
    for (i, &dim) in dm_dims.iter().enumerate() {
        header.extend((1..=dim).map(move |c| format!("u{}_{c}", i + 1)));
    }

    let mut out = String::with_capacity(64 * times.len());
    out.push_str(&header.join(","));
    out.push('\n');
    for k in 0..times.len() {
        let mut row = Vec::with_capacity(header.len());
        row.push(fmt(times[k]));
        row.extend(xs[k].iter().map(|&v| fmt(v)));
        row.extend(psis[k].iter().map(|&v| fmt(v)));
        row.extend(us[k].iter().map(|&v| fmt(v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let path = dir.join("trajectories.csv");
    fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))
}

/// `residuals.csv`: per-node magnitude of each decision maker's projected
/// control gradient.
pub fn write_residuals(dir: &Path, times: &[f64], per_dm: &[Vec<f64>]) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=per_dm.len()).map(|i| format!("rho_{i}")));

    let mut out = String::with_capacity(32 * times.len());
    out.push_str(&header.join(","));
    out.push('\n');
    for k in 0..times.len() {
        let mut row = Vec::with_capacity(header.len());
        row.push(fmt(times[k]));
        row.extend(per_dm.iter().map(|r| fmt(r[k])));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let path = dir.join("residuals.csv");
    fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))
}

fn certificate_json(cert: &SufficiencyCertificate) -> Value {
    json!({
        "holds": cert.holds,
        "hamiltonian_defect": cert.hamiltonian_defect,
        "terminal_defect": cert.terminal_defect,
        "convexity_samples": cert.convexity_samples,
        "perturbation_samples": cert.perturbation_samples,
        "min_cost_margin": cert.min_cost_margin,
    })
}

/// `report.json`. Keys are emitted sorted, so identical runs produce
/// byte-identical files apart from the timestamp field.
#[allow(clippy::too_many_arguments)]
pub fn write_report(
    dir: &Path,
    config_echo: Value,
    problem_kind: &str,
    solver: &str,
    grid_steps: usize,
    horizon: Option<f64>,
    report: Option<&SolveReport>,
    divergence: Option<String>,
) -> Result<()> {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);

    let mut root = Map::new();
    root.insert("tool".into(), json!("teamopt"));
    root.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    root.insert("generated_at_unix".into(), json!(timestamp));
    root.insert("config".into(), config_echo);
    root.insert("problem_kind".into(), json!(problem_kind));
    root.insert("solver".into(), json!(solver));
    root.insert(
        "grid".into(),
        json!({ "steps": grid_steps, "horizon": horizon }),
    );
    match report {
        Some(r) => {
            root.insert("cost".into(), json!(r.cost));
            root.insert("residual".into(), json!(r.residual));
            root.insert("iterations".into(), json!(r.iterations));
            root.insert("converged".into(), json!(r.converged));
            root.insert(
                "sufficiency".into(),
                r.sufficiency
                    .as_ref()
                    .map(certificate_json)
                    .unwrap_or(Value::Null),
            );
        }
        None => {
            root.insert("cost".into(), Value::Null);
            root.insert("residual".into(), Value::Null);
            root.insert("iterations".into(), Value::Null);
            root.insert("converged".into(), json!(false));
            root.insert("sufficiency".into(), Value::Null);
        }
    }
    root.insert(
        "divergence".into(),
        divergence.map(Value::String).unwrap_or(Value::Null),
    );

    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&Value::Object(root))?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}
