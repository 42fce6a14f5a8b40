//! Result files. All CSV output uses `.` decimals and LF line endings.

use std::fs;
use std::path::Path;

use dpgne::consensus::TrackingRecord;
use serde::Serialize;

use crate::error::{ExperimentError, Result};
use crate::runner::{ArmResult, Study, TrialRecord, truth_to_text};

pub const INSTANCE_FILE: &str = "instance.game";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

pub fn write_trial_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    if records.is_empty() {
        // Header only, so an empty trace still parses.
        let mut w = writer(path)?;
        w.write_record([
            "k",
            "dist_to_gne",
            "kkt_residual",
            "consensus_err_sigma",
            "consensus_err_z",
            "consensus_err_y",
            "eps_spent",
        ])?;
        return w.flush().map_err(|e| ExperimentError::io(path, e));
    }
    write_rows(path, records)
}

#[derive(Serialize)]
struct AggregateRow {
    k: usize,
    mean_err: f64,
    var_err: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    trial: usize,
    status: &'a str,
    iterations: usize,
    initial_error: f64,
    final_error: f64,
    final_kkt: f64,
    eps_final: f64,
    weighted_estimate_error: f64,
    clamp_hits: u64,
    failure: &'a str,
}

/// `<arm>/aggregate.csv` and `<arm>/summary.csv`.
pub fn write_arm(dir: &Path, result: &ArmResult) -> Result<()> {
    let agg = &result.aggregate;
    write_rows(
        &dir.join("aggregate.csv"),
        agg.mean.iter().zip(&agg.variance).enumerate().map(|(k, (&mean_err, &var_err))| AggregateRow {
            k,
            mean_err,
            var_err,
        }),
    )?;
    write_rows(
        &dir.join("summary.csv"),
        result.summaries.iter().map(|s| SummaryRow {
            trial: s.trial,
            status: if s.failure.is_some() { "failed" } else { "ok" },
            iterations: s.iterations,
            initial_error: s.initial_error,
            final_error: s.final_error,
            final_kkt: s.final_kkt,
            eps_final: s.eps_final,
            weighted_estimate_error: s.weighted_estimate_error,
            clamp_hits: s.clamp_hits,
            failure: s.failure.as_deref().unwrap_or(""),
        }),
    )
}

/// Top-level `aggregate.csv` with `<arm>_mean_err, <arm>_var_err` columns per arm.
pub fn write_combined_aggregate(path: &Path, results: &[ArmResult]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["k".to_string()];
    for r in results {
        header.push(format!("{}_mean_err", r.kind));
        header.push(format!("{}_var_err", r.kind));
    }
    w.write_record(&header)?;
    let horizon = results.first().map_or(0, |r| r.aggregate.mean.len());
    for k in 0..horizon {
        let mut row = vec![k.to_string()];
        for r in results {
            row.push(r.aggregate.mean[k].to_string());
            row.push(r.aggregate.variance[k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

/// Derived quantities that are not configuration keys.
fn study_report(study: &Study) -> String {
    let mut out = String::new();
    out.push_str(&format!("players {}\n", study.instance.game.players()));
    out.push_str(&format!("dimension {}\n", study.instance.game.dimension()));
    out.push_str(&format!("constraints {}\n", study.instance.game.constraints()));
    out.push_str(&format!("graph_rho2 {:e}\n", study.graph.rho2()));
    out.push_str(&format!("truth_residual {:e}\n", study.truth.residual));
    out.push_str(&format!("truth_iterations {}\n", study.truth.iterations));
    if let Some(c) = study.sensitivity {
        out.push_str(&format!("sensitivity {c:e}\n"));
    }
    for arm in &study.arms {
        out.push_str(&format!("arm {} schedules {}\n", arm.kind, arm.schedules));
        match arm.epsilon {
            Some(eps) => out.push_str(&format!("arm {} epsilon {eps:e}\n", arm.kind)),
            None => out.push_str(&format!("arm {} epsilon unbounded\n", arm.kind)),
        }
    }
    out
}

/// Writes the resolved configuration, the generated instance, the graph and
/// a report of derived quantities.
pub fn write_study_files(out: &Path, study: &Study) -> Result<()> {
    write_text(&out.join(RESOLVED_CONFIG_FILE), &study.config.to_toml()?)?;
    if study.instance.path.is_none() {
        write_text(&out.join(INSTANCE_FILE), &study.instance.text)?;
    }
    write_text(&out.join("graph.edges"), &study.graph.to_edge_list())?;
    write_text(&out.join("ground_truth.txt"), &truth_to_text(&study.truth))?;
    write_text(&out.join("study.txt"), &study_report(study))
}

pub fn write_tracking_csv(path: &Path, records: &[TrackingRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        k: u64,
        sum_sq_err: f64,
        max_err: f64,
        mean_vs_target: f64,
        eps_spent: f64,
    }
    write_rows(
        path,
        records.iter().map(|r| Row {
            k: r.k,
            sum_sq_err: r.sum_sq_err,
            max_err: r.max_err,
            mean_vs_target: r.mean_vs_target,
            eps_spent: r.eps_spent,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_csv_is_strict() {
        let dir = std::env::temp_dir().join(format!("dpgne-export-{}", std::process::id()));
        let path = dir.join("t.csv");
        let rec = TrialRecord {
            k: 0,
            dist_to_gne: 1.5e-12,
            kkt_residual: 2.0,
            consensus_err_sigma: 0.0,
            consensus_err_z: 0.25,
            consensus_err_y: 3.0,
            eps_spent: f64::INFINITY,
        };
        write_trial_csv(&path, &[rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::remove_dir_all(&dir).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,dist_to_gne,kkt_residual,consensus_err_sigma,consensus_err_z,consensus_err_y,eps_spent"
        );
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        let parsed: Vec<f64> = fields.iter().map(|f| f.parse().unwrap()).collect();
        assert_eq!(parsed[1], 1.5e-12);
        assert_eq!(parsed[6], f64::INFINITY);
    }
}
