//! Run report data model and the cross-run aggregation command.
//!
//! A report is written once per improvement/refinement run as `report.json`.
//! Rerunning with the same seeds reproduces it byte for byte except for the
//! fields holding wall-clock measurements, which all carry a `seconds`
//! suffix in their names so downstream tooling can strip them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

/// Gap tolerance against declared optima, in percent units.
pub const GAP_TOL_PERCENT: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub n: usize,
    /// Minimum over all restarts, exact (no re-rounding).
    pub best_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opt_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_percent: Option<f64>,
    /// Refinement mode: cheapest supplied starting tour actually used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_cost: Option<f64>,
    /// Restart that found the best tour (first on ties).
    pub best_restart: usize,
    /// Step within that restart at which the best first appeared.
    pub best_step: usize,
    /// Search-only time summed over this instance's restarts.
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnytimePoint {
    pub step: usize,
    pub mean_best_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gap_percent: Option<f64>,
    /// Mean wall-clock time at which this step was reached.
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_cost: f64,
    /// Population standard deviation over instances.
    pub std_cost: f64,
    /// Present only when every instance carries a known optimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gap_percent: Option<f64>,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub dataset: String,
    /// None means the per-instance default of 10n steps.
    pub budget: Option<usize>,
    pub restarts: usize,
    pub decode: String,
    pub seed: u64,
    pub refinement: bool,
    pub instances: Vec<InstanceResult>,
    pub aggregate: Aggregate,
    /// Best-over-restarts curve averaged over instances; shorter instances
    /// contribute their final value past their own budget.
    pub anytime: Vec<AnytimePoint>,
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

impl Report {
    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self).context("serializing report")?;
        fs::write(path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> anyhow::Result<Report> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Identity of the evaluated data, used to refuse cross-dataset merges.
    fn dataset_signature(&self) -> Vec<(String, usize)> {
        self.instances.iter().map(|r| (r.id.clone(), r.n)).collect()
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    match v {
        // Gaps may sit a few ulps below zero (within tolerance); showing
        // "-0.0000" for those helps nobody.
        Some(x) => format!("{:.4}", if (-GAP_TOL_PERCENT..0.0).contains(&x) { 0.0 } else { x }),
        None => String::from("-"),
    }
}

/// Markdown summary table over a set of runs: one row per run plus a mean
/// row when there are several.
pub fn summary_table(labels: &[String], reports: &[Report]) -> String {
    let mut md = String::new();
    md.push_str("| Run | Method | Restarts | Mean Cost | Mean Gap (%) | Mean Time (s) |\n");
    md.push_str("|---|---|---:|---:|---:|---:|\n");
    for (label, r) in labels.iter().zip(reports) {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {} | {:.3} |",
            label,
            r.method,
            r.restarts,
            r.aggregate.mean_cost,
            fmt_opt(r.aggregate.mean_gap_percent),
            r.aggregate.mean_seconds,
        );
    }
    if reports.len() > 1 {
        let mean_cost = mean(reports.iter().map(|r| r.aggregate.mean_cost));
        let gaps: Vec<f64> =
            reports.iter().filter_map(|r| r.aggregate.mean_gap_percent).collect();
        let mean_gap = if gaps.len() == reports.len() {
            Some(mean(gaps.iter().copied()))
        } else {
            None
        };
        let mean_secs = mean(reports.iter().map(|r| r.aggregate.mean_seconds));
        let _ = writeln!(
            md,
            "| mean | - | - | {mean_cost:.4} | {} | {mean_secs:.3} |",
            fmt_opt(mean_gap),
        );
    }
    md
}

fn anytime_csv(labels: &[String], reports: &[Report], by_seconds: bool) -> String {
    let mut csv = String::new();
    if by_seconds {
        csv.push_str("run,method,mean_seconds,mean_gap_percent,mean_best_cost\n");
    } else {
        csv.push_str("run,method,step,mean_best_cost,mean_gap_percent,mean_seconds\n");
    }
    for (label, r) in labels.iter().zip(reports) {
        for p in &r.anytime {
            let gap = p.mean_gap_percent.map(|g| g.to_string()).unwrap_or_default();
            if by_seconds {
                let _ = writeln!(
                    csv,
                    "{label},{},{},{gap},{}",
                    r.method, p.mean_seconds, p.mean_best_cost
                );
            } else {
                let _ = writeln!(
                    csv,
                    "{label},{},{},{},{gap},{}",
                    r.method, p.step, p.mean_best_cost, p.mean_seconds
                );
            }
        }
    }
    csv
}

/// The `report` subcommand: merge the reports of several run directories
/// into plot-ready CSVs and one markdown table.
pub fn merge_runs(run_dirs: &[std::path::PathBuf], out_dir: &Path) -> anyhow::Result<String> {
    let mut labels = Vec::new();
    let mut reports = Vec::new();
    for dir in run_dirs {
        let report = Report::read_json(&dir.join("report.json"))?;
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        labels.push(label);
        reports.push(report);
    }
    let signature = reports[0].dataset_signature();
    for (label, r) in labels.iter().zip(&reports).skip(1) {
        if r.dataset_signature() != signature {
            bail!(
                "run `{label}` was evaluated on a different dataset than `{}`; \
                 refusing to merge mixed datasets",
                labels[0]
            );
        }
    }

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("gap_vs_step.csv"), anytime_csv(&labels, &reports, false))?;
    fs::write(out_dir.join("gap_vs_seconds.csv"), anytime_csv(&labels, &reports, true))?;
    let table = summary_table(&labels, &reports);
    fs::write(out_dir.join("table.md"), &table)?;
    Ok(table)
}
