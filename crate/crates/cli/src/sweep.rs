//! Cartesian sweeps over manifest fields.
//!
//! Writes `sweep.csv` (one row per point and trial, schema [`SWEEP_COLUMNS`]),
//! `summary.csv` (one row per point) and, when rounds are swept,
//! `min_rounds.csv` with the smallest round count that recovered `P` on every
//! trial. Each point's manifest is saved under `points/` so any row can be
//! re-run from its manifest and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use disagg::attack::Metrics;
use disagg::pipeline::run_trial;
use disagg::solver::ColumnStatus;
use rayon::prelude::*;

use crate::commands::apply_flags;
use crate::manifest::{resolve_axis, Manifest};
use crate::Common;

/// Column set of `sweep.csv`. Changing it is a format change.
pub const SWEEP_COLUMNS: &[&str] = &[
    "point",
    "trial",
    "seed",
    "manifest_hash",
    "axes",
    "num_users",
    "num_rounds",
    "gradient_dim",
    "granularity",
    "kept_fraction",
    "count_noise_sigma",
    "column_accuracy",
    "matrix_exact",
    "correct_columns",
    "unverified_matches",
    "never_participating",
    "grad_rel_error",
    "aggregate_rank",
    "structural_failure",
    "exact_unique",
    "exact_multiple",
    "optimal",
    "optimal_multiple",
    "optimal_uncertified",
    "timeout_incumbent",
    "infeasible",
    "mean_solve_ms",
    "min_solve_ms",
    "max_solve_ms",
    "total_nodes",
];

pub const SUMMARY_COLUMNS: &[&str] =
    &["point", "axes", "trials", "mean_accuracy", "exact_trials", "exact_rate", "structural_failures", "mean_solve_ms", "max_solve_ms"];

struct Job {
    point: usize,
    trial: usize,
    seed: u64,
    manifest: Manifest,
    axes: String,
}

fn axes_label(point: &[(String, toml::Value)]) -> String {
    point.iter().map(|(k, v)| format!("{}={v}", resolve_axis(k))).collect::<Vec<_>>().join(";")
}

fn row(job: &Job, hash: &str, m: &Metrics) -> Vec<String> {
    let s = &job.manifest.simulation;
    let a = &job.manifest.analytics;
    let count = |st: ColumnStatus| m.status_counts.get(st.as_str()).copied().unwrap_or(0).to_string();
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:e}"));
    vec![
        job.point.to_string(),
        job.trial.to_string(),
        job.seed.to_string(),
        hash.to_string(),
        job.axes.clone(),
        s.num_users.to_string(),
        s.num_rounds.to_string(),
        s.gradient_dim.to_string(),
        a.granularity.to_string(),
        a.kept_fraction.to_string(),
        a.count_noise_sigma.to_string(),
        format!("{:.6}", m.column_accuracy),
        m.matrix_exact.to_string(),
        m.correct_columns.to_string(),
        m.unverified_matches.to_string(),
        m.never_participating.len().to_string(),
        opt(m.grad_rel_error),
        m.aggregate_rank.to_string(),
        m.structural_failure.is_some().to_string(),
        count(ColumnStatus::ExactUnique),
        count(ColumnStatus::ExactMultiple),
        count(ColumnStatus::Optimal),
        count(ColumnStatus::OptimalMultiple),
        count(ColumnStatus::OptimalUncertified),
        count(ColumnStatus::TimeoutIncumbent),
        count(ColumnStatus::Infeasible),
        format!("{:.3}", m.solve_time.mean_ms),
        format!("{:.3}", m.solve_time.min_ms),
        format!("{:.3}", m.solve_time.max_ms),
        m.total_nodes.to_string(),
    ]
}

pub fn run(c: &Common) -> Result<ExitCode> {
    let path = c.manifest.as_deref().context("sweep needs --manifest")?;
    let mut base = Manifest::load(path)?;
    apply_flags(&mut base, c);
    let out = c.out.clone().or_else(|| base.output_dir.clone()).context("no --out given and the manifest sets no output_dir")?;
    let size = base.sweep_size();
    if size > base.sweep_cap {
        bail!("sweep expands to {size} runs, above the cap of {}", base.sweep_cap);
    }
    let workers = c.workers.unwrap_or(base.attack.workers).max(1);

    let points = base.sweep_points();
    let mut jobs = Vec::with_capacity(size);
    fs::create_dir_all(out.join("points")).with_context(|| format!("cannot create output directory {}", out.display()))?;
    for (i, point) in points.iter().enumerate() {
        let mut m = base.with_overrides(point)?;
        m.attack.workers = 1;
        m.experiment().validate().with_context(|| format!("sweep point {}", axes_label(point)))?;
        fs::write(out.join("points").join(format!("point-{i:03}.toml")), m.to_toml()?)?;
        for t in 0..base.trials {
            let seed = base.seed_base + t as u64;
            jobs.push(Job { point: i, trial: t, seed, manifest: m.single_run(seed), axes: axes_label(point) });
        }
    }

    let run_job = |job: &Job| -> Result<(String, Metrics)> {
        let outcome = run_trial(&job.manifest.experiment(), job.seed)
            .with_context(|| format!("point {} ({}) trial {}", job.point, job.axes, job.trial))?;
        Ok((job.manifest.hash()?, outcome.metrics))
    };
    let results: Vec<(String, Metrics)> = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?,
        Err(_) => jobs.iter().map(run_job).collect::<Result<Vec<_>>>()?,
    };

    write_rows(&out.join("sweep.csv"), &jobs, &results)?;
    let summary = summarise(&out.join("summary.csv"), &points, &jobs, &results)?;
    min_rounds(&out.join("min_rounds.csv"), &points, &summary)?;
    println!("{} runs over {} points written to {}", jobs.len(), points.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_rows(path: &Path, jobs: &[Job], results: &[(String, Metrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for (job, (hash, m)) in jobs.iter().zip(results) {
        w.write_record(row(job, hash, m))?;
    }
    w.flush()?;
    Ok(())
}

struct PointSummary {
    mean_accuracy: f64,
    exact_trials: usize,
    trials: usize,
}

fn summarise(path: &Path, points: &[Vec<(String, toml::Value)>], jobs: &[Job], results: &[(String, Metrics)]) -> Result<Vec<PointSummary>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    println!("{:>5}  {:<40} {:>8} {:>7} {:>10}", "point", "axes", "accuracy", "exact", "max ms");
    let mut out = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let ms: Vec<&Metrics> = jobs.iter().zip(results).filter(|(j, _)| j.point == i).map(|(_, (_, m))| m).collect();
        let n = ms.len() as f64;
        let mean_accuracy = ms.iter().map(|m| m.column_accuracy).sum::<f64>() / n;
        let exact_trials = ms.iter().filter(|m| m.matrix_exact).count();
        let structural = ms.iter().filter(|m| m.structural_failure.is_some()).count();
        let mean_ms = ms.iter().map(|m| m.solve_time.mean_ms).sum::<f64>() / n;
        let max_ms = ms.iter().map(|m| m.solve_time.max_ms).fold(0.0, f64::max);
        let label = axes_label(point);
        w.write_record([
            i.to_string(),
            label.clone(),
            ms.len().to_string(),
            format!("{mean_accuracy:.6}"),
            exact_trials.to_string(),
            format!("{:.6}", exact_trials as f64 / n),
            structural.to_string(),
            format!("{mean_ms:.3}"),
            format!("{max_ms:.3}"),
        ])?;
        println!("{i:>5}  {label:<40} {mean_accuracy:>8.4} {:>3}/{:<3} {max_ms:>10.1}", exact_trials, ms.len());
        out.push(PointSummary { mean_accuracy, exact_trials, trials: ms.len() });
    }
    w.flush()?;
    Ok(out)
}

/// For sweeps over the round count: the smallest count that was exact on
/// every trial, per combination of the other axes.
fn min_rounds(path: &Path, points: &[Vec<(String, toml::Value)>], summary: &[PointSummary]) -> Result<()> {
    const ROUNDS: &str = "simulation.num_rounds";
    if !points.first().is_some_and(|p| p.iter().any(|(k, _)| resolve_axis(k) == ROUNDS)) {
        return Ok(());
    }
    let mut groups: BTreeMap<String, Vec<(i64, &PointSummary)>> = BTreeMap::new();
    for (point, s) in points.iter().zip(summary) {
        let rounds = point.iter().find(|(k, _)| resolve_axis(k) == ROUNDS).and_then(|(_, v)| v.as_integer()).unwrap_or(0);
        let rest: Vec<(String, toml::Value)> = point.iter().filter(|(k, _)| resolve_axis(k) != ROUNDS).cloned().collect();
        groups.entry(axes_label(&rest)).or_default().push((rounds, s));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axes", "min_rounds", "success_curve"])?;
    for (label, mut pts) in groups {
        pts.sort_by_key(|p| p.0);
        let min = pts.iter().find(|(_, s)| s.exact_trials == s.trials).map(|p| p.0.to_string()).unwrap_or_default();
        let curve = pts
            .iter()
            .map(|(r, s)| format!("{r}:{:.3}:{:.3}", s.exact_trials as f64 / s.trials as f64, s.mean_accuracy))
            .collect::<Vec<_>>()
            .join(" ");
        println!("min rounds [{label}]: {}", if min.is_empty() { "none" } else { &min });
        w.write_record([label, min, curve])?;
    }
    w.flush()?;
    Ok(())
}
