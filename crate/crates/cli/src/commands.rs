use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use disagg::attack::{disaggregate, evaluate as score, ColumnReport, DisaggregationResult, Metrics, StructuralFailure};
use disagg::io::{load_bmat, load_constraints, load_dmat, save_bmat, save_constraints, save_dmat};
use disagg::pipeline::simulate_artifacts;
use disagg::solver::oracle::cross_check;
use disagg::solver::{ColumnStatus, DEFAULT_TOLERANCE};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::Common;

pub const EXIT_INVALID: u8 = 1;
pub const EXIT_STRUCTURAL: u8 = 2;

pub const P_TRUE: &str = "P_true.bmat";
pub const G_AGG: &str = "G_agg.dmat";
pub const G_TRUE: &str = "G_true_avg.dmat";
pub const CONSTRAINTS: &str = "constraints.txt";
pub const MANIFEST: &str = "manifest.toml";
pub const P_HAT: &str = "P_hat.bmat";
pub const G_HAT: &str = "G_hat.dmat";
pub const COLUMNS: &str = "columns.csv";
pub const RESULT: &str = "result.json";
pub const METRICS: &str = "metrics.json";

/// Applies the command-line overrides that make sense for any manifest.
pub fn apply_flags(m: &mut Manifest, c: &Common) {
    if let Some(w) = c.workers {
        m.attack.workers = w.max(1);
    }
    if let Some(t) = c.time_limit_ms {
        m.attack.time_limit_ms = Some(t);
    }
    if let Some(s) = c.seed {
        m.seed_base = s;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn simulate(c: &Common) -> Result<ExitCode> {
    let path = c.manifest.as_deref().context("simulate needs --manifest")?;
    let mut m = Manifest::load(path)?;
    apply_flags(&mut m, c);
    let out = c.out.clone().or_else(|| m.output_dir.clone()).context("no --out given and the manifest sets no output_dir")?;
    let run = m.single_run(m.seed_base);
    let art = simulate_artifacts(&run.experiment())?;
    create_dir(&out)?;
    save_bmat(&out.join(P_TRUE), &art.p_true)?;
    save_dmat(&out.join(G_AGG), &art.g_agg)?;
    save_dmat(&out.join(G_TRUE), &art.g_true_avg)?;
    save_constraints(&out.join(CONSTRAINTS), &art.constraints)?;
    fs::write(out.join(MANIFEST), run.to_toml()?)?;
    let absent = art.p_true.never_participating();
    if !absent.is_empty() {
        eprintln!("warning: users {absent:?} never participate; they are excluded from scoring");
    }
    println!(
        "simulated {} users over {} rounds (d = {}) into {}",
        art.p_true.users(),
        art.p_true.rounds(),
        art.g_agg.cols(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Per-column record as stored in `result.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnRecord {
    pub user: usize,
    pub status: String,
    pub objective: Option<f64>,
    pub solve_time_ms: f64,
    pub nodes: u64,
    pub solution: String,
    pub optima: Vec<String>,
    pub optima_count: usize,
}

/// Everything `evaluate` needs besides the recovered matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub manifest_hash: String,
    pub seed: u64,
    pub aggregate_rank: usize,
    pub rank_deficient: bool,
    pub structural_failure: Option<StructuralFailure>,
    pub columns: Vec<ColumnRecord>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    manifest_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

fn bits(p: &[u8]) -> String {
    p.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(anyhow!("bad bit `{c}` in solution string")),
        })
        .collect()
}

fn parse_status(s: &str) -> Result<ColumnStatus> {
    ColumnStatus::ALL.iter().copied().find(|x| x.as_str() == s).ok_or_else(|| anyhow!("unknown column status `{s}`"))
}

fn record(res: &DisaggregationResult, manifest_hash: &str, seed: u64) -> ResultRecord {
    ResultRecord {
        manifest_hash: manifest_hash.to_string(),
        seed,
        aggregate_rank: res.aggregate_rank,
        rank_deficient: res.rank_deficient,
        structural_failure: res.structural_failure.clone(),
        columns: res
            .columns
            .iter()
            .map(|c| ColumnRecord {
                user: c.user,
                status: c.status.as_str().to_string(),
                objective: c.objective.is_finite().then_some(c.objective),
                solve_time_ms: c.solve_time.as_secs_f64() * 1e3,
                nodes: c.nodes,
                solution: c.bitstring(),
                optima: c.optima.iter().map(|o| bits(o)).collect(),
                optima_count: c.optima_count,
            })
            .collect(),
    }
}

fn restore(rec: &ResultRecord, dir: &Path) -> Result<DisaggregationResult> {
    let columns = rec
        .columns
        .iter()
        .map(|c| {
            Ok(ColumnReport {
                user: c.user,
                status: parse_status(&c.status)?,
                objective: c.objective.unwrap_or(f64::INFINITY),
                solve_time: Duration::from_secs_f64(c.solve_time_ms / 1e3),
                nodes: c.nodes,
                p: if c.solution.is_empty() { None } else { Some(parse_bits(&c.solution)?) },
                optima: c.optima.iter().map(|o| parse_bits(o)).collect::<Result<_>>()?,
                optima_count: c.optima_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DisaggregationResult {
        p_hat: load_bmat(&dir.join(P_HAT))?,
        g_hat: load_dmat(&dir.join(G_HAT))?,
        columns,
        aggregate_rank: rec.aggregate_rank,
        rank_deficient: rec.rank_deficient,
        structural_failure: rec.structural_failure.clone(),
    })
}

pub fn write_columns_csv(path: &Path, res: &DisaggregationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "status", "objective", "solve_time_ms", "nodes", "solution"])?;
    for c in &res.columns {
        w.write_record([
            c.user.to_string(),
            c.status.as_str().to_string(),
            if c.objective.is_finite() { format!("{:e}", c.objective) } else { "inf".into() },
            format!("{:.3}", c.solve_time.as_secs_f64() * 1e3),
            c.nodes.to_string(),
            c.bitstring(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, metrics: &Metrics, manifest_hash: &str, seed: u64) -> Result<()> {
    let body = serde_json::to_string_pretty(&MetricsFile { manifest_hash, seed, metrics })?;
    fs::write(path, body + "\n")?;
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!(
        "recovered {}/{} columns (accuracy {:.4}, exact {}), {} unverified ambiguous matches",
        m.correct_columns,
        m.num_users - m.never_participating.len(),
        m.column_accuracy,
        m.matrix_exact,
        m.unverified_matches
    );
    if let Some(e) = m.grad_rel_error {
        println!("update relative error {e:.3e} over {} scored users", m.scored_users);
    }
}

fn run_dir_of(run_dir: Option<PathBuf>, c: &Common) -> Result<PathBuf> {
    run_dir
        .or_else(|| c.manifest.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))
        .context("give a run directory or --manifest")
}

pub fn attack(run_dir: Option<PathBuf>, c: &Common) -> Result<ExitCode> {
    let dir = run_dir_of(run_dir, c)?;
    let manifest_path = c.manifest.clone().unwrap_or_else(|| dir.join(MANIFEST));
    let mut m = Manifest::load(&manifest_path)?;
    apply_flags(&mut m, c);
    if let Some(s) = c.seed {
        m.attack.seed = s;
    }
    let g_agg = load_dmat(&dir.join(G_AGG)).with_context(|| format!("reading {}", dir.join(G_AGG).display()))?;
    let cs = load_constraints(&dir.join(CONSTRAINTS)).with_context(|| format!("reading {}", dir.join(CONSTRAINTS).display()))?;
    let cfg = m.experiment().attack_config();
    let res = disaggregate(&g_agg, &cs, &cfg)?;

    let out = c.out.clone().unwrap_or_else(|| dir.clone());
    create_dir(&out)?;
    let hash = m.hash()?;
    save_bmat(&out.join(P_HAT), &res.p_hat)?;
    save_dmat(&out.join(G_HAT), &res.g_hat)?;
    write_columns_csv(&out.join(COLUMNS), &res)?;
    fs::write(out.join(RESULT), serde_json::to_string_pretty(&record(&res, &hash, m.seed_base))? + "\n")?;

    let (p_true, g_true) = (dir.join(P_TRUE), dir.join(G_TRUE));
    if p_true.exists() && g_true.exists() {
        let metrics = score(&res, &load_bmat(&p_true)?, &load_dmat(&g_true)?)?;
        write_metrics(&out.join(METRICS), &metrics, &hash, m.seed_base)?;
        print_metrics(&metrics);
    }
    let timeouts = res.columns.iter().filter(|c| c.status == ColumnStatus::TimeoutIncumbent).count();
    if timeouts > 0 {
        eprintln!("warning: {timeouts} of {} columns hit the search budget and were zero-filled", res.columns.len());
    }
    if let Some(f) = &res.structural_failure {
        eprintln!("structural failure: {f}");
        return Ok(ExitCode::from(EXIT_STRUCTURAL));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(run_dir: &Path, result: Option<PathBuf>, c: &Common) -> Result<ExitCode> {
    let result_dir = result.unwrap_or_else(|| run_dir.to_path_buf());
    let text = fs::read_to_string(result_dir.join(RESULT)).with_context(|| format!("reading {}", result_dir.join(RESULT).display()))?;
    let rec: ResultRecord = serde_json::from_str(&text).context("parsing result.json")?;
    let res = restore(&rec, &result_dir)?;
    let metrics = score(&res, &load_bmat(&run_dir.join(P_TRUE))?, &load_dmat(&run_dir.join(G_TRUE))?)?;
    let out = c.out.clone().unwrap_or(result_dir);
    create_dir(&out)?;
    write_metrics(&out.join(METRICS), &metrics, &rec.manifest_hash, rec.seed)?;
    print_metrics(&metrics);
    if let Some(f) = &res.structural_failure {
        eprintln!("structural failure: {f}");
        return Ok(ExitCode::from(EXIT_STRUCTURAL));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn oracle_check(instances: usize, c: &Common) -> Result<ExitCode> {
    if instances == 0 {
        bail!("at least one instance is needed");
    }
    let report = cross_check(instances, c.seed.unwrap_or(0), DEFAULT_TOLERANCE)?;
    println!(
        "{}/{} instances agree ({} unique, {} ambiguous, {} infeasible; {} with soft windows, {} with dropped windows)",
        report.matched, report.instances, report.unique, report.ambiguous, report.infeasible, report.with_soft, report.with_dropped
    );
    for m in &report.mismatches {
        eprintln!("mismatch at seed {}: {}", m.seed, m.reason);
    }
    if let Some(out) = &c.out {
        create_dir(out)?;
        fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(if report.all_matched() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_INVALID) })
}
