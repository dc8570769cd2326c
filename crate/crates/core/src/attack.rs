//! End-to-end disaggregation: nullspace, per-user column search, least-squares
//! recovery of the per-user updates, and scoring against ground truth.

use std::collections::BTreeMap;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::ConstraintSet;
use crate::flsim::ParticipantMatrix;
use crate::linalg::{left_nullspace, left_nullspace_of_rank, least_squares, svd, DenseMatrix, NullspaceBasis};
use crate::solver::{
    solve_column, ColumnProblem, ColumnStatus, SearchLimits, SearchOrder, DEFAULT_MAX_OPTIMA, DEFAULT_SOFT_WEIGHT,
    DEFAULT_TOLERANCE,
};
use crate::Error;

/// Which matrix the nullspace is taken from in noisy mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullspaceSource {
    /// Best rank-`u` approximation of the aggregate.
    #[default]
    Denoised,
    /// The raw aggregate, with numerically determined rank.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub num_users: usize,
    /// Relaxed objective on a denoised aggregate instead of exact membership.
    pub noisy_mode: bool,
    pub nullspace_source: NullspaceSource,
    /// Relative singular-value cutoff for numerical rank.
    pub rank_tolerance: f64,
    pub tolerance: f64,
    pub soft_weight: f64,
    /// Per-column wall-clock budget; `None` means unlimited.
    pub time_limit_ms: Option<u64>,
    /// Per-column node budget; `None` means unlimited.
    pub node_limit: Option<u64>,
    pub max_optima: usize,
    pub search_order: SearchOrder,
    pub workers: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            num_users: 1,
            noisy_mode: false,
            nullspace_source: NullspaceSource::Denoised,
            rank_tolerance: crate::linalg::DEFAULT_RANK_TOLERANCE,
            tolerance: DEFAULT_TOLERANCE,
            soft_weight: DEFAULT_SOFT_WEIGHT,
            time_limit_ms: None,
            node_limit: None,
            max_optima: DEFAULT_MAX_OPTIMA,
            search_order: SearchOrder::default(),
            workers: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.num_users == 0 {
            return Err(Error::InvalidArgument("attack needs at least one user".into()));
        }
        if !(self.rank_tolerance > 0.0) {
            return Err(Error::InvalidArgument("rank_tolerance must be positive".into()));
        }
        if !(self.tolerance >= 0.0) || !(self.soft_weight > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be >= 0 and soft_weight > 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn limits(&self) -> SearchLimits {
        SearchLimits { time_limit: self.time_limit_ms.map(Duration::from_millis), node_limit: self.node_limit }
    }
}

/// The aggregate cannot contain `u` independent user directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralFailure {
    pub rank: usize,
    pub num_users: usize,
    pub num_rounds: usize,
}

impl std::fmt::Display for StructuralFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "aggregate rank {} is less than the number of users {} ({} rounds observed); more rounds are needed",
            self.rank, self.num_users, self.num_rounds
        )
    }
}

#[derive(Clone, Debug)]
pub struct ColumnReport {
    pub user: usize,
    pub status: ColumnStatus,
    pub objective: f64,
    pub solve_time: Duration,
    pub nodes: u64,
    /// Best vector found, before zero-filling of failed columns.
    pub p: Option<Vec<u8>>,
    pub optima: Vec<Vec<u8>>,
    pub optima_count: usize,
}

impl ColumnReport {
    /// Whether this column enters `P_hat` and the update scoring.
    pub fn is_scored(&self) -> bool {
        !self.status.is_failure()
    }

    pub fn bitstring(&self) -> String {
        self.p.as_deref().map_or_else(String::new, |p| p.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect())
    }
}

#[derive(Clone, Debug)]
pub struct DisaggregationResult {
    pub p_hat: ParticipantMatrix,
    /// `u x d` recovered per-user average updates.
    pub g_hat: DenseMatrix,
    pub columns: Vec<ColumnReport>,
    /// Numerical rank of the aggregate.
    pub aggregate_rank: usize,
    /// `P_hat` lacked full column rank; `g_hat` is the minimum-norm solution.
    pub rank_deficient: bool,
    pub structural_failure: Option<StructuralFailure>,
}

fn nullspace_for(g_agg: &DenseMatrix, cfg: &AttackConfig) -> Result<(NullspaceBasis, usize), Error> {
    let f = svd(g_agg)?;
    let rank = f.rank(cfg.rank_tolerance);
    let ns = if cfg.noisy_mode && cfg.nullspace_source == NullspaceSource::Denoised {
        left_nullspace_of_rank(g_agg, cfg.num_users.min(rank))?
    } else {
        left_nullspace(g_agg, cfg.rank_tolerance)?
    };
    Ok((ns, rank))
}

/// Users whose exact, complete analytics say they never took part. They add
/// nothing to the aggregate, so they do not count towards the rank needed.
fn reported_absent(cs: &ConstraintSet) -> usize {
    if cs.noisy {
        return 0;
    }
    cs.users
        .iter()
        .filter(|ws| ws.iter().all(|w| w.count == 0) && ws.iter().map(|w| w.len()).sum::<usize>() == cs.num_rounds)
        .count()
}

/// Runs `f` on `workers` threads, reusing the surrounding pool when already
/// inside one so that nested sweeps stay within one budget.
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 || rayon::current_thread_index().is_some() {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Recovers `P` column by column and then the per-user updates.
pub fn disaggregate(g_agg: &DenseMatrix, constraints: &ConstraintSet, cfg: &AttackConfig) -> Result<DisaggregationResult, Error> {
    cfg.validate()?;
    let (n, d, u) = (g_agg.rows(), g_agg.cols(), cfg.num_users);
    if constraints.num_rounds != n {
        return Err(Error::Shape(format!("constraints cover {} rounds but the aggregate has {n}", constraints.num_rounds)));
    }
    if constraints.num_users() != u {
        return Err(Error::Shape(format!("constraints describe {} users but the attack expects {u}", constraints.num_users())));
    }
    let (ns, rank) = nullspace_for(g_agg, cfg)?;
    if rank + reported_absent(constraints) < u {
        return Ok(DisaggregationResult {
            p_hat: ParticipantMatrix::zeros(n, u),
            g_hat: DenseMatrix::zeros(u, d),
            columns: Vec::new(),
            aggregate_rank: rank,
            rank_deficient: true,
            structural_failure: Some(StructuralFailure { rank, num_users: u, num_rounds: n }),
        });
    }

    let solve = |k: usize| -> Result<ColumnReport, Error> {
        let windows = constraints.users[k].clone();
        let mut prob = ColumnProblem::new(&ns).with_limits(cfg.limits());
        prob = if constraints.noisy { prob.with_soft(windows) } else { prob.with_hard(windows) };
        prob.soft_weight = cfg.soft_weight;
        prob.tolerance = cfg.tolerance;
        prob.max_optima = cfg.max_optima;
        prob.order = cfg.search_order;
        let sol = solve_column(&prob).map_err(|e| Error::InvalidArgument(format!("user {k}: {e}")))?;
        Ok(ColumnReport {
            user: k,
            status: sol.status,
            objective: sol.objective,
            solve_time: sol.solve_time,
            nodes: sol.nodes,
            p: sol.p,
            optima: sol.optima,
            optima_count: sol.optima_count,
        })
    };
    let columns: Vec<ColumnReport> = with_workers(cfg.workers, || (0..u).into_par_iter().map(solve).collect::<Result<Vec<_>, Error>>())?;

    let mut p_hat = ParticipantMatrix::zeros(n, u);
    for c in columns.iter().filter(|c| c.is_scored()) {
        if let Some(p) = &c.p {
            p_hat.set_column(c.user, p);
        }
    }
    let ls = least_squares(&p_hat.to_dense(), g_agg)?;
    Ok(DisaggregationResult {
        p_hat,
        g_hat: ls.solution,
        columns,
        aggregate_rank: rank,
        rank_deficient: ls.rank_deficient,
        structural_failure: None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_users: usize,
    pub num_rounds: usize,
    pub correct_columns: usize,
    /// Users that never took part in any round. Their columns cannot be
    /// recovered from the aggregate and are left out of every score.
    pub never_participating: Vec<usize>,
    /// Correct columns over the users that participated at least once.
    pub column_accuracy: f64,
    pub matrix_exact: bool,
    /// Ambiguous columns whose reported optima include the truth. These are
    /// not counted as correct.
    pub unverified_matches: usize,
    /// `||G_hat - G||_F / ||G||_F` over the scored users; `None` when no
    /// column was scored.
    pub grad_rel_error: Option<f64>,
    /// Worst per-user relative error among the scored users.
    pub max_user_rel_error: Option<f64>,
    pub scored_users: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub solve_time: TimeStats,
    pub total_nodes: u64,
    pub aggregate_rank: usize,
    pub rank_deficient: bool,
    pub structural_failure: Option<String>,
}

/// Scores a result against the true participant matrix and per-user updates.
pub fn evaluate(result: &DisaggregationResult, truth: &ParticipantMatrix, g_true: &DenseMatrix) -> Result<Metrics, Error> {
    let (n, u) = (result.p_hat.rounds(), result.p_hat.users());
    if truth.rounds() != n || truth.users() != u {
        return Err(Error::Shape(format!(
            "truth is {}x{} but the result is {n}x{u}",
            truth.rounds(),
            truth.users()
        )));
    }
    if g_true.rows() != u || g_true.cols() != result.g_hat.cols() {
        return Err(Error::Shape("true updates do not match the recovered shape".into()));
    }
    let mut status_counts: BTreeMap<String, usize> = ColumnStatus::ALL.iter().map(|s| (s.as_str().to_string(), 0)).collect();
    let mut correct = 0;
    let mut unverified = 0;
    let mut scored = Vec::new();
    let absent = truth.never_participating();
    for c in &result.columns {
        *status_counts.entry(c.status.as_str().to_string()).or_default() += 1;
        if absent.contains(&c.user) {
            continue;
        }
        let truth_col = truth.column(c.user);
        if c.status.is_unique() && c.p.as_ref() == Some(&truth_col) {
            correct += 1;
        } else if c.status.is_ambiguous() && c.optima.iter().any(|o| *o == truth_col) {
            unverified += 1;
        }
        if c.is_scored() {
            scored.push(c.user);
        }
    }

    let (mut num, mut den, mut worst) = (0.0, 0.0, 0.0f64);
    for &k in &scored {
        let (a, b) = (result.g_hat.row(k), g_true.row(k));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let norm: f64 = b.iter().map(|y| y * y).sum();
        num += diff;
        den += norm;
        let rel = if norm > 0.0 { (diff / norm).sqrt() } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(rel);
    }
    let any = !scored.is_empty();
    let grad_rel_error = any.then(|| if den > 0.0 { (num / den).sqrt() } else if num == 0.0 { 0.0 } else { f64::INFINITY });

    let times: Vec<f64> = result.columns.iter().map(|c| c.solve_time.as_secs_f64() * 1e3).collect();
    let solve_time = if times.is_empty() {
        TimeStats::default()
    } else {
        TimeStats {
            mean_ms: times.iter().sum::<f64>() / times.len() as f64,
            min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: times.iter().copied().fold(0.0, f64::max),
        }
    };
    let eligible = u - absent.len();
    Ok(Metrics {
        num_users: u,
        num_rounds: n,
        correct_columns: correct,
        never_participating: absent,
        column_accuracy: if eligible == 0 { 0.0 } else { correct as f64 / eligible as f64 },
        matrix_exact: eligible > 0 && correct == eligible,
        unverified_matches: unverified,
        grad_rel_error,
        max_user_rel_error: any.then_some(worst),
        scored_users: scored.len(),
        status_counts,
        solve_time,
        total_nodes: result.columns.iter().map(|c| c.nodes).sum(),
        aggregate_rank: result.aggregate_rank,
        rank_deficient: result.rank_deficient,
        structural_failure: result.structural_failure.as_ref().map(|s| s.to_string()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundsPoint {
    pub rounds: usize,
    pub trials: usize,
    pub exact_trials: usize,
    pub success_rate: f64,
    pub structural_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinRoundsReport {
    /// Smallest candidate where every trial recovered `P` exactly.
    pub min_rounds: Option<usize>,
    pub curve: Vec<RoundsPoint>,
}

/// Sweeps the candidate round counts (ascending) and reports the success
/// curve. `trial(rounds, trial_index)` runs one experiment.
pub fn min_rounds_search(
    candidates: &[usize],
    trials: usize,
    mut trial: impl FnMut(usize, usize) -> Result<Metrics, Error>,
) -> Result<MinRoundsReport, Error> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is needed".into()));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("round candidates must be strictly ascending".into()));
    }
    let mut curve = Vec::with_capacity(candidates.len());
    for &rounds in candidates {
        let mut exact = 0;
        let mut structural = 0;
        for t in 0..trials {
            let m = trial(rounds, t)?;
            exact += m.matrix_exact as usize;
            structural += m.structural_failure.is_some() as usize;
        }
        curve.push(RoundsPoint {
            rounds,
            trials,
            exact_trials: exact,
            success_rate: exact as f64 / trials as f64,
            structural_failures: structural,
        });
    }
    let min_rounds = curve.iter().find(|p| p.exact_trials == p.trials).map(|p| p.rounds);
    Ok(MinRoundsReport { min_rounds, curve })
}
