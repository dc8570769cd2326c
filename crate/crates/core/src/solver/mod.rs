//! Per-user search for a binary participation column.
//!
//! For user `k` the problem is
//!
//! ```text
//! minimise   ||N p||^2 + lambda * sum_soft (C_i p - c_i)^2
//! subject to p in {0,1}^n,   C_j p = c_j for every hard window j
//! ```
//!
//! where the rows of `N` span the left nullspace of the (denoised) aggregate
//! matrix. [`solve_column`] is an exact branch-and-bound; [`brute_force_column`]
//! enumerates every feasible vector and serves as its oracle.

mod brute;
pub mod oracle;
mod search;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analytics::WindowCount;
use crate::linalg::NullspaceBasis;

pub use brute::{brute_force_column, candidate_count, BruteForce, MAX_BRUTE_FORCE_CANDIDATES};
pub use search::{certify_uniqueness, solve_column, Uniqueness};

/// Objective tolerance used both for "zero" and for ties between optima.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Soft-constraint weight.
pub const DEFAULT_SOFT_WEIGHT: f64 = 0.1;
/// How many distinct optima a solution reports before it stops storing them.
pub const DEFAULT_MAX_OPTIMA: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("brute force would evaluate {candidates:.3e} candidates")]
    CandidateExplosion { candidates: f64 },
}

/// Order in which constraint blocks are decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchOrder {
    /// Blocks in increasing round order.
    RoundOrder,
    /// Blocks with the fewest candidate assignments per round first, so the
    /// cheap, fully determined windows are fixed before any real branching.
    #[default]
    FewestCandidates,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchLimits {
    pub time_limit: Option<Duration>,
    pub node_limit: Option<u64>,
}

/// One user's column problem.
#[derive(Clone, Debug)]
pub struct ColumnProblem<'a> {
    pub nullspace: &'a NullspaceBasis,
    pub hard: Vec<WindowCount>,
    pub soft: Vec<WindowCount>,
    pub soft_weight: f64,
    pub tolerance: f64,
    pub limits: SearchLimits,
    pub max_optima: usize,
    pub order: SearchOrder,
}

impl<'a> ColumnProblem<'a> {
    /// Problem with no constraints and default settings.
    pub fn new(nullspace: &'a NullspaceBasis) -> Self {
        Self {
            nullspace,
            hard: Vec::new(),
            soft: Vec::new(),
            soft_weight: DEFAULT_SOFT_WEIGHT,
            tolerance: DEFAULT_TOLERANCE,
            limits: SearchLimits::default(),
            max_optima: DEFAULT_MAX_OPTIMA,
            order: SearchOrder::default(),
        }
    }

    pub fn with_hard(mut self, hard: Vec<WindowCount>) -> Self {
        self.hard = hard;
        self
    }

    pub fn with_soft(mut self, soft: Vec<WindowCount>) -> Self {
        self.soft = soft;
        self
    }

    pub fn with_limits(mut self, limits: SearchLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn n(&self) -> usize {
        self.nullspace.dim()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.n();
        let mut covered = vec![false; n];
        for w in self.hard.iter().chain(&self.soft) {
            if w.start >= w.end || w.end > n {
                return Err(SolverError::Malformed(format!("window {}..{} outside 0..{n}", w.start, w.end)));
            }
            for c in &mut covered[w.start..w.end] {
                if *c {
                    return Err(SolverError::Malformed(format!("window {}..{} overlaps another", w.start, w.end)));
                }
                *c = true;
            }
        }
        if !self.soft.is_empty() && !(self.soft_weight > 0.0) {
            return Err(SolverError::Malformed("soft constraints need a positive weight".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(SolverError::Malformed("tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hard_satisfied(&self, p: &[u8]) -> bool {
        self.hard.iter().all(|w| w.apply(p) == w.count)
    }

    /// `lambda * sum (C_i p - c_i)^2` over the soft windows.
    pub fn soft_penalty(&self, p: &[u8]) -> f64 {
        self.soft_weight * self.soft.iter().map(|w| ((w.apply(p) - w.count) as f64).powi(2)).sum::<f64>()
    }

    /// Full objective, evaluated through the nullspace rows.
    pub fn objective(&self, p: &[u8]) -> f64 {
        let v: Vec<f64> = p.iter().map(|&b| b as f64).collect();
        self.nullspace.residual_sq(&v) + self.soft_penalty(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnStatus {
    /// Objective within tolerance of zero and no other vector ties it.
    ExactUnique,
    /// Several vectors reach a zero objective.
    ExactMultiple,
    /// Certified minimum above zero (noisy data), no tie.
    Optimal,
    /// Certified minimum above zero shared by several vectors.
    OptimalMultiple,
    /// Optimum certified but the uniqueness check ran out of budget.
    OptimalUncertified,
    /// Budget exhausted; the best vector found so far is returned.
    TimeoutIncumbent,
    Infeasible,
}

impl ColumnStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExactUnique => "exact-unique",
            Self::ExactMultiple => "exact-multiple",
            Self::Optimal => "optimal",
            Self::OptimalMultiple => "optimal-multiple",
            Self::OptimalUncertified => "optimal-uncertified",
            Self::TimeoutIncumbent => "timeout-incumbent",
            Self::Infeasible => "infeasible",
        }
    }

    /// A certified optimum attained by exactly one vector.
    pub fn is_unique(self) -> bool {
        matches!(self, Self::ExactUnique | Self::Optimal)
    }

    pub fn is_ambiguous(self) -> bool {
        matches!(self, Self::ExactMultiple | Self::OptimalMultiple)
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Self::TimeoutIncumbent | Self::Infeasible)
    }

    pub const ALL: [ColumnStatus; 7] = [
        Self::ExactUnique,
        Self::ExactMultiple,
        Self::Optimal,
        Self::OptimalMultiple,
        Self::OptimalUncertified,
        Self::TimeoutIncumbent,
        Self::Infeasible,
    ];
}

impl std::fmt::Display for ColumnStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ColumnSolution {
    /// Best vector found; `None` when infeasible or nothing was found in time.
    pub p: Option<Vec<u8>>,
    /// Objective of `p` recomputed through [`ColumnProblem::objective`];
    /// infinite when `p` is `None`.
    pub objective: f64,
    pub status: ColumnStatus,
    pub solve_time: Duration,
    pub nodes: u64,
    /// Distinct vectors within tolerance of the optimum, best first, at most
    /// `max_optima` of them.
    pub optima: Vec<Vec<u8>>,
    /// Total number of such vectors seen (may exceed `optima.len()`).
    pub optima_count: usize,
}

/// Status implied by a finished, exhaustive search.
fn settled_status(best: f64, optima_count: usize, tolerance: f64) -> ColumnStatus {
    match (best <= tolerance, optima_count) {
        (_, 0) => ColumnStatus::Infeasible,
        (true, 1) => ColumnStatus::ExactUnique,
        (true, _) => ColumnStatus::ExactMultiple,
        (false, 1) => ColumnStatus::Optimal,
        (false, _) => ColumnStatus::OptimalMultiple,
    }
}
