//! Randomised cross-check of the branch-and-bound against exhaustive
//! enumeration on small instances mixing hard, soft and dropped windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{brute_force_column, solve_column, ColumnProblem, SolverError};
use crate::analytics::{windows, WindowCount};
use crate::flsim::ParticipantMatrix;
use crate::linalg::{left_nullspace, left_nullspace_of_rank, DenseMatrix, NullspaceBasis, DEFAULT_RANK_TOLERANCE};
use crate::Error;

/// A generated instance: the nullspace of a small aggregate plus one user's
/// windows.
#[derive(Clone, Debug)]
pub struct OracleCase {
    pub seed: u64,
    pub nullspace: NullspaceBasis,
    pub hard: Vec<WindowCount>,
    pub soft: Vec<WindowCount>,
    pub dropped: usize,
    pub noisy_gradients: bool,
}

impl OracleCase {
    pub fn problem(&self) -> ColumnProblem<'_> {
        ColumnProblem::new(&self.nullspace).with_hard(self.hard.clone()).with_soft(self.soft.clone())
    }
}

/// Draws an instance with `n <= 16` rounds and `u <= 4` users.
pub fn oracle_case(seed: u64) -> Result<OracleCase, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=16);
    let u = rng.random_range(1..=4);
    let rate = rng.random_range(0.2..0.5);
    let cols: Vec<Vec<u8>> = (0..u).map(|_| (0..n).map(|_| rng.random_bool(rate) as u8).collect()).collect();
    let p = ParticipantMatrix::from_columns(&cols);
    let d = u + rng.random_range(0..3);
    let x = DenseMatrix::from_fn(u, d, |_, _| rng.sample(StandardNormal));
    let mut g = p.to_dense().matmul(&x)?;
    let noisy_gradients = rng.random_bool(0.3);
    let nullspace = if noisy_gradients {
        let noise = DenseMatrix::from_fn(n, d, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        g = DenseMatrix::from_nalgebra(g.as_nalgebra() + noise.as_nalgebra())?;
        left_nullspace_of_rank(&g, u)?
    } else {
        left_nullspace(&g, DEFAULT_RANK_TOLERANCE)?
    };

    let user = rng.random_range(0..u);
    let col = &cols[user];
    let g_len = rng.random_range(2..=5);
    let (mut hard, mut soft, mut dropped) = (Vec::new(), Vec::new(), 0);
    for (start, end) in windows(n, g_len, 0) {
        let truth = col[start..end].iter().map(|&b| b as i64).sum::<i64>();
        let roll: f64 = rng.random();
        if roll < 0.25 {
            dropped += 1;
        } else if roll < 0.6 {
            let noise = (0.8 * rng.sample::<f64, _>(StandardNormal)).round() as i64;
            soft.push(WindowCount { start, end, count: (truth + noise).clamp(0, (end - start) as i64) });
        } else {
            // An occasional out-of-range count makes the instance infeasible.
            let count = if rng.random_bool(0.03) { (end - start) as i64 + 1 } else { truth };
            hard.push(WindowCount { start, end, count });
        }
    }
    Ok(OracleCase { seed, nullspace, hard, soft, dropped, noisy_gradients })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub matched: usize,
    pub infeasible: usize,
    pub unique: usize,
    pub ambiguous: usize,
    pub with_soft: usize,
    pub with_dropped: usize,
    pub mismatches: Vec<OracleMismatch>,
}

impl OracleReport {
    pub fn all_matched(&self) -> bool {
        self.instances > 0 && self.matched == self.instances
    }
}

fn compare(case: &OracleCase, tolerance: f64) -> Result<Option<String>, SolverError> {
    let mut prob = case.problem();
    prob.tolerance = tolerance;
    let sol = solve_column(&prob)?;
    let bf = brute_force_column(&prob)?.solution;
    if sol.status != bf.status {
        return Ok(Some(format!("status {} vs brute force {}", sol.status, bf.status)));
    }
    let Some(p) = &sol.p else {
        return Ok(bf.p.is_some().then(|| "search found nothing but brute force did".into()));
    };
    if !case.hard.iter().all(|w| p[w.start..w.end].iter().map(|&b| b as i64).sum::<i64>() == w.count) {
        return Ok(Some("returned vector violates a hard window".into()));
    }
    if (sol.objective - bf.objective).abs() > tolerance {
        return Ok(Some(format!("objective {:.9} vs brute force {:.9}", sol.objective, bf.objective)));
    }
    let recomputed = prob.objective(p);
    if (recomputed - sol.objective).abs() > 1e-10 {
        return Ok(Some(format!("reported objective {} but recomputed {recomputed}", sol.objective)));
    }
    Ok(None)
}

/// Runs `count` instances seeded `base_seed, base_seed + 1, ...`.
pub fn cross_check(count: usize, base_seed: u64, tolerance: f64) -> Result<OracleReport, Error> {
    let mut report = OracleReport::default();
    for i in 0..count as u64 {
        let case = oracle_case(base_seed + i)?;
        report.instances += 1;
        report.with_soft += !case.soft.is_empty() as usize;
        report.with_dropped += (case.dropped > 0) as usize;
        let bf = brute_force_column(&case.problem()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let status = bf.solution.status;
        report.infeasible += (status == super::ColumnStatus::Infeasible) as usize;
        report.unique += status.is_unique() as usize;
        report.ambiguous += status.is_ambiguous() as usize;
        match compare(&case, tolerance).map_err(|e| Error::InvalidArgument(e.to_string()))? {
            None => report.matched += 1,
            Some(reason) => report.mismatches.push(OracleMismatch { seed: case.seed, reason }),
        }
    }
    Ok(report)
}
