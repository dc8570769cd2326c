//! Exhaustive enumeration of every hard-feasible vector. Slow, obviously
//! correct, and used as the reference for the branch-and-bound.

use std::time::Instant;

use super::{settled_status, ColumnProblem, ColumnSolution, ColumnStatus, SolverError};

/// Refuse to enumerate more than this many vectors.
pub const MAX_BRUTE_FORCE_CANDIDATES: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct BruteForce {
    pub solution: ColumnSolution,
    /// Number of feasible vectors evaluated.
    pub candidates: u64,
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Number of vectors satisfying the hard windows (0 when a count is out of
/// range).
pub fn candidate_count(prob: &ColumnProblem<'_>) -> f64 {
    let mut covered = 0;
    let mut ln = 0.0;
    for w in &prob.hard {
        if w.count < 0 || w.count as usize > w.len() {
            return 0.0;
        }
        covered += w.len();
        ln += ln_binomial(w.len(), w.count as usize);
    }
    ln += (prob.n() - covered) as f64 * std::f64::consts::LN_2;
    ln.exp().round()
}

struct Walk<'a, 'b> {
    prob: &'a ColumnProblem<'b>,
    /// Hard window index covering each round.
    owner: Vec<Option<usize>>,
    ones: Vec<i64>,
    left: Vec<i64>,
    p: Vec<u8>,
    values: Vec<(f64, Vec<u8>)>,
}

impl Walk<'_, '_> {
    fn go(&mut self, r: usize) {
        if r == self.p.len() {
            let v = self.prob.objective(&self.p);
            self.values.push((v, self.p.clone()));
            return;
        }
        for x in [0u8, 1] {
            if let Some(w) = self.owner[r] {
                let have = self.ones[w] + x as i64;
                let c = self.prob.hard[w].count;
                if have > c || have + self.left[w] - 1 < c {
                    continue;
                }
                self.ones[w] += x as i64;
                self.left[w] -= 1;
                self.p[r] = x;
                self.go(r + 1);
                self.p[r] = 0;
                self.left[w] += 1;
                self.ones[w] -= x as i64;
            } else {
                self.p[r] = x;
                self.go(r + 1);
                self.p[r] = 0;
            }
        }
    }
}

/// Evaluates the objective on every hard-feasible vector.
pub fn brute_force_column(prob: &ColumnProblem<'_>) -> Result<BruteForce, SolverError> {
    prob.validate()?;
    let candidates = candidate_count(prob);
    if candidates > MAX_BRUTE_FORCE_CANDIDATES {
        return Err(SolverError::CandidateExplosion { candidates });
    }
    let started = Instant::now();
    let n = prob.n();
    let mut owner = vec![None; n];
    for (i, w) in prob.hard.iter().enumerate() {
        owner[w.start..w.end].iter_mut().for_each(|o| *o = Some(i));
    }
    let mut walk = Walk {
        prob,
        owner,
        ones: vec![0; prob.hard.len()],
        left: prob.hard.iter().map(|w| w.len() as i64).collect(),
        p: vec![0; n],
        values: Vec::new(),
    };
    if candidates > 0.0 {
        walk.go(0);
    }
    let evaluated = walk.values.len() as u64;
    let best = walk.values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let mut optima: Vec<(f64, Vec<u8>)> = walk.values.into_iter().filter(|v| v.0 <= best + prob.tolerance).collect();
    optima.sort_by(|a, b| a.0.total_cmp(&b.0));
    let optima_count = optima.len();
    let status = if evaluated == 0 { ColumnStatus::Infeasible } else { settled_status(best, optima_count, prob.tolerance) };
    let optima: Vec<Vec<u8>> = optima.into_iter().map(|v| v.1).take(prob.max_optima.max(1)).collect();
    let p = optima.first().cloned();
    Ok(BruteForce {
        solution: ColumnSolution {
            objective: p.as_deref().map_or(f64::INFINITY, |p| prob.objective(p)),
            p,
            status,
            solve_time: started.elapsed(),
            nodes: evaluated,
            optima,
            optima_count,
        },
        candidates: evaluated,
    })
}
