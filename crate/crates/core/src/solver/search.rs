//! Depth-first branch-and-bound over rounds.
//!
//! Let `U` be an orthonormal basis of the aggregate's column space, so that
//! `||N p||^2 = min_y ||p - U y||^2`. Once the rounds in a prefix `F` of the
//! search order are fixed to `x`, the remaining rounds are relaxed to real
//! values that still honour every undecided window's count. For a window `W`
//! with `m` undecided rounds, `e` ones still missing and row sum
//! `w = sum_{i in W} u_i`, eliminating those rounds leaves a single weighted
//! least-squares row `omega (w^T y - e)^2`, with `omega = 1/m` for an exact
//! count and `lambda / (1 + lambda m)` for a noisy one. The bound is therefore
//!
//! ```text
//! min_y ||x - U_F y||^2 + sum_W omega_W (w_W^T y - e_W)^2 + decided soft penalties
//! ```
//!
//! which never exceeds the objective of any feasible binary completion and
//! equals the objective at full depth. The Gram matrix of that system depends
//! only on the depth, so its pseudo-inverse `L L^T` is factored once per depth
//! and a node costs `O(r^2)`.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use super::{settled_status, ColumnProblem, ColumnSolution, ColumnStatus, SearchOrder, SolverError};
use crate::analytics::WindowCount;
use crate::linalg::symmetric_eigen;

/// Gram eigenvalues below this fraction of the largest are treated as zero.
const GRAM_EIGEN_TOLERANCE: f64 = 1e-12;
/// Nodes between wall-clock checks.
const CLOCK_STRIDE: u64 = 512;

/// A run of consecutive steps sharing one count report.
#[derive(Clone, Debug)]
struct Block {
    first_step: usize,
    len: usize,
    count: i64,
    soft: bool,
}

/// Per-round data in search order.
struct Step {
    round: usize,
    block: Option<usize>,
    /// Rounds of the same window still undecided after this one.
    remaining_after: usize,
}

/// The window left partially decided at some depth, with its relaxation row
/// pre-multiplied by the weight.
struct Partial {
    #[cfg_attr(not(test), allow(dead_code))]
    block: usize,
    weighted_row: Vec<f64>,
    weight: f64,
}

/// Everything precomputed for one problem.
pub(crate) struct Tables {
    n: usize,
    rank: usize,
    steps: Vec<Step>,
    blocks: Vec<Block>,
    #[cfg_attr(not(test), allow(dead_code))]
    soft_weight: f64,
    /// Rows of `U` in round order, flattened.
    rows: Vec<f64>,
    /// `factors[t]` is `L_t` (rank x width_t, column-major).
    factors: Vec<Vec<f64>>,
    widths: Vec<usize>,
    /// Sum of `omega c w` and `omega c^2` over windows untouched at depth `t`.
    fixed_s: Vec<Vec<f64>>,
    fixed_c: Vec<f64>,
    partial: Vec<Option<Partial>>,
    /// `L_{t+1}^T (u_t - omega w)` for the step decided at depth `t`.
    step_proj: Vec<Vec<f64>>,
}

fn binomial_ln(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

impl Tables {
    pub(crate) fn build(prob: &ColumnProblem<'_>) -> Result<Self, crate::Error> {
        let n = prob.n();
        let range = &prob.nullspace.range;
        let rank = range.ncols();
        let rows: Vec<f64> = (0..n).flat_map(|r| range.row(r).iter().copied().collect::<Vec<_>>()).collect();
        let row = |r: usize| &rows[r * rank..(r + 1) * rank];

        // Order the reports: (sort key, start, window, soft).
        let mut reports: Vec<(f64, usize, Option<(WindowCount, bool)>)> = Vec::new();
        let mut covered = vec![false; n];
        for (w, soft) in prob.hard.iter().map(|w| (w, false)).chain(prob.soft.iter().map(|w| (w, true))) {
            let len = w.len();
            let c = w.count.clamp(0, len as i64) as usize;
            covered[w.start..w.end].iter_mut().for_each(|c| *c = true);
            reports.push((binomial_ln(len, c) / len as f64, w.start, Some((*w, soft))));
        }
        for r in (0..n).filter(|&r| !covered[r]) {
            reports.push((std::f64::consts::LN_2, r, None));
        }
        match prob.order {
            SearchOrder::RoundOrder => reports.sort_by_key(|b| b.1),
            SearchOrder::FewestCandidates => reports.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))),
        }
        let mut steps = Vec::with_capacity(n);
        let mut blocks = Vec::new();
        for (_, start, report) in &reports {
            match report {
                None => steps.push(Step { round: *start, block: None, remaining_after: 0 }),
                Some((w, soft)) => {
                    let b = blocks.len();
                    blocks.push(Block { first_step: steps.len(), len: w.len(), count: w.count, soft: *soft });
                    for (i, round) in (w.start..w.end).enumerate() {
                        steps.push(Step { round, block: Some(b), remaining_after: w.len() - i - 1 });
                    }
                }
            }
        }

        let lambda = prob.soft_weight;
        let weight = |b: &Block, m: usize| if b.soft { lambda / (1.0 + lambda * m as f64) } else { 1.0 / m as f64 };
        // Row sum of the rounds of `b` at or after step `t`.
        let tail_sum = |b: &Block, t: usize| {
            let mut w = vec![0.0; rank];
            for step in &steps[t.max(b.first_step)..b.first_step + b.len] {
                w.iter_mut().zip(row(step.round)).for_each(|(a, u)| *a += u);
            }
            w
        };

        let mut factors = Vec::with_capacity(n + 1);
        let mut widths = Vec::with_capacity(n + 1);
        let mut fixed_s = Vec::with_capacity(n + 1);
        let mut fixed_c = Vec::with_capacity(n + 1);
        let mut partial = Vec::with_capacity(n + 1);
        let mut decided = DMatrix::<f64>::zeros(rank, rank);
        for t in 0..=n {
            if t > 0 {
                let u = nalgebra::DVector::from_column_slice(row(steps[t - 1].round));
                decided += &u * u.transpose();
            }
            let mut gram = decided.clone();
            let mut fs = vec![0.0; rank];
            let mut fc = 0.0;
            let mut part = None;
            for (bi, b) in blocks.iter().enumerate() {
                let end = b.first_step + b.len;
                if end <= t {
                    continue;
                }
                let m = end - t.max(b.first_step);
                let om = weight(b, m);
                let w = tail_sum(b, t);
                let wv = nalgebra::DVector::from_column_slice(&w);
                gram += om * &wv * wv.transpose();
                if b.first_step >= t {
                    let c = b.count as f64;
                    fs.iter_mut().zip(&w).for_each(|(a, wi)| *a += om * c * wi);
                    fc += om * c * c;
                } else {
                    part = Some(Partial { block: bi, weighted_row: w.iter().map(|v| om * v).collect(), weight: om });
                }
            }
            let (vals, vecs) = symmetric_eigen(&gram)?;
            let cutoff = GRAM_EIGEN_TOLERANCE * vals.first().copied().unwrap_or(0.0).max(0.0);
            let kept: Vec<usize> = (0..rank).filter(|&j| vals[j] > cutoff && vals[j] > 0.0).collect();
            let mut l = Vec::with_capacity(rank * kept.len());
            for &j in &kept {
                let scale = 1.0 / vals[j].sqrt();
                l.extend(vecs.column(j).iter().map(|v| v * scale));
            }
            factors.push(l);
            widths.push(kept.len());
            fixed_s.push(fs);
            fixed_c.push(fc);
            partial.push(part);
        }
        let step_proj = (0..n)
            .map(|t| {
                let mut v = row(steps[t].round).to_vec();
                if let Some(p) = &partial[t + 1] {
                    v.iter_mut().zip(&p.weighted_row).for_each(|(a, b)| *a -= b);
                }
                project(&factors[t + 1], widths[t + 1], rank, &v)
            })
            .collect();
        Ok(Self {
            n,
            rank,
            steps,
            blocks,
            soft_weight: lambda,
            rows,
            factors,
            widths,
            fixed_s,
            fixed_c,
            partial,
            step_proj,
        })
    }

    fn row(&self, round: usize) -> &[f64] {
        &self.rows[round * self.rank..(round + 1) * self.rank]
    }

    /// Search order as round indices.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn round_order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.round).collect()
    }

    /// Bound for a prefix of the search order, computed from scratch.
    #[cfg(test)]
    pub(crate) fn prefix_bound(&self, prefix: &[u8]) -> f64 {
        let t = prefix.len();
        let mut s = self.fixed_s[t].clone();
        let mut ones = 0.0;
        let mut k = vec![0i64; self.blocks.len()];
        for (step, &x) in self.steps.iter().zip(prefix) {
            if x == 1 {
                ones += 1.0;
                s.iter_mut().zip(self.row(step.round)).for_each(|(a, u)| *a += u);
                if let Some(b) = step.block {
                    k[b] += 1;
                }
            }
        }
        let mut c = ones + self.fixed_c[t];
        if let Some(p) = &self.partial[t] {
            let e = (self.blocks[p.block].count - k[p.block]) as f64;
            s.iter_mut().zip(&p.weighted_row).for_each(|(a, w)| *a += e * w);
            c += p.weight * e * e;
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.soft && block.first_step + block.len <= t {
                c += self.soft_weight * ((k[b] - block.count) as f64).powi(2);
            }
        }
        let a = project(&self.factors[t], self.widths[t], self.rank, &s);
        (c - a.iter().map(|v| v * v).sum::<f64>()).max(0.0)
    }
}

/// `L^T v` for `L` stored column-major as `rank x width`.
fn project(l: &[f64], width: usize, rank: usize, v: &[f64]) -> Vec<f64> {
    (0..width).map(|j| l[j * rank..(j + 1) * rank].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// What the search keeps.
struct Incumbents {
    best: f64,
    /// Near-optimal leaves: value and (for the first few) the vector.
    found: Vec<(f64, Option<Vec<u8>>)>,
    cap: usize,
}

impl Incumbents {
    fn stored(&self) -> usize {
        self.found.iter().filter(|f| f.1.is_some()).count()
    }

    fn offer(&mut self, value: f64, p: &[u8], tol: f64) {
        if value < self.best {
            self.best = value;
            let cutoff = value + tol;
            self.found.retain(|f| f.0 <= cutoff);
            self.found.push((value, Some(p.to_vec())));
        } else if value <= self.best + tol {
            let keep = self.stored() < self.cap;
            self.found.push((value, keep.then(|| p.to_vec())));
        }
    }
}

enum Mode<'p> {
    /// Find the optimum and every vector within tolerance of it.
    Optimise,
    /// Look for any vector other than `exclude` at or below `threshold`.
    Witness { threshold: f64, exclude: &'p [u8] },
}

struct Engine<'a, 'p> {
    prob: &'a ColumnProblem<'a>,
    tables: &'a Tables,
    mode: Mode<'p>,
    // Search state.
    p: Vec<u8>,
    /// Sum of `u_i` over decided ones.
    s: Vec<f64>,
    ones: f64,
    block_ones: Vec<i64>,
    /// Penalty of fully decided soft windows.
    soft_done: f64,
    scratch: Vec<f64>,
    // Results and budget.
    inc: Incumbents,
    witness: Option<Vec<u8>>,
    nodes: u64,
    started: Instant,
    out_of_budget: bool,
}

impl<'a, 'p> Engine<'a, 'p> {
    fn new(prob: &'a ColumnProblem<'a>, tables: &'a Tables, mode: Mode<'p>) -> Self {
        Self {
            prob,
            tables,
            mode,
            p: vec![0; tables.n],
            s: vec![0.0; tables.rank],
            ones: 0.0,
            block_ones: vec![0; tables.blocks.len()],
            soft_done: 0.0,
            scratch: vec![0.0; tables.rank],
            inc: Incumbents { best: f64::INFINITY, found: Vec::new(), cap: prob.max_optima.max(1) },
            witness: None,
            nodes: 0,
            started: Instant::now(),
            out_of_budget: false,
        }
    }

    fn threshold(&self) -> f64 {
        match self.mode {
            Mode::Optimise => self.inc.best + self.prob.tolerance,
            Mode::Witness { threshold, .. } => threshold,
        }
    }

    fn done(&self) -> bool {
        self.out_of_budget || self.witness.is_some()
    }

    fn tick(&mut self) {
        self.nodes += 1;
        let limits = &self.prob.limits;
        if limits.node_limit.is_some_and(|cap| self.nodes > cap) {
            self.out_of_budget = true;
        }
        if let Some(limit) = limits.time_limit {
            if limit.is_zero() || (self.nodes % CLOCK_STRIDE == 0 && self.started.elapsed() >= limit) {
                self.out_of_budget = true;
            }
        }
    }

    fn leaf(&mut self, value: f64) {
        match self.mode {
            Mode::Optimise => self.inc.offer(value, &self.p, self.prob.tolerance),
            Mode::Witness { threshold, exclude } => {
                if value <= threshold && self.p != exclude {
                    self.witness = Some(self.p.clone());
                }
            }
        }
    }

    fn visit(&mut self, t: usize) {
        self.tick();
        if self.done() {
            return;
        }
        let tables = self.tables;
        if t == tables.n {
            let a = project(&tables.factors[t], tables.widths[t], tables.rank, &self.s);
            let value = (self.ones + self.soft_done - a.iter().map(|v| v * v).sum::<f64>()).max(0.0);
            self.leaf(value);
            return;
        }
        let step = &tables.steps[t];
        let block = step.block.map(|b| (b, &tables.blocks[b]));
        // Missing ones in this step's window before deciding it.
        let missing = block.map_or(0, |(b, blk)| blk.count - self.block_ones[b]);

        // Base vector at depth t + 1 for x = 0.
        self.scratch.copy_from_slice(&self.s);
        self.scratch.iter_mut().zip(&tables.fixed_s[t + 1]).for_each(|(a, f)| *a += f);
        let partial = tables.partial[t + 1].as_ref();
        if let Some(p) = partial {
            let e = missing as f64;
            self.scratch.iter_mut().zip(&p.weighted_row).for_each(|(a, w)| *a += e * w);
        }
        let base = project(&tables.factors[t + 1], tables.widths[t + 1], tables.rank, &self.scratch);
        let delta = &tables.step_proj[t];

        let mut children: [(u8, f64); 2] = [(0, f64::INFINITY); 2];
        let mut count = 0;
        for x in [0u8, 1] {
            let xi = x as i64;
            let mut constant = self.ones + x as f64 + tables.fixed_c[t + 1] + self.soft_done;
            if let Some((_, blk)) = block {
                if !blk.soft && (xi > missing || missing - xi > step.remaining_after as i64) {
                    continue;
                }
                if step.remaining_after == 0 && blk.soft {
                    constant += self.prob.soft_weight * ((missing - xi) as f64).powi(2);
                }
            }
            if let Some(p) = partial {
                constant += p.weight * ((missing - xi) as f64).powi(2);
            }
            let proj_sq: f64 = if x == 0 {
                base.iter().map(|v| v * v).sum()
            } else {
                base.iter().zip(delta).map(|(a, b)| (a + b) * (a + b)).sum()
            };
            children[count] = (x, (constant - proj_sq).max(0.0));
            count += 1;
        }
        if count == 2 && children[1].1 < children[0].1 {
            children.swap(0, 1);
        }
        for &(x, child_bound) in &children[..count] {
            if child_bound > self.threshold() || self.done() {
                continue;
            }
            self.set(t, x, true);
            self.visit(t + 1);
            self.set(t, x, false);
        }
    }

    /// Applies (`on`) or reverts the decision `x` for step `t`.
    fn set(&mut self, t: usize, x: u8, on: bool) {
        let tables = self.tables;
        let step = &tables.steps[t];
        let sign = if on { 1.0 } else { -1.0 };
        if let Some(b) = step.block {
            let blk = &tables.blocks[b];
            if blk.soft && step.remaining_after == 0 {
                let k = self.block_ones[b] + if on { x as i64 } else { 0 };
                self.soft_done += sign * self.prob.soft_weight * ((k - blk.count) as f64).powi(2);
            }
            self.block_ones[b] += if on { x as i64 } else { -(x as i64) };
        }
        if x == 1 {
            self.ones += sign;
            self.s.iter_mut().zip(tables.row(step.round)).for_each(|(a, u)| *a += sign * u);
        }
        self.p[step.round] = if on { x } else { 0 };
    }
}

fn hard_counts_possible(prob: &ColumnProblem<'_>) -> bool {
    prob.hard.iter().all(|w| (0..=w.len() as i64).contains(&w.count))
}

/// Exact branch-and-bound for one column.
pub fn solve_column(prob: &ColumnProblem<'_>) -> Result<ColumnSolution, SolverError> {
    prob.validate()?;
    let started = Instant::now();
    if !hard_counts_possible(prob) {
        return Ok(infeasible(started.elapsed()));
    }
    let tables = Tables::build(prob).map_err(|e| SolverError::Malformed(e.to_string()))?;
    let mut engine = Engine::new(prob, &tables, Mode::Optimise);
    engine.started = started;
    engine.visit(0);

    let Engine { inc, nodes, out_of_budget, .. } = engine;
    let mut found = inc.found;
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let optima_count = found.len();
    let optima: Vec<Vec<u8>> = found.into_iter().filter_map(|f| f.1).take(prob.max_optima.max(1)).collect();
    let p = optima.first().cloned();
    let status = if out_of_budget {
        ColumnStatus::TimeoutIncumbent
    } else {
        settled_status(inc.best, optima_count, prob.tolerance)
    };
    let objective = p.as_deref().map_or(f64::INFINITY, |p| prob.objective(p));
    Ok(ColumnSolution { p, objective, status, solve_time: started.elapsed(), nodes, optima, optima_count })
}

fn infeasible(elapsed: Duration) -> ColumnSolution {
    ColumnSolution {
        p: None,
        objective: f64::INFINITY,
        status: ColumnStatus::Infeasible,
        solve_time: elapsed,
        nodes: 0,
        optima: Vec::new(),
        optima_count: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Uniqueness {
    Unique,
    /// A second feasible vector within tolerance of the optimum.
    Witness(Vec<u8>),
    /// The budget ran out before the search space was exhausted.
    Uncertified,
}

/// Searches for a feasible vector other than `incumbent.p` whose objective is
/// within tolerance of `incumbent.objective`.
pub fn certify_uniqueness(prob: &ColumnProblem<'_>, incumbent: &ColumnSolution) -> Result<Uniqueness, SolverError> {
    prob.validate()?;
    let Some(p) = incumbent.p.as_deref() else {
        return Err(SolverError::Malformed("no incumbent to certify".into()));
    };
    let tables = Tables::build(prob).map_err(|e| SolverError::Malformed(e.to_string()))?;
    let threshold = incumbent.objective + prob.tolerance;
    let mut engine = Engine::new(prob, &tables, Mode::Witness { threshold, exclude: p });
    engine.visit(0);
    Ok(match (engine.witness, engine.out_of_budget) {
        (Some(w), _) => Uniqueness::Witness(w),
        (None, true) => Uniqueness::Uncertified,
        (None, false) => Uniqueness::Unique,
    })
}
