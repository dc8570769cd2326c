//! Participation-count side channel.
//!
//! Device analytics tell the server how many times each user trained inside
//! contiguous blocks of rounds. Each such report is a window `[start, end)`
//! together with a count; for the true participation column `p_k` the count
//! equals `sum(p_k[start..end])`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::flsim::ParticipantMatrix;

/// One analytics report: a user trained `count` times in rounds `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCount {
    pub start: usize,
    pub end: usize,
    pub count: i64,
}

impl WindowCount {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, round: usize) -> bool {
        (self.start..self.end).contains(&round)
    }

    /// `C p` for this window's indicator row.
    pub fn apply(&self, p: &[u8]) -> i64 {
        p[self.start..self.end].iter().map(|&b| b as i64).sum()
    }

    /// Dense 0/1 indicator over `n` rounds.
    pub fn indicator(&self, n: usize) -> Vec<u8> {
        (0..n).map(|r| self.contains(r) as u8).collect()
    }
}

/// Knobs for deriving constraints from a participant matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    /// Window length `g`.
    pub granularity: usize,
    /// Probability that a report survives.
    pub kept_fraction: f64,
    /// Standard deviation of the additive count noise.
    pub count_noise_sigma: f64,
    /// Shifts window boundaries by this many rounds (0 aligns to round 0).
    pub phase_offset: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self { granularity: 10, kept_fraction: 1.0, count_noise_sigma: 0.0, phase_offset: 0 }
    }
}

/// All reports, grouped by user.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    pub num_rounds: usize,
    pub granularity: usize,
    pub kept_fraction: f64,
    pub count_noise_sigma: f64,
    /// Counts were perturbed; solvers should treat them as soft.
    pub noisy: bool,
    pub users: Vec<Vec<WindowCount>>,
}

impl ConstraintSet {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn total(&self) -> usize {
        self.users.iter().map(Vec::len).sum()
    }

    /// True when `p` meets every count of `user` exactly.
    pub fn satisfied_by(&self, user: usize, p: &[u8]) -> bool {
        self.users[user].iter().all(|w| w.apply(p) == w.count)
    }
}

/// Window boundaries `[start, end)` covering `0..n` in blocks of `g`, with
/// the first boundary at `offset % g`.
pub fn windows(n: usize, g: usize, offset: usize) -> Vec<(usize, usize)> {
    assert!(g >= 1, "granularity must be at least 1");
    let first = offset % g;
    let mut out = Vec::with_capacity(n / g + 2);
    let mut start = 0;
    let mut end = if first == 0 { g } else { first };
    while start < n {
        out.push((start, end.min(n)));
        start = end;
        end += g;
    }
    out
}

/// Exact per-window participation counts for every user.
pub fn make_constraints(p: &ParticipantMatrix, g: usize) -> ConstraintSet {
    make_constraints_with_offset(p, g, 0)
}

pub fn make_constraints_with_offset(p: &ParticipantMatrix, g: usize, offset: usize) -> ConstraintSet {
    let wins = windows(p.rounds(), g, offset);
    let users = (0..p.users())
        .map(|k| {
            let col = p.column(k);
            wins.iter()
                .map(|&(start, end)| {
                    let w = WindowCount { start, end, count: 0 };
                    WindowCount { count: w.apply(&col), ..w }
                })
                .collect()
        })
        .collect();
    ConstraintSet {
        num_rounds: p.rounds(),
        granularity: g,
        kept_fraction: 1.0,
        count_noise_sigma: 0.0,
        noisy: false,
        users,
    }
}

/// Keeps each report independently with probability `kept_fraction`.
pub fn drop_constraints(cs: &ConstraintSet, kept_fraction: f64, seed: u64) -> ConstraintSet {
    assert!(
        kept_fraction > 0.0 && kept_fraction <= 1.0,
        "kept fraction must be in (0, 1], got {kept_fraction}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = cs
        .users
        .iter()
        .map(|ws| ws.iter().copied().filter(|_| rng.random_bool(kept_fraction)).collect())
        .collect();
    ConstraintSet { kept_fraction: cs.kept_fraction * kept_fraction, users, ..cs.clone() }
}

/// Adds `round(N(0, sigma))` to every count and clamps to `[0, window length]`.
pub fn perturb_counts(cs: &ConstraintSet, sigma: f64, seed: u64) -> ConstraintSet {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    if sigma == 0.0 {
        return cs.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let users = cs
        .users
        .iter()
        .map(|ws| {
            ws.iter()
                .map(|w| {
                    let shift = normal.sample(&mut rng).round() as i64;
                    WindowCount { count: (w.count + shift).clamp(0, w.len() as i64), ..*w }
                })
                .collect()
        })
        .collect();
    ConstraintSet { count_noise_sigma: sigma, noisy: true, users, ..cs.clone() }
}

/// Full analytics pipeline: counts, then dropping, then noise.
pub fn derive(p: &ParticipantMatrix, cfg: &AnalyticsConfig, seed: u64) -> ConstraintSet {
    let mut cs = make_constraints_with_offset(p, cfg.granularity, cfg.phase_offset);
    if cfg.kept_fraction < 1.0 {
        cs = drop_constraints(&cs, cfg.kept_fraction, seed ^ 0x6b65_7074);
    }
    if cfg.count_noise_sigma > 0.0 {
        cs = perturb_counts(&cs, cfg.count_noise_sigma, seed ^ 0x6e6f_6973);
    }
    cs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_user(col: &[u8]) -> ParticipantMatrix {
        ParticipantMatrix::from_columns(&[col.to_vec()])
    }

    #[test]
    fn worked_example_counts() {
        let p = single_user(&[1, 1, 1, 0, 0, 0, 1, 1, 0, 0]);
        let cs = make_constraints(&p, 5);
        let counts: Vec<i64> = cs.users[0].iter().map(|w| w.count).collect();
        assert_eq!(counts, vec![3, 2]);
        assert_eq!(cs.users[0][0].indicator(10), vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn single_window_is_total_count() {
        let p = single_user(&[0, 1, 1, 0, 1, 0, 0]);
        let cs = make_constraints(&p, 7);
        assert_eq!(cs.users[0], vec![WindowCount { start: 0, end: 7, count: 3 }]);
    }

    #[test]
    fn unit_granularity_reveals_column() {
        let col = [0, 1, 1, 0, 1, 0, 0];
        let cs = make_constraints(&single_user(&col), 1);
        let read: Vec<u8> = cs.users[0].iter().map(|w| w.count as u8).collect();
        assert_eq!(read, col);
    }

    #[test]
    fn short_last_window() {
        assert_eq!(windows(12, 5, 0), vec![(0, 5), (5, 10), (10, 12)]);
        assert_eq!(windows(12, 5, 2), vec![(0, 2), (2, 7), (7, 12)]);
    }

    #[test]
    fn drop_with_full_retention_is_identity() {
        let p = single_user(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let cs = make_constraints(&p, 2);
        assert_eq!(drop_constraints(&cs, 1.0, 3).users, cs.users);
    }

    #[test]
    fn drop_half_of_ten_thousand() {
        // 100 users x 100 unit windows.
        let cols: Vec<Vec<u8>> = (0..100).map(|k| (0..100).map(|r| ((r + k) % 3 == 0) as u8).collect()).collect();
        let cs = make_constraints(&ParticipantMatrix::from_columns(&cols), 1);
        assert_eq!(cs.total(), 10_000);
        let kept = drop_constraints(&cs, 0.5, 2024);
        assert!((4600..=5400).contains(&kept.total()), "kept {}", kept.total());
        assert_eq!(kept, drop_constraints(&cs, 0.5, 2024));
        // Surviving windows are untouched.
        for (orig, dropped) in cs.users.iter().zip(&kept.users) {
            assert!(dropped.iter().all(|w| orig.contains(w)));
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let cs = make_constraints(&single_user(&[1, 0, 1, 1]), 2);
        let out = perturb_counts(&cs, 0.0, 1);
        assert_eq!(out, cs);
        assert!(!out.noisy);
    }

    #[test]
    fn perturbed_counts_stay_in_range() {
        let mut cs = make_constraints(&single_user(&[1; 10]), 10);
        cs.users[0][0].count = 5;
        for seed in 0..500 {
            let out = perturb_counts(&cs, 1.0, seed);
            assert!(out.noisy);
            assert!((0..=10).contains(&out.users[0][0].count));
        }
    }

    #[test]
    fn perturbation_spread_matches_sigma() {
        // Interior counts so clamping never triggers; rounding adds 1/12 of
        // variance, so sd is sqrt(1 + 1/12) for sigma = 1 before rounding.
        let n = 100_000;
        let users = vec![(0..n).map(|i| WindowCount { start: 0, end: 40, count: 20 + (i % 3) as i64 }).collect()];
        let cs = ConstraintSet {
            num_rounds: 40,
            granularity: 40,
            kept_fraction: 1.0,
            count_noise_sigma: 0.0,
            noisy: false,
            users,
        };
        let out = perturb_counts(&cs, 1.0, 77);
        let diffs: Vec<f64> = out.users[0].iter().zip(&cs.users[0]).map(|(a, b)| (a.count - b.count) as f64).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let expected = (1.0f64 + 1.0 / 12.0).sqrt();
        assert!((sd - expected).abs() < 0.05, "sd {sd}");
        assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = ParticipantMatrix> {
            (1usize..40, 1usize..5).prop_flat_map(|(n, u)| {
                prop::collection::vec(prop::collection::vec(0u8..2, n), u)
                    .prop_map(|cols| ParticipantMatrix::from_columns(&cols))
            })
        }

        proptest! {
            #[test]
            fn truth_is_feasible_and_windows_disjoint(p in matrix(), g in 1usize..12, offset in 0usize..12) {
                let cs = make_constraints_with_offset(&p, g, offset);
                for k in 0..p.users() {
                    prop_assert!(cs.satisfied_by(k, &p.column(k)));
                    let mut cover = vec![0u8; p.rounds()];
                    for w in &cs.users[k] {
                        prop_assert!(w.len() <= g && w.len() >= 1);
                        prop_assert!(w.count >= 0 && w.count <= w.len() as i64);
                        for r in w.start..w.end { cover[r] += 1; }
                    }
                    prop_assert!(cover.iter().all(|&c| c == 1));
                }
            }

            #[test]
            fn drop_and_perturb_keep_windows(p in matrix(), seed in 0u64..1000) {
                let cs = make_constraints(&p, 3);
                let noisy = perturb_counts(&drop_constraints(&cs, 0.6, seed), 1.5, seed);
                for (orig, out) in cs.users.iter().zip(&noisy.users) {
                    for w in out {
                        prop_assert!(orig.iter().any(|o| o.start == w.start && o.end == w.end));
                    }
                }
            }
        }
    }
}
