//! Dense linear-algebra kernels used by the attack.
//!
//! Everything here works on [`DenseMatrix`], a finite-valued `f64` matrix.
//! The decompositions come from `faer` (SVD, symmetric eigen) and `nalgebra`
//! (QR, storage); this module adds
//! the rank handling the attack needs on top: hard-threshold low-rank
//! approximation, left-nullspace extraction with an explicit rank, and a
//! rank-revealing least-squares solve.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::Error;

/// Relative rank tolerance used on the noiseless path.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

/// A real matrix whose entries are all finite.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    /// Builds a matrix from row-major data.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self, Error> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Self::from_nalgebra(DMatrix::from_row_slice(rows, cols, data))
    }

    /// Wraps an `nalgebra` matrix, rejecting NaN and infinities.
    pub fn from_nalgebra(m: DMatrix<f64>) -> Result<Self, Error> {
        if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % m.nrows(), pos / m.nrows());
            return Err(Error::NonFinite(format!("entry ({r}, {c}) is {}", m[pos])));
        }
        Ok(Self(m))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let m = DMatrix::from_fn(rows, cols, |r, c| f(r, c));
        assert!(m.iter().all(|v| v.is_finite()), "generator produced a non-finite entry");
        Self(m)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[(r, c)]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.0.row(r).iter().copied().collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.0.column(c).iter().copied().collect()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for r in 0..self.rows() {
            out.extend(self.0.row(r).iter());
        }
        out
    }

    pub fn as_nalgebra(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_nalgebra(self) -> DMatrix<f64> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self, Error> {
        if self.cols() != rhs.rows() {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )));
        }
        Ok(Self(&self.0 * &rhs.0))
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<Self, Error> {
        if self.0.shape() != rhs.0.shape() {
            return Err(Error::Shape("shape mismatch in subtraction".into()));
        }
        Ok(Self(&self.0 - &rhs.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    /// Product with a 0/1 vector, returned as a plain vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols());
        let out = &self.0 * DVector::from_column_slice(v);
        out.iter().copied().collect()
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows(), self.cols())?;
        if self.rows() * self.cols() <= 64 {
            write!(f, " {:?}", self.to_row_major())?;
        }
        Ok(())
    }
}

/// Thin singular value decomposition `m = U diag(s) Vt`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `n x r` with orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `r x d` with orthonormal rows.
    pub vt: DMatrix<f64>,
}

impl SvdFactors {
    pub fn largest(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values above `rel_tol * sigma_1`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let cutoff = rel_tol * self.largest();
        self.singular_values.iter().filter(|&&s| s > cutoff).count()
    }

    /// `U[:, ..k] diag(s[..k]) Vt[..k, :]`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.singular_values.len());
        let mut us = self.u.columns(0, k).into_owned();
        for (j, s) in self.singular_values[..k].iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.vt.rows(0, k)
    }
}

/// Thin SVD with singular values sorted in descending order.
pub fn svd(m: &DenseMatrix) -> Result<SvdFactors, Error> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    let a = faer::Mat::<f64>::from_fn(m.rows(), m.cols(), |r, c| m.0[(r, c)]);
    let dec = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Ok(SvdFactors {
        u: DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]),
        singular_values: order.iter().map(|&i| s[i].max(0.0)).collect(),
        vt: DMatrix::from_fn(order.len(), v.nrows(), |r, c| v[(c, order[r])]),
    })
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), Error> {
    assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let a = faer::Mat::<f64>::from_fn(n, n, |r, c| m[(r, c)]);
    let dec = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let (vecs, vals) = (dec.U(), dec.S().column_vector());
    // faer sorts ascending.
    let values = (0..n).rev().map(|i| vals[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| vecs[(r, n - 1 - c)]);
    Ok((values, vectors))
}

/// Best rank-`k` approximation of `m` (top-`k` singular triplets).
pub fn hard_threshold(m: &DenseMatrix, k: usize) -> Result<DenseMatrix, Error> {
    let max_k = m.rows().min(m.cols());
    if k == 0 || k > max_k {
        return Err(Error::InvalidArgument(format!(
            "hard-threshold rank {k} outside 1..={max_k}"
        )));
    }
    let f = svd(m)?;
    DenseMatrix::from_nalgebra(f.reconstruct(k))
}

/// Orthonormal bases for the column space of a matrix and its orthogonal
/// complement (the left nullspace).
#[derive(Clone, Debug)]
pub struct NullspaceBasis {
    /// `(n - r) x n`; rows are orthonormal and orthogonal to every column of
    /// the source matrix.
    pub basis: DMatrix<f64>,
    /// `n x r`; orthonormal columns spanning the source's column space.
    pub range: DMatrix<f64>,
    /// Rank `r` used to split the two spaces.
    pub source_rank: usize,
    /// Largest singular value of the source.
    pub sigma_max: f64,
    /// Set when the source was numerically zero.
    pub degenerate: bool,
}

impl NullspaceBasis {
    /// Ambient dimension `n` (number of rounds).
    pub fn dim(&self) -> usize {
        self.range.nrows()
    }

    pub fn nullity(&self) -> usize {
        self.basis.nrows()
    }

    /// `||N p||^2` computed directly from the nullspace rows.
    pub fn residual_sq(&self, p: &[f64]) -> f64 {
        assert_eq!(p.len(), self.dim());
        let v = DVector::from_column_slice(p);
        (&self.basis * v).norm_squared()
    }
}

/// Left nullspace of `m`, with rank chosen as the number of singular values
/// above `rank_tolerance * sigma_1`.
pub fn left_nullspace(m: &DenseMatrix, rank_tolerance: f64) -> Result<NullspaceBasis, Error> {
    if !(rank_tolerance > 0.0) {
        return Err(Error::InvalidArgument("rank tolerance must be positive".into()));
    }
    let f = svd(m)?;
    let rank = f.rank(rank_tolerance);
    Ok(split_spaces(&f, rank))
}

/// Left nullspace of `m` treating it as exactly rank `rank`.
pub fn left_nullspace_of_rank(m: &DenseMatrix, rank: usize) -> Result<NullspaceBasis, Error> {
    let max_rank = m.rows().min(m.cols());
    if rank > max_rank {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds min(rows, cols) = {max_rank}"
        )));
    }
    let f = svd(m)?;
    Ok(split_spaces(&f, rank))
}

fn split_spaces(f: &SvdFactors, rank: usize) -> NullspaceBasis {
    let n = f.u.nrows();
    let sigma_max = f.largest();
    let degenerate = rank == 0;
    let range = f.u.columns(0, rank).into_owned();
    let basis = if rank == 0 {
        DMatrix::identity(n, n)
    } else {
        // Applying the Householder reflectors of range = QR to the identity
        // yields the full n x n Q^T; its trailing rows span the complement.
        let qr = range.clone().qr();
        let mut qt = DMatrix::identity(n, n);
        qr.q_tr_mul(&mut qt);
        qt.rows(rank, n - rank).into_owned()
    };
    NullspaceBasis { basis, range, source_rank: rank, sigma_max, degenerate }
}

/// Result of a least-squares solve.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub solution: DenseMatrix,
    pub rank: usize,
    /// The design matrix did not have full column rank; `solution` is the
    /// minimum-norm minimizer.
    pub rank_deficient: bool,
}

/// `argmin_X ||a X - b||_F` via the SVD pseudo-inverse.
pub fn least_squares(a: &DenseMatrix, b: &DenseMatrix) -> Result<LeastSquares, Error> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "least squares needs matching rows, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let f = svd(a)?;
    let tol = f64::EPSILON * a.rows().max(a.cols()) as f64 * f.largest();
    let rank = f.singular_values.iter().filter(|&&s| s > tol).count();
    // X = V diag(1/s) U^T b over the retained triplets.
    let utb = f.u.columns(0, rank).transpose() * &b.0;
    let mut scaled = utb;
    for (i, s) in f.singular_values[..rank].iter().enumerate() {
        scaled.row_mut(i).scale_mut(1.0 / s);
    }
    let x = f.vt.rows(0, rank).transpose() * scaled;
    Ok(LeastSquares {
        solution: DenseMatrix::from_nalgebra(x)?,
        rank,
        rank_deficient: rank < a.cols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let f = svd(&DenseMatrix::identity(3)).unwrap();
        for s in f.singular_values {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [2.0, 1.0, -1.0];
        let m = DenseMatrix::from_fn(4, 3, |r, c| a[r] * b[c]);
        let f = svd(&m).unwrap();
        assert_eq!(f.rank(1e-10), 1);
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let m = gaussian(20, 8, 7);
        let f = svd(&m).unwrap();
        assert!(rel_err(&f.reconstruct(8), m.as_nalgebra()) <= 1e-10);

        // Oracle: singular values are square roots of the eigenvalues of m^T m.
        let gram = m.as_nalgebra().transpose() * m.as_nalgebra();
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in f.singular_values.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-10 * eig[0], "{s} vs {e}");
        }
        let utu = f.u.transpose() * &f.u;
        assert!(rel_err(&utu, &DMatrix::identity(8, 8)) < 1e-10);
        let vvt = &f.vt * f.vt.transpose();
        assert!(rel_err(&vvt, &DMatrix::identity(8, 8)) < 1e-10);
    }

    #[test]
    fn symmetric_eigen_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_rejects_empty() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = DenseMatrix::from_row_major(1, 2, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn hard_threshold_keeps_exact_low_rank() {
        let clean = gaussian(12, 2, 1).matmul(&gaussian(2, 9, 2)).unwrap();
        let out = hard_threshold(&clean, 2).unwrap();
        assert!(rel_err(out.as_nalgebra(), clean.as_nalgebra()) <= 1e-9);
        let full = hard_threshold(&clean, 9).unwrap();
        assert!(rel_err(full.as_nalgebra(), clean.as_nalgebra()) <= 1e-10);
    }

    #[test]
    fn hard_threshold_denoises() {
        let clean = gaussian(30, 2, 3).matmul(&gaussian(2, 25, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = DenseMatrix::from_fn(30, 25, |r, c| {
            clean.get(r, c) + 0.01 * rng.sample::<f64, _>(StandardNormal)
        });
        let out = hard_threshold(&noisy, 2).unwrap();
        let d_out = out.sub(&clean).unwrap().frobenius_norm();
        let d_in = noisy.sub(&clean).unwrap().frobenius_norm();
        assert!(d_out < d_in, "{d_out} >= {d_in}");
    }

    #[test]
    fn hard_threshold_rank_out_of_range() {
        let m = gaussian(4, 3, 0);
        assert!(hard_threshold(&m, 0).is_err());
        assert!(hard_threshold(&m, 4).is_err());
    }

    #[test]
    fn nullspace_of_rank_two_columns() {
        let m = gaussian(4, 2, 8).matmul(&gaussian(2, 5, 9)).unwrap();
        let ns = left_nullspace(&m, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(ns.source_rank, 2);
        assert_eq!(ns.nullity(), 2);
        let prod = &ns.basis * m.as_nalgebra();
        assert!(prod.amax() <= 1e-8 * ns.sigma_max);
        let gram = &ns.basis * ns.basis.transpose();
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn nullspace_contains_true_participation_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = loop {
            let p = DenseMatrix::from_fn(30, 8, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            if (0..8).all(|c| p.column(c).iter().any(|&v| v > 0.0)) {
                break p;
            }
        };
        let g = p.matmul(&gaussian(8, 50, 12)).unwrap();
        let ns = left_nullspace(&g, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(ns.source_rank, 8);
        for k in 0..8 {
            assert!(ns.residual_sq(&p.column(k)).sqrt() <= 1e-6);
        }
    }

    #[test]
    fn nullspace_of_invertible_is_empty() {
        let ns = left_nullspace(&gaussian(5, 5, 13), DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(ns.nullity(), 0);
        assert!(!ns.degenerate);
    }

    #[test]
    fn nullspace_of_zero_is_everything() {
        let ns = left_nullspace(&DenseMatrix::zeros(3, 4), DEFAULT_RANK_TOLERANCE).unwrap();
        assert!(ns.degenerate);
        assert_eq!(ns.source_rank, 0);
        assert_eq!(ns.nullity(), 3);
    }

    #[test]
    fn least_squares_identity_and_consistent() {
        let b = gaussian(4, 3, 14);
        let x = least_squares(&DenseMatrix::identity(4), &b).unwrap();
        assert!(rel_err(x.solution.as_nalgebra(), b.as_nalgebra()) < 1e-14);

        let p = DenseMatrix::from_row_major(
            5,
            3,
            &[1., 0., 0., 0., 1., 0., 1., 1., 0., 0., 0., 1., 1., 0., 1.],
        )
        .unwrap();
        let g = gaussian(3, 6, 15);
        let sol = least_squares(&p, &p.matmul(&g).unwrap()).unwrap();
        assert!(!sol.rank_deficient);
        assert!(rel_err(sol.solution.as_nalgebra(), g.as_nalgebra()) <= 1e-8);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = gaussian(9, 3, 16);
        let b = gaussian(9, 2, 17);
        let sol = least_squares(&a, &b).unwrap();
        let an = a.as_nalgebra();
        let oracle = (an.transpose() * an).try_inverse().unwrap() * an.transpose() * b.as_nalgebra();
        let r1 = (an * sol.solution.as_nalgebra() - b.as_nalgebra()).norm();
        let r2 = (an * &oracle - b.as_nalgebra()).norm();
        assert!((r1 - r2).abs() <= 1e-8 * r2.max(1.0));
    }

    #[test]
    fn least_squares_rank_deficient_is_flagged() {
        let a = DenseMatrix::from_row_major(3, 2, &[1., 1., 2., 2., 3., 3.]).unwrap();
        let b = DenseMatrix::from_row_major(3, 1, &[1., 2., 3.]).unwrap();
        let sol = least_squares(&a, &b).unwrap();
        assert!(sol.rank_deficient);
        assert_eq!(sol.rank, 1);
        // Minimum-norm solution splits the weight evenly.
        assert!((sol.solution.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((sol.solution.get(1, 0) - 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = DenseMatrix> {
            (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
                prop::collection::vec(-1e3f64..1e3, r * c)
                    .prop_map(move |d| DenseMatrix::from_row_major(r, c, &d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn svd_round_trip(m in matrix()) {
                let f = svd(&m).unwrap();
                let k = f.singular_values.len();
                prop_assert!(rel_err(&f.reconstruct(k), m.as_nalgebra()) <= 1e-10 || m.frobenius_norm() == 0.0);
                prop_assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
            }

            #[test]
            fn nullspace_annihilates(m in matrix()) {
                let ns = left_nullspace(&m, DEFAULT_RANK_TOLERANCE).unwrap();
                if ns.nullity() > 0 {
                    let prod = &ns.basis * m.as_nalgebra();
                    prop_assert!(prod.amax() <= 1e-8 * ns.sigma_max.max(f64::MIN_POSITIVE));
                }
            }

            #[test]
            fn hard_threshold_idempotent(m in matrix(), k in 1usize..8) {
                let k = k.min(m.rows().min(m.cols()));
                let once = hard_threshold(&m, k).unwrap();
                let twice = hard_threshold(&once, k).unwrap();
                let scale = m.max_abs().max(1.0);
                let diff = once.sub(&twice).unwrap().max_abs();
                prop_assert!(diff <= 1e-12 * scale, "diff {} scale {}", diff, scale);
            }
        }
    }
}
