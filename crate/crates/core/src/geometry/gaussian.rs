//! Per-cluster Gaussian statistics with a regularized Cholesky factor.
//!
//! Covariances use the biased `1/n` estimator. Before factoring, `eps * I` is
//! added with `eps = max(1e-6 * trace / D, 1e-12)`, which keeps clusters with
//! fewer members than dimensions usable. All quadratic forms go through
//! triangular solves against the stored factor; no explicit inverse is formed.

use std::f64::consts::PI;

use super::distance::dot;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

const RELATIVE_RIDGE: f64 = 1e-6;
const RIDGE_FLOOR: f64 = 1e-12;
/// Column block of the batched triangular solve.
const SOLVE_BLOCK: usize = 16;
/// Rows per block in batched kernels.
pub(crate) const ROW_BLOCK: usize = 128;

/// Ridge added to the diagonal of `covariance` (`dim x dim`, row-major).
pub fn regularization_epsilon(covariance: &[f64], dim: usize) -> f64 {
    let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
    (RELATIVE_RIDGE * trace / dim as f64).max(RIDGE_FLOOR)
}

/// Lower-triangular Cholesky factor of a symmetric `n x n` row-major matrix.
/// Returns `None` when the matrix is not positive definite.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Mean, covariance and regularized factor of one Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    factor: Vec<f64>,
    epsilon: f64,
    log_det: f64,
}

impl GaussianStats {
    /// Builds stats from moments, regularizing with the default ridge rule.
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let eps = regularization_epsilon(&covariance, mean.len());
        GaussianStats::with_epsilon(mean, covariance, eps)
    }

    /// Builds stats with an explicit diagonal ridge `epsilon` (may be 0 for a
    /// covariance already known to be positive definite).
    pub fn with_epsilon(mean: Vec<f64>, covariance: Vec<f64>, epsilon: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("Gaussian of dimension 0".into()));
        }
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                actual: covariance.len(),
            });
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid ridge {epsilon}")));
        }
        let mut regularized = covariance.clone();
        for i in 0..d {
            regularized[i * d + i] += epsilon;
        }
        let factor = cholesky(&regularized, d).ok_or_else(|| {
            Error::Numerical(format!(
                "covariance is not positive definite after adding ridge {epsilon:e}"
            ))
        })?;
        let log_det = 2.0 * (0..d).map(|i| factor[i * d + i].ln()).sum::<f64>();
        Ok(GaussianStats {
            mean,
            covariance,
            factor,
            epsilon,
            log_det,
        })
    }

    /// Mean and biased covariance of `rows`, summed in iteration order.
    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: Clone,
    {
        let rows = rows.into_iter();
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows.clone() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "cannot estimate a Gaussian from zero samples".into(),
            ));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let cov = scatter_about(dim, rows, &mean);
        let mut cov = cov;
        finish_symmetric(&mut cov, dim, 1.0 / n as f64);
        GaussianStats::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unregularized covariance.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// Lower Cholesky factor of `covariance + epsilon * I`, row-major.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `log det(covariance + epsilon * I)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis distance using `scratch` as workspace.
    #[inline]
    pub(crate) fn mahalanobis_with(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let mut out = [0.0];
        self.mahalanobis_rows(x, &mut out, scratch);
        out[0]
    }

    /// Unweighted log density using `scratch` as workspace.
    #[inline]
    pub(crate) fn log_density_with(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        self.log_density_from(self.mahalanobis_with(x, scratch))
    }

    /// Squared Mahalanobis distances of the row-major block `rows` into
    /// `out`.
    pub(crate) fn mahalanobis_rows(&self, rows: &[f64], out: &mut [f64], work: &mut Vec<f64>) {
        let mut columns = Vec::new();
        transpose_rows(rows, self.dim(), &mut columns);
        self.mahalanobis_columns(&columns, out, work);
    }

    /// Squared Mahalanobis distances of the samples in the feature-major
    /// block `columns` (`columns[i * m + j]` is feature `i` of sample `j`)
    /// into `out`, by blocked forward substitution. The off-diagonal parts of
    /// the solve are matrix products; every sample goes through the same
    /// operation sequence, so one sample's result does not depend on the
    /// others in the block.
    pub(crate) fn mahalanobis_columns(
        &self,
        columns: &[f64],
        out: &mut [f64],
        work: &mut Vec<f64>,
    ) {
        let d = self.dim();
        let m = columns.len() / d;
        if m == 0 {
            return;
        }
        let l = &self.factor;
        work.clear();
        work.extend_from_slice(columns);
        for (dst, mu) in work.chunks_exact_mut(m).zip(&self.mean) {
            dst.iter_mut().for_each(|w| *w -= mu);
        }
        let mut j0 = 0;
        while j0 < d {
            let jb = SOLVE_BLOCK.min(d - j0);
            if j0 > 0 {
                let p = work.as_mut_ptr();
                // SAFETY: B reads feature rows 0..j0 and C writes feature rows
                // j0..j0 + jb of the same d x m buffer; the regions are
                // disjoint and every index stays inside the buffer.
                unsafe {
                    matrixmultiply::dgemm(
                        jb,
                        j0,
                        m,
                        -1.0,
                        l.as_ptr().add(j0 * d),
                        d as isize,
                        1,
                        p,
                        m as isize,
                        1,
                        1.0,
                        p.add(j0 * m),
                        m as isize,
                        1,
                    );
                }
            }
            for i in j0..j0 + jb {
                let (solved, rest) = work.split_at_mut(i * m);
                let yi = &mut rest[..m];
                for t in j0..i {
                    let lit = l[i * d + t];
                    yi.iter_mut()
                        .zip(&solved[t * m..(t + 1) * m])
                        .for_each(|(y, s)| *y -= lit * s);
                }
                let lii = l[i * d + i];
                yi.iter_mut().for_each(|y| *y /= lii);
            }
            j0 += jb;
        }
        out[..m].fill(0.0);
        for yi in work.chunks_exact(m) {
            out.iter_mut().zip(yi).for_each(|(o, y)| *o += y * y);
        }
    }

    /// Unweighted log density from a squared Mahalanobis distance.
    #[inline]
    pub(crate) fn log_density_from(&self, mahalanobis: f64) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * PI).ln() + self.log_det + mahalanobis)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Feature-major copy of the row-major `rows` (`n x d`) into `columns`.
pub(crate) fn transpose_rows(rows: &[f64], d: usize, columns: &mut Vec<f64>) {
    let m = rows.len() / d;
    columns.clear();
    columns.resize(rows.len(), 0.0);
    for (i, dst) in columns.chunks_exact_mut(m.max(1)).enumerate().take(d) {
        dst.iter_mut()
            .zip(rows[i..].iter().step_by(d))
            .for_each(|(w, v)| *w = *v);
    }
}

/// `cov += centered^T * weighted` for row-major `m x d` blocks, filling the
/// full `d x d` matrix.
pub(crate) fn accumulate_scatter(cov: &mut [f64], d: usize, centered: &[f64], weighted: &[f64]) {
    let m = centered.len() / d;
    assert!(cov.len() == d * d && weighted.len() == m * d);
    // SAFETY: the shapes and strides above describe exactly the three slices.
    unsafe {
        matrixmultiply::dgemm(
            d,
            m,
            d,
            1.0,
            centered.as_ptr(),
            1,
            d as isize,
            weighted.as_ptr(),
            d as isize,
            1,
            1.0,
            cov.as_mut_ptr(),
            d as isize,
            1,
        );
    }
}

/// Unscaled scatter matrix `sum (x - mean)(x - mean)^T` of `rows`, in row
/// blocks of [`ROW_BLOCK`].
pub(crate) fn scatter_about<'a, I>(d: usize, rows: I, mean: &[f64]) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut cov = vec![0.0; d * d];
    let mut centered = Vec::with_capacity(ROW_BLOCK * d);
    let mut rows = rows.into_iter().peekable();
    while rows.peek().is_some() {
        centered.clear();
        for x in rows.by_ref().take(ROW_BLOCK) {
            centered.extend(x.iter().zip(mean).map(|(v, m)| v - m));
        }
        accumulate_scatter(&mut cov, d, &centered, &centered);
    }
    cov
}

/// Scales the lower triangle by `scale` and mirrors it into the upper one.
pub(crate) fn finish_symmetric(cov: &mut [f64], d: usize, scale: f64) {
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] * scale;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
}

/// Column mean and biased covariance of every row of `samples`.
pub fn estimate_gaussian(samples: &EmbeddingSet) -> Result<GaussianStats> {
    GaussianStats::from_rows(samples.dim(), samples.rows())
}

/// `(x - mu)^T (Sigma + eps I)^{-1} (x - mu)`, without a square root.
pub fn mahalanobis_score(x: &[f64], stats: &GaussianStats) -> Result<f64> {
    stats.check(x)?;
    Ok(stats.mahalanobis_with(x, &mut Vec::with_capacity(x.len())))
}

/// `log weight - (D log 2pi + log det + mahalanobis) / 2`.
pub fn log_gaussian_density(x: &[f64], stats: &GaussianStats, weight: f64) -> Result<f64> {
    stats.check(x)?;
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "component weight must be in (0, 1], got {weight}"
        )));
    }
    Ok(weight.ln() + stats.log_density_with(x, &mut Vec::with_capacity(x.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Split;
    use proptest::prelude::*;

    fn set(data: Vec<f64>, dim: usize) -> EmbeddingSet {
        EmbeddingSet::new(data, dim, None, Split::Train, "t").unwrap()
    }

    #[test]
    fn single_sample_regularizes_to_floor() {
        let g = estimate_gaussian(&set(vec![1.0, 2.0], 2)).unwrap();
        assert_eq!(g.covariance(), &[0.0; 4]);
        assert_eq!(g.epsilon(), 1e-12);
        assert_eq!(g.mean(), &[1.0, 2.0]);
    }

    #[test]
    fn four_point_moments() {
        let g = estimate_gaussian(&set(vec![0., 0., 2., 0., 0., 2., 2., 2.], 2)).unwrap();
        assert_eq!(g.mean(), &[1.0, 1.0]);
        assert_eq!(g.covariance(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn duplication_invariance() {
        let a = set(vec![0.5, 1.0, -2.0, 3.0, 4.0, 0.25], 2);
        let b = set(
            vec![
                0.5, 1.0, 0.5, 1.0, -2.0, 3.0, -2.0, 3.0, 4.0, 0.25, 4.0, 0.25,
            ],
            2,
        );
        let (ga, gb) = (
            estimate_gaussian(&a).unwrap(),
            estimate_gaussian(&b).unwrap(),
        );
        for (x, y) in ga.mean().iter().zip(gb.mean()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in ga.covariance().iter().zip(gb.covariance()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let g = GaussianStats::new(vec![1.0, -1.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mahalanobis_score(&[1.0, -1.0], &g).unwrap(), 0.0);
        // Default ridge perturbs the exact 2.0 by ~3e-6.
        assert!((mahalanobis_score(&[3.0, 0.0], &g).unwrap() - 2.0).abs() < 1e-5);

        let exact =
            GaussianStats::with_epsilon(vec![1.0, -1.0], vec![4.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        assert_eq!(mahalanobis_score(&[3.0, 0.0], &exact).unwrap(), 2.0);

        let id = GaussianStats::with_epsilon(
            vec![0.0; 3],
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            0.0,
        )
        .unwrap();
        assert!((mahalanobis_score(&[1.0, 2.0, -2.0], &id).unwrap() - 9.0).abs() < 1e-14);
        assert!(mahalanobis_score(&[1.0], &id).is_err());
    }

    #[test]
    fn density_at_mean_one_dimension() {
        // Chosen so that the regularized variance is exactly 1.
        let c = 1.0 / (1.0 + RELATIVE_RIDGE);
        let g = GaussianStats::new(vec![0.0], vec![c]).unwrap();
        let v = log_gaussian_density(&[0.0], &g, 1.0).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn density_weight_and_distance_shifts() {
        let g = GaussianStats::with_epsilon(vec![0.0, 0.0], vec![1., 0., 0., 1.], 0.0).unwrap();
        let half = log_gaussian_density(&[0.3, 0.1], &g, 0.25).unwrap();
        let full = log_gaussian_density(&[0.3, 0.1], &g, 0.5).unwrap();
        assert!((full - half - 2f64.ln()).abs() < 1e-14);
        let at_mean = log_gaussian_density(&[0.0, 0.0], &g, 1.0).unwrap();
        let far = log_gaussian_density(&[6.0, 8.0], &g, 1.0).unwrap();
        assert!((far - at_mean + 50.0).abs() < 1e-12);
        assert!(log_gaussian_density(&[0.0, 0.0], &g, 0.0).is_err());
    }

    #[test]
    fn density_integrates_to_weight() {
        let g = GaussianStats::new(vec![0.7], vec![2.5]).unwrap();
        let (lo, hi, steps) = (-20.0, 20.0, 40_000);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += w * log_gaussian_density(&[x], &g, 0.3).unwrap().exp();
        }
        assert!((total * h - 0.3).abs() < 1e-3);
    }

    #[test]
    fn indefinite_covariance_is_reported() {
        let err =
            GaussianStats::with_epsilon(vec![0.0, 0.0], vec![1., 2., 2., 1.], 0.0).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn isotropic_matches_scaled_euclidean() {
        let s2 = 9.0;
        let g = GaussianStats::new(
            vec![1.0, 2.0, 3.0],
            vec![s2, 0., 0., 0., s2, 0., 0., 0., s2],
        )
        .unwrap();
        let x = [2.0, 0.0, 4.5];
        let sq = 1.0 + 4.0 + 2.25;
        let m = mahalanobis_score(&x, &g).unwrap();
        assert!((m - sq / (s2 + g.epsilon())).abs() < 1e-12);
        assert!((m - sq / s2).abs() / (sq / s2) < 2e-6);
    }

    #[test]
    fn batched_mahalanobis_matches_rowwise() {
        let d = 70;
        let rows: Vec<f64> = (0..300 * d)
            .map(|i| ((i * 7919 % 1013) as f64 / 101.0).sin())
            .collect();
        let g = GaussianStats::from_rows(d, rows.chunks_exact(d)).unwrap();
        let mut batch = vec![0.0; 300];
        g.mahalanobis_rows(&rows, &mut batch, &mut Vec::new());
        let mut single = [0.0];
        let l = g.factor();
        for (i, x) in rows.chunks_exact(d).enumerate() {
            // Unblocked forward substitution.
            let mut y: Vec<f64> = x.iter().zip(g.mean()).map(|(a, m)| a - m).collect();
            for r in 0..d {
                let s: f64 = (0..r).map(|c| l[r * d + c] * y[c]).sum();
                y[r] = (y[r] - s) / l[r * d + r];
            }
            let plain: f64 = y.iter().map(|v| v * v).sum();
            assert!(
                (batch[i] - plain).abs() <= 1e-10 * plain.max(1.0),
                "{} vs {plain}",
                batch[i]
            );
            g.mahalanobis_rows(x, &mut single, &mut Vec::new());
            assert_eq!(single[0], batch[i], "row {i} depends on its block");
        }
    }

    proptest! {
        #[test]
        fn mahalanobis_non_negative_and_zero_only_at_mean(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12),
            x in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let g = GaussianStats::from_rows(3, rows.iter().map(|r| r.as_slice())).unwrap();
            let m = mahalanobis_score(&x, &g).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(mahalanobis_score(g.mean(), &g).unwrap(), 0.0);
            if x.iter().zip(g.mean()).any(|(a, b)| a != b) {
                prop_assert!(m > 0.0);
            }
        }

        #[test]
        fn estimate_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..20),
            rot in 0usize..20,
        ) {
            let mut shuffled = rows.clone();
            let r = rot % rows.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let a = GaussianStats::from_rows(3, rows.iter().map(|r| r.as_slice())).unwrap();
            let b = GaussianStats::from_rows(3, shuffled.iter().map(|r| r.as_slice())).unwrap();
            for (x, y) in a.mean().iter().zip(b.mean()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in a.covariance().iter().zip(b.covariance()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
