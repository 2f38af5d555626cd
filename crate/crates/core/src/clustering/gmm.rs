//! Full-covariance Gaussian mixtures fitted by expectation maximisation.
//!
//! Initialization comes from a k-means run with the same seed: component
//! means are the centroids, covariances the member scatter about them, and
//! weights the member fractions. Every M-step covariance is regularized with
//! the same ridge rule as [`GaussianStats::new`].

use rayon::prelude::*;

use super::{
    check_dim, kmeans_fit, repair_empty, Assigned, Centers, ClusterAssignment, ClusterSource,
    KMeansOptions,
};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{
    accumulate_scatter, finish_symmetric, scatter_about, transpose_rows, DistanceMetric,
    GaussianStats, ROW_BLOCK,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than
    /// `tol * max(|previous|, 1)`.
    pub tol: f64,
    pub kmeans: KMeansOptions,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: Vec<GaussianStats>,
    pub weights: Vec<f64>,
    /// Mean per-sample log-likelihood of the training data under the final
    /// parameters.
    pub final_log_likelihood: f64,
    /// Mean log-likelihood after each E-step, starting with the initial
    /// parameters.
    pub log_likelihood_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations_run: usize,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn new(components: Vec<GaussianStats>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "a mixture needs one weight per component and at least one component".into(),
            ));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidArgument(
                "mixture components differ in dimension".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1 (sum {total})"
            )));
        }
        Ok(GmmModel {
            components,
            weights,
            final_log_likelihood: f64::NAN,
            log_likelihood_trace: Vec::new(),
            iterations_run: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `log w_k + log N(x | k)` for every row of the row-major block `rows`,
    /// written row-major (`m x K`) into `out`.
    fn joint_log_block(&self, rows: &[f64], out: &mut [f64], buffers: &mut [Vec<f64>; 3]) {
        let k = self.k();
        let m = rows.len() / self.dim();
        let [columns, work, maha] = buffers;
        transpose_rows(rows, self.dim(), columns);
        maha.resize(m, 0.0);
        for (c, (stats, &w)) in self.components.iter().zip(&self.weights).enumerate() {
            if w > 0.0 {
                stats.mahalanobis_columns(columns, maha, work);
                let lw = w.ln();
                for (i, &q) in maha.iter().enumerate() {
                    out[i * k + c] = lw + stats.log_density_from(q);
                }
            } else {
                for i in 0..m {
                    out[i * k + c] = f64::NEG_INFINITY;
                }
            }
        }
    }

    /// Joint log densities (`N x K`, row-major) of every row of `samples`.
    /// Rows are processed in fixed blocks, so results do not depend on the
    /// thread count.
    pub(crate) fn joint_log_densities(&self, samples: &[f64]) -> Vec<f64> {
        let (k, d) = (self.k(), self.dim());
        let mut out = vec![0.0; samples.len() / d * k];
        out.par_chunks_mut(ROW_BLOCK * k)
            .zip(samples.par_chunks(ROW_BLOCK * d))
            .for_each_init(Default::default, |buffers, (o, rows)| {
                self.joint_log_block(rows, o, buffers)
            });
        out
    }

    fn single(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = vec![0.0; self.k()];
        self.joint_log_block(x, &mut out, &mut Default::default());
        Ok(out)
    }

    /// `log sum_k w_k N(x | k)`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.single(x)?))
    }

    /// Posterior component probabilities of `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.single(x)?;
        let total = log_sum_exp(&out);
        out.iter_mut().for_each(|v| *v = (*v - total).exp());
        Ok(out)
    }

    /// Component with the highest responsibility for each row of the
    /// row-major `samples` (lowest index on ties).
    pub(crate) fn most_responsible(&self, samples: &[f64]) -> Vec<usize> {
        self.joint_log_densities(samples)
            .chunks_exact(self.k())
            .map(argmax)
            .collect()
    }

    /// Log-likelihood of every row, in row order.
    pub fn log_likelihoods(&self, samples: &EmbeddingSet) -> Result<Vec<f64>> {
        check_dim(samples, self.dim())?;
        Ok(self
            .joint_log_densities(samples.as_slice())
            .chunks_exact(self.k())
            .map(log_sum_exp)
            .collect())
    }

    /// Argmax-responsibility component of each sample and its distance to
    /// that component under `metric`.
    pub fn assign(&self, samples: &EmbeddingSet, metric: DistanceMetric) -> Result<Assigned> {
        check_dim(samples, self.dim())?;
        let centers = Centers::new(
            self.components.iter().map(GaussianStats::mean).collect(),
            Some(self.components.iter().collect()),
        );
        centers.check(metric)?;
        let clusters = self.most_responsible(samples.as_slice());
        let distances = samples
            .as_slice()
            .par_chunks_exact(samples.dim())
            .zip(&clusters)
            .map_init(Vec::new, |scratch, (x, &c)| {
                let x_norm = super::sample_norm(x, metric)?;
                Ok(centers.distance(x, x_norm, c, metric, scratch))
            })
            .collect::<Result<_>>()?;
        Ok(Assigned {
            clusters,
            distances,
        })
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

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Responsibilities (row-major `N x K`) and the mean log-likelihood.
fn expectation(model: &GmmModel, set: &EmbeddingSet) -> (Vec<f64>, f64) {
    let k = model.k();
    let mut resp = model.joint_log_densities(set.as_slice());
    let lls: Vec<f64> = resp
        .par_chunks_exact_mut(k)
        .map(|r| {
            let ll = log_sum_exp(r);
            r.iter_mut().for_each(|v| *v = (*v - ll).exp());
            ll
        })
        .collect();
    let mean = lls.iter().sum::<f64>() / set.len() as f64;
    (resp, mean)
}

/// Responsibilities below this are treated as zero in the M-step. Their
/// share of any component's moments is far below double precision, and
/// skipping them keeps subnormal products out of the accumulation.
const NEGLIGIBLE_RESPONSIBILITY: f64 = 1e-100;

/// Weighted mean and biased covariance of component `c`, or `None` when it
/// has no responsibility mass.
fn weighted_moments(
    set: &EmbeddingSet,
    resp: &[f64],
    k: usize,
    c: usize,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let d = set.dim();
    let weights: Vec<f64> = resp
        .iter()
        .skip(c)
        .step_by(k)
        .map(|&r| {
            if r < NEGLIGIBLE_RESPONSIBILITY {
                0.0
            } else {
                r
            }
        })
        .collect();
    let mass: f64 = weights.iter().sum();
    if mass <= 0.0 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for (x, &r) in set.rows().zip(&weights) {
        if r != 0.0 {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += r * v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut cov = vec![0.0; d * d];
    let mut centered = Vec::with_capacity(ROW_BLOCK * d);
    let mut weighted = Vec::with_capacity(ROW_BLOCK * d);
    let mut rows = set
        .rows()
        .zip(&weights)
        .filter(|(_, &r)| r != 0.0)
        .peekable();
    while rows.peek().is_some() {
        centered.clear();
        weighted.clear();
        for (x, &r) in rows.by_ref().take(ROW_BLOCK) {
            let start = centered.len();
            centered.extend_from_slice(x);
            let row = &mut centered[start..];
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
            weighted.extend_from_slice(row);
            weighted[start..].iter_mut().for_each(|v| *v *= r);
        }
        accumulate_scatter(&mut cov, d, &centered, &weighted);
    }
    finish_symmetric(&mut cov, d, 1.0 / mass);
    Some((mass, mean, cov))
}

fn maximization(previous: &GmmModel, set: &EmbeddingSet, resp: &[f64]) -> Result<GmmModel> {
    let k = previous.k();
    let updated: Vec<(f64, Option<GaussianStats>)> = (0..k)
        .into_par_iter()
        .map(|c| match weighted_moments(set, resp, k, c) {
            None => Ok((0.0, None)),
            Some((mass, mean, cov)) => Ok((mass, Some(GaussianStats::new(mean, cov)?))),
        })
        .collect::<Result<_>>()?;
    let total: f64 = updated.iter().map(|(m, _)| m).sum();
    let mut components = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for ((mass, stats), old) in updated.into_iter().zip(&previous.components) {
        components.push(stats.unwrap_or_else(|| old.clone()));
        weights.push(mass / total);
    }
    Ok(GmmModel {
        components,
        weights,
        final_log_likelihood: f64::NAN,
        log_likelihood_trace: Vec::new(),
        iterations_run: 0,
    })
}

fn initial_model(set: &EmbeddingSet, k: usize, options: &GmmOptions) -> Result<GmmModel> {
    let kmeans = KMeansOptions {
        seed: options.seed,
        ..options.kmeans
    };
    let (km, clusters) = kmeans_fit(set, k, &kmeans)?;
    let d = set.dim();
    let mut components = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for (c, centroid) in km.centroids.iter().enumerate() {
        let members = clusters.members(c);
        let mut cov = scatter_about(d, members.iter().map(|&i| set.row(i)), centroid);
        finish_symmetric(&mut cov, d, 1.0 / members.len() as f64);
        components.push(GaussianStats::new(centroid.clone(), cov)?);
        weights.push(members.len() as f64 / set.len() as f64);
    }
    Ok(GmmModel {
        components,
        weights,
        final_log_likelihood: f64::NAN,
        log_likelihood_trace: Vec::new(),
        iterations_run: 0,
    })
}

/// Fits a `k`-component mixture to `set` and assigns each sample to its
/// most responsible component.
pub fn gmm_fit(
    set: &EmbeddingSet,
    k: usize,
    options: &GmmOptions,
) -> Result<(GmmModel, ClusterAssignment)> {
    if k == 0 || k > set.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be between 1 and the number of samples ({})",
            set.len()
        )));
    }
    let mut model = initial_model(set, k, options)?;
    let (mut resp, mut ll) = expectation(&model, set);
    let mut trace = vec![ll];
    let mut iterations_run = 0;
    for it in 1..=options.max_iter {
        let next = maximization(&model, set, &resp)?;
        let (next_resp, next_ll) = expectation(&next, set);
        trace.push(next_ll);
        model = next;
        resp = next_resp;
        iterations_run = it;
        let converged = next_ll - ll < options.tol * ll.abs().max(1.0);
        ll = next_ll;
        if converged {
            break;
        }
    }
    let mut ids: Vec<usize> = resp.chunks_exact(k).map(argmax).collect();
    repair_empty(&mut ids, k, |i, c| resp[i * k + c]);
    model.final_log_likelihood = ll;
    model.log_likelihood_trace = trace;
    model.iterations_run = iterations_run;
    let assignment = ClusterAssignment::new(ids, k, ClusterSource::Gmm)?;
    Ok((model, assignment))
}
