//! k-means++ seeding followed by Lloyd iterations.
//!
//! Randomness comes from a ChaCha8 generator seeded with the caller's 64-bit
//! seed: one uniform index for the first center, then one uniform `f64` per
//! further center, inverted against the cumulative squared-distance weights
//! in row order. Results therefore depend on the seed and on row order, and
//! are identical across platforms and thread counts.
//!
//! With `n_init > 1`, restart `r` draws from stream `r` of the same seed and
//! the run with the lowest inertia is kept (earliest on ties).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_dim, repair_empty, Assigned, Centers, ClusterAssignment, ClusterSource};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{squared_euclidean, DistanceMetric};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence threshold on the summed squared centroid shift, relative
    /// to the mean per-feature variance of the data.
    pub tol: f64,
    /// Number of independently seeded runs.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared Euclidean distances to the assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step, ending with the final one.
    pub inertia_trace: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Nearest centroid for each sample under `metric` (cosine or Euclidean).
    pub fn assign(&self, samples: &EmbeddingSet, metric: DistanceMetric) -> Result<Assigned> {
        check_dim(samples, self.dim())?;
        let centers = Centers::new(self.centroids.iter().map(Vec::as_slice).collect(), None);
        centers.check(metric)?;
        centers.assign_all(samples.as_slice(), samples.dim(), metric)
    }
}

/// Nearest centroid (squared Euclidean, lowest index on ties) for every row.
fn assign_rows(set: &EmbeddingSet, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    set.as_slice()
        .par_chunks_exact(set.dim())
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_euclidean(x, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// Index drawn with probability proportional to `weights` (total `total > 0`).
fn sample_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target && w > 0.0 {
            return i;
        }
    }
    // Rounding can leave `acc` just short of `target`.
    weights.iter().rposition(|&w| w > 0.0).expect("total > 0")
}

/// Greedy k-means++: each new seed is the best of `2 + ln k` D²-sampled
/// candidates, judged by the potential it leaves.
fn plus_plus_init(set: &EmbeddingSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = set.len();
    let trials = 2 + (k as f64).ln() as usize;
    let first = rng.random_range(0..n);
    let mut centroids = vec![set.row(first).to_vec()];
    let mut d2: Vec<f64> = set
        .as_slice()
        .par_chunks_exact(set.dim())
        .map(|x| squared_euclidean(x, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centroids.push(set.row(rng.random_range(0..n)).to_vec());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let i = sample_weighted(&d2, total, rng);
            let c = set.row(i);
            let next: Vec<f64> = d2
                .par_iter()
                .zip(set.as_slice().par_chunks_exact(set.dim()))
                .map(|(&d, x)| d.min(squared_euclidean(x, c)))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, i, next));
            }
        }
        let (_, i, next) = best.expect("at least two trials");
        d2 = next;
        centroids.push(set.row(i).to_vec());
    }
    centroids
}

fn mean_feature_variance(set: &EmbeddingSet) -> f64 {
    let (n, d) = (set.len() as f64, set.dim());
    let mut mean = vec![0.0; d];
    for row in set.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for row in set.rows() {
        var += squared_euclidean(row, &mean);
    }
    var / (n * d as f64)
}

/// Recomputes centroids as member means. A centroid left without members
/// is moved onto the sample farthest from its own new centroid.
fn update_centroids(set: &EmbeddingSet, labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (k, d) = (previous.len(), set.dim());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in set.rows().zip(labels) {
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[c] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    if counts.contains(&0) {
        let mut taken = vec![false; set.len()];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, row) in set.rows().enumerate() {
                if taken[i] {
                    continue;
                }
                let dist = squared_euclidean(row, &sums[labels[i]]);
                if best.is_none_or(|(_, b)| dist > b) {
                    best = Some((i, dist));
                }
            }
            if let Some((i, _)) = best {
                taken[i] = true;
                sums[c] = set.row(i).to_vec();
            }
        }
    }
    sums
}

/// Fits `k` centroids to `set`.
pub fn kmeans_fit(
    set: &EmbeddingSet,
    k: usize,
    options: &KMeansOptions,
) -> Result<(KMeansModel, ClusterAssignment)> {
    if k == 0 || k > set.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be between 1 and the number of samples ({})",
            set.len()
        )));
    }
    if options.n_init == 0 {
        return Err(Error::InvalidArgument("n_init must be at least 1".into()));
    }
    let mut best = fit_once(set, k, options, 0);
    for run in 1..options.n_init as u64 {
        let candidate = fit_once(set, k, options, run);
        if candidate.0.inertia < best.0.inertia {
            best = candidate;
        }
    }
    let (model, labels) = best;
    let assignment = ClusterAssignment::new(labels, k, ClusterSource::KMeans)?;
    Ok((model, assignment))
}

fn fit_once(
    set: &EmbeddingSet,
    k: usize,
    options: &KMeansOptions,
    stream: u64,
) -> (KMeansModel, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(stream);
    let mut centroids = plus_plus_init(set, k, &mut rng);
    let threshold = options.tol * mean_feature_variance(set);
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    for it in 0..options.max_iter {
        let (labels, dists) = assign_rows(set, &centroids);
        trace.push(dists.iter().sum::<f64>());
        let next = update_centroids(set, &labels, &centroids);
        let shift: f64 = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_euclidean(a, b))
            .sum();
        centroids = next;
        iterations_run = it + 1;
        if shift <= threshold {
            break;
        }
    }
    let (mut labels, own) = assign_rows(set, &centroids);
    let moved = repair_empty(&mut labels, k, |i, _| own[i]);
    for (i, c) in moved {
        centroids[c] = set.row(i).to_vec();
    }
    let inertia: f64 = set
        .rows()
        .zip(&labels)
        .map(|(x, &c)| squared_euclidean(x, &centroids[c]))
        .sum();
    trace.push(inertia);
    (
        KMeansModel {
            centroids,
            inertia,
            iterations_run,
            inertia_trace: trace,
        },
        labels,
    )
}
