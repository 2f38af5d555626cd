//! Cluster construction: ground-truth labels, the single-cluster rule,
//! k-means and Gaussian mixtures.

mod gmm;
mod kmeans;

pub use gmm::{gmm_fit, GmmModel, GmmOptions};
pub use kmeans::{kmeans_fit, KMeansModel, KMeansOptions};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{
    cosine_with_norms, norm, squared_euclidean, transpose_rows, DistanceMetric, GaussianStats,
    ROW_BLOCK,
};

/// Where a cluster assignment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    #[serde(rename = "gt")]
    GroundTruth,
    Single,
    #[serde(rename = "kmeans")]
    KMeans,
    Gmm,
}

impl ClusterSource {
    pub const ALL: [ClusterSource; 4] = [
        ClusterSource::GroundTruth,
        ClusterSource::Single,
        ClusterSource::KMeans,
        ClusterSource::Gmm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterSource::GroundTruth => "gt",
            ClusterSource::Single => "single",
            ClusterSource::KMeans => "kmeans",
            ClusterSource::Gmm => "gmm",
        }
    }
}

impl fmt::Display for ClusterSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" | "labels" => Ok(ClusterSource::GroundTruth),
            "single" => Ok(ClusterSource::Single),
            "kmeans" | "km" => Ok(ClusterSource::KMeans),
            "gmm" => Ok(ClusterSource::Gmm),
            _ => Err(Error::InvalidArgument(format!(
                "unknown cluster source '{s}'"
            ))),
        }
    }
}

/// A partition of `N` samples into `K` non-empty clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    source: ClusterSource,
}

impl ClusterAssignment {
    /// Builds an assignment from per-sample cluster ids in `[0, k)`. Every
    /// cluster must receive at least one sample.
    pub fn new(assignment: Vec<usize>, k: usize, source: ClusterSource) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "number of clusters must be at least 1".into(),
            ));
        }
        let mut members = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= k {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} assigned to cluster {c}, but only {k} clusters exist"
                )));
            }
            members[c].push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidData(format!("cluster {c} is empty")));
        }
        Ok(ClusterAssignment {
            assignment,
            members,
            source,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Cluster id of every sample.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sample indices of cluster `c`, ascending.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn all_members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn source(&self) -> ClusterSource {
        self.source
    }
}

/// Clusters from class labels, densely renumbered in ascending label order.
pub fn from_labels(set: &EmbeddingSet) -> Result<ClusterAssignment> {
    let labels = set
        .labels()
        .ok_or_else(|| Error::InvalidData(format!("'{}' has no labels", set.name())))?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let ids = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    ClusterAssignment::new(ids, distinct.len(), ClusterSource::GroundTruth)
}

/// Every sample in cluster 0.
pub fn single_cluster(set: &EmbeddingSet) -> ClusterAssignment {
    ClusterAssignment::new(vec![0; set.len()], 1, ClusterSource::Single)
        .expect("a non-empty set forms one non-empty cluster")
}

/// Cluster ids and the distance of each sample to its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Assigned {
    pub clusters: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Cluster centers prepared for nearest-center queries under any metric.
#[derive(Debug, Clone)]
pub(crate) struct Centers<'a> {
    means: Vec<&'a [f64]>,
    norms: Vec<f64>,
    stats: Option<Vec<&'a GaussianStats>>,
}

impl<'a> Centers<'a> {
    pub(crate) fn new(means: Vec<&'a [f64]>, stats: Option<Vec<&'a GaussianStats>>) -> Self {
        let norms = means.iter().map(|m| norm(m)).collect();
        Centers {
            means,
            norms,
            stats,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.means.len()
    }

    pub(crate) fn check(&self, metric: DistanceMetric) -> Result<()> {
        match metric {
            DistanceMetric::Mahalanobis if self.stats.is_none() => Err(Error::InvalidArgument(
                "mahalanobis distance needs per-cluster Gaussian statistics".into(),
            )),
            DistanceMetric::Cosine => match self.norms.iter().position(|&n| n == 0.0) {
                Some(c) => Err(Error::InvalidData(format!(
                    "cluster {c} has a zero-norm mean; cosine distance is undefined"
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Distance from `x` to center `c`. `x_norm` is only read for cosine.
    #[inline]
    pub(crate) fn distance(
        &self,
        x: &[f64],
        x_norm: f64,
        c: usize,
        metric: DistanceMetric,
        scratch: &mut Vec<f64>,
    ) -> f64 {
        match metric {
            DistanceMetric::Cosine => cosine_with_norms(x, x_norm, self.means[c], self.norms[c]),
            DistanceMetric::Euclidean => squared_euclidean(x, self.means[c]).sqrt(),
            DistanceMetric::Mahalanobis => {
                self.stats.as_ref().expect("checked")[c].mahalanobis_with(x, scratch)
            }
        }
    }

    /// Nearest center under `metric`; ties go to the lowest index.
    pub(crate) fn nearest(
        &self,
        x: &[f64],
        metric: DistanceMetric,
        scratch: &mut Vec<f64>,
    ) -> Result<(usize, f64)> {
        let x_norm = sample_norm(x, metric)?;
        let mut best = (0, f64::INFINITY);
        for c in 0..self.len() {
            let d = self.distance(x, x_norm, c, metric, scratch);
            if d < best.1 {
                best = (c, d);
            }
        }
        Ok(best)
    }
}

impl Centers<'_> {
    /// Nearest center of every row of the row-major `samples`. Mahalanobis
    /// distances are computed in fixed row blocks with the batched solve.
    pub(crate) fn assign_all(
        &self,
        samples: &[f64],
        dim: usize,
        metric: DistanceMetric,
    ) -> Result<Assigned> {
        let pairs: Vec<(usize, f64)> = match (metric, &self.stats) {
            (DistanceMetric::Mahalanobis, Some(stats)) => samples
                .par_chunks(ROW_BLOCK * dim)
                .flat_map_iter(|rows| {
                    let m = rows.len() / dim;
                    let mut best = vec![(0usize, f64::INFINITY); m];
                    let (mut columns, mut work, mut dist) = (Vec::new(), Vec::new(), vec![0.0; m]);
                    transpose_rows(rows, dim, &mut columns);
                    for (c, g) in stats.iter().enumerate() {
                        g.mahalanobis_columns(&columns, &mut dist, &mut work);
                        for (b, &d) in best.iter_mut().zip(&dist) {
                            if d < b.1 {
                                *b = (c, d);
                            }
                        }
                    }
                    best
                })
                .collect(),
            _ => samples
                .par_chunks_exact(dim)
                .map_init(Vec::new, |scratch, x| self.nearest(x, metric, scratch))
                .collect::<Result<_>>()?,
        };
        let (clusters, distances) = pairs.into_iter().unzip();
        Ok(Assigned {
            clusters,
            distances,
        })
    }
}

pub(crate) fn sample_norm(x: &[f64], metric: DistanceMetric) -> Result<f64> {
    if metric != DistanceMetric::Cosine {
        return Ok(0.0);
    }
    let n = norm(x);
    if n == 0.0 {
        return Err(Error::InvalidData(
            "zero-norm sample; cosine distance is undefined".into(),
        ));
    }
    Ok(n)
}

pub(crate) fn check_dim(set: &EmbeddingSet, dim: usize) -> Result<()> {
    if set.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: set.dim(),
        });
    }
    Ok(())
}

/// Moves samples into empty clusters until none remain. For each empty
/// cluster `c` (ascending), the sample with the highest `score(i, c)` among
/// clusters that keep at least one other member is moved; ties go to the
/// lowest sample index. Returns the moved `(sample, cluster)` pairs.
pub(crate) fn repair_empty(
    ids: &mut [usize],
    k: usize,
    score: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; k];
    ids.iter().for_each(|&c| counts[c] += 1);
    let mut moved = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &own) in ids.iter().enumerate() {
            if counts[own] < 2 {
                continue;
            }
            let s = score(i, c);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, _) = best.expect("k <= N leaves a cluster with two or more members");
        counts[ids[i]] -= 1;
        ids[i] = c;
        counts[c] = 1;
        moved.push((i, c));
    }
    moved
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Split;

    fn labelled(labels: Vec<u32>) -> EmbeddingSet {
        let n = labels.len();
        EmbeddingSet::new(
            (0..n).map(|i| i as f64).collect(),
            1,
            Some(labels),
            Split::Train,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn labels_are_densely_remapped() {
        let a = from_labels(&labelled(vec![5, 5, 9])).unwrap();
        assert_eq!(a.num_clusters(), 2);
        assert_eq!(a.assignment(), &[0, 0, 1]);
        assert_eq!(a.members(1), &[2]);
        assert_eq!(a.source(), ClusterSource::GroundTruth);
    }

    #[test]
    fn identical_labels_give_one_cluster() {
        assert_eq!(
            from_labels(&labelled(vec![3; 4])).unwrap().num_clusters(),
            1
        );
    }

    #[test]
    fn ten_classes_give_ten_clusters() {
        let labels = (0..100).map(|i| (i % 10) as u32).collect();
        assert_eq!(from_labels(&labelled(labels)).unwrap().num_clusters(), 10);
    }

    #[test]
    fn unlabelled_set_is_rejected() {
        let s = labelled(vec![0, 1]).without_labels();
        assert!(from_labels(&s).is_err());
    }

    #[test]
    fn single_cluster_ignores_labels() {
        let a = single_cluster(&labelled(vec![0, 1, 2, 3, 4]));
        assert_eq!(a.assignment(), &[0; 5]);
        assert_eq!(a.num_clusters(), 1);
        let one = single_cluster(&labelled(vec![7]));
        assert_eq!(one.members(0), &[0]);
    }

    #[test]
    fn members_partition_samples() {
        let a = ClusterAssignment::new(vec![2, 0, 1, 0, 2], 3, ClusterSource::KMeans).unwrap();
        let mut all: Vec<usize> = a.all_members().concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(ClusterAssignment::new(vec![0, 0], 2, ClusterSource::KMeans).is_err());
        assert!(ClusterAssignment::new(vec![0, 3], 2, ClusterSource::KMeans).is_err());
    }

    #[test]
    fn repair_fills_every_cluster() {
        let mut ids = vec![0; 5];
        let moved = repair_empty(&mut ids, 3, |i, _| i as f64);
        assert_eq!(moved, vec![(4, 1), (3, 2)]);
        assert_eq!(ids, vec![0, 0, 0, 2, 1]);
    }
}
