//! Reference distance distributions and probability scores.
//!
//! A [`ClusterModel`] stores, for every training cluster, its mean and the
//! sorted distances of the cluster's own training members to that mean. A
//! test sample is assigned to its nearest cluster and its distance is ranked
//! against either that cluster's list or the pooled list of all clusters.
//! Only training distances ever enter a reference list.

mod persist;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{Assigned, Centers, ClusterAssignment, GmmModel};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{DistanceMetric, GaussianStats};

/// How a raw score is turned into a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Rank against the assigned cluster's reference list.
    Cluster,
    /// Rank against the pooled reference list of every cluster.
    Global,
    /// Rank the mixture log-likelihood against the training log-likelihoods.
    GmmDefault,
}

impl ThresholdMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThresholdMode::Cluster => "cluster",
            ThresholdMode::Global => "global",
            ThresholdMode::GmmDefault => "gmm_default",
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(ThresholdMode::Cluster),
            "global" => Ok(ThresholdMode::Global),
            "gmm_default" | "gmm" => Ok(ThresholdMode::GmmDefault),
            _ => Err(Error::InvalidArgument(format!(
                "unknown threshold mode '{s}'"
            ))),
        }
    }
}

/// A test sample's score. `value` is in `[0, 1]`, higher meaning more
/// in-distribution.
///
/// Under [`ThresholdMode::GmmDefault`], `raw_distance` holds the negative
/// mixture log-likelihood and `assigned_cluster` the most responsible
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityScore {
    pub value: f64,
    pub assigned_cluster: usize,
    pub raw_distance: f64,
}

/// Mid-rank survival fraction of `d` within ascending `sorted`:
/// `(#{r > d} + 0.5 * #{r == d}) / n`.
pub fn survival_fraction(sorted: &[f64], d: f64) -> f64 {
    let below = sorted.partition_point(|&r| r < d);
    let at_most = sorted.partition_point(|&r| r <= d);
    let greater = sorted.len() - at_most;
    let equal = at_most - below;
    (greater as f64 + 0.5 * equal as f64) / sorted.len() as f64
}

/// Mid-rank cumulative fraction of `v` within ascending `sorted`:
/// `(#{r < v} + 0.5 * #{r == v}) / n`.
pub fn cumulative_fraction(sorted: &[f64], v: f64) -> f64 {
    let below = sorted.partition_point(|&r| r < v);
    let at_most = sorted.partition_point(|&r| r <= v);
    (below as f64 + 0.5 * (at_most - below) as f64) / sorted.len() as f64
}

fn sort_ascending(values: &mut [f64]) {
    values.sort_unstable_by(f64::total_cmp);
}

#[derive(Debug, Clone, PartialEq)]
struct MixtureReference {
    model: GmmModel,
    /// Training log-likelihoods, ascending.
    train_log_likelihoods: Vec<f64>,
}

/// Per-cluster means and reference distance lists fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    metric: DistanceMetric,
    means: Vec<Vec<f64>>,
    stats: Option<Vec<GaussianStats>>,
    references: Vec<Vec<f64>>,
    global: Vec<f64>,
    mixture: Option<MixtureReference>,
}

fn member_mean(train: &EmbeddingSet, members: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; train.dim()];
    for &i in members {
        mean.iter_mut().zip(train.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= members.len() as f64);
    mean
}

impl ClusterModel {
    /// Computes each cluster's mean (and Gaussian statistics for
    /// Mahalanobis) and the sorted distances of its members to it.
    pub fn fit(
        train: &EmbeddingSet,
        clusters: &ClusterAssignment,
        metric: DistanceMetric,
    ) -> Result<Self> {
        if clusters.len() != train.len() {
            return Err(Error::InvalidArgument(format!(
                "assignment covers {} samples but the training set has {}",
                clusters.len(),
                train.len()
            )));
        }
        let gaussian = metric.needs_gaussian();
        if gaussian {
            if let Some(c) = (0..clusters.num_clusters()).find(|&c| clusters.members(c).len() < 2) {
                return Err(Error::InvalidData(format!(
                    "cluster {c} has a single member; mahalanobis needs at least 2"
                )));
            }
        }
        let fitted: Vec<(Vec<f64>, Option<GaussianStats>)> = clusters
            .all_members()
            .par_iter()
            .map(|members| {
                if gaussian {
                    let rows = members.iter().map(|&i| train.row(i));
                    let stats = GaussianStats::from_rows(train.dim(), rows)?;
                    Ok((stats.mean().to_vec(), Some(stats)))
                } else {
                    Ok((member_mean(train, members), None))
                }
            })
            .collect::<Result<_>>()?;
        let (means, stats): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
        let stats = if gaussian {
            Some(stats.into_iter().map(|s| s.expect("fitted")).collect())
        } else {
            None
        };
        let mut model = ClusterModel {
            metric,
            means,
            stats,
            references: Vec::new(),
            global: Vec::new(),
            mixture: None,
        };
        let centers = model.centers();
        centers.check(metric)?;
        let references = clusters
            .all_members()
            .par_iter()
            .enumerate()
            .map_init(Vec::new, |scratch, (c, members)| {
                let mut dists = Vec::with_capacity(members.len());
                for &i in members {
                    let x = train.row(i);
                    let x_norm = crate::clustering::sample_norm(x, metric)?;
                    dists.push(centers.distance(x, x_norm, c, metric, scratch));
                }
                sort_ascending(&mut dists);
                Ok(dists)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut global = references.concat();
        sort_ascending(&mut global);
        model.references = references;
        model.global = global;
        Ok(model)
    }

    /// Attaches a mixture fitted on `train`. Test samples are then assigned
    /// by largest responsibility, and [`ThresholdMode::GmmDefault`] becomes
    /// available. The mixture must have one component per cluster.
    pub fn with_gmm(mut self, gmm: GmmModel, train: &EmbeddingSet) -> Result<Self> {
        if gmm.k() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "mixture has {} components but the model has {} clusters",
                gmm.k(),
                self.k()
            )));
        }
        let mut lls = gmm.log_likelihoods(train)?;
        sort_ascending(&mut lls);
        self.mixture = Some(MixtureReference {
            model: gmm,
            train_log_likelihoods: lls,
        });
        Ok(self)
    }

    pub(crate) fn from_parts(
        metric: DistanceMetric,
        means: Vec<Vec<f64>>,
        stats: Option<Vec<GaussianStats>>,
        references: Vec<Vec<f64>>,
        mixture: Option<(GmmModel, Vec<f64>)>,
    ) -> Result<Self> {
        if means.is_empty() || means.len() != references.len() {
            return Err(Error::InvalidData(
                "model needs one reference list per cluster".into(),
            ));
        }
        if metric.needs_gaussian() && stats.as_ref().is_none_or(|s| s.len() != means.len()) {
            return Err(Error::InvalidData(
                "mahalanobis model lacks Gaussian statistics".into(),
            ));
        }
        for r in &references {
            if r.is_empty() || r.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidData(
                    "reference lists must be non-empty and ascending".into(),
                ));
            }
        }
        let mut global = references.concat();
        sort_ascending(&mut global);
        let model = ClusterModel {
            metric,
            means,
            stats,
            references,
            global,
            mixture: mixture.map(|(model, train_log_likelihoods)| MixtureReference {
                model,
                train_log_likelihoods,
            }),
        };
        model.centers().check(metric)?;
        Ok(model)
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    pub fn stats(&self, c: usize) -> Option<&GaussianStats> {
        self.stats.as_ref().map(|s| &s[c])
    }

    /// Sorted training distances of cluster `c`.
    pub fn reference(&self, c: usize) -> &[f64] {
        &self.references[c]
    }

    /// All per-cluster references pooled and sorted.
    pub fn global_reference(&self) -> &[f64] {
        &self.global
    }

    pub fn gmm(&self) -> Option<&GmmModel> {
        self.mixture.as_ref().map(|m| &m.model)
    }

    /// Sorted training log-likelihoods under the attached mixture.
    pub fn train_log_likelihoods(&self) -> Option<&[f64]> {
        self.mixture
            .as_ref()
            .map(|m| m.train_log_likelihoods.as_slice())
    }

    fn centers(&self) -> Centers<'_> {
        Centers::new(
            self.means.iter().map(Vec::as_slice).collect(),
            self.stats.as_ref().map(|s| s.iter().collect()),
        )
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn assign_rows(&self, rows: &[f64]) -> Result<Assigned> {
        let centers = self.centers();
        let dim = self.dim();
        match &self.mixture {
            Some(m) => {
                let clusters = m.model.most_responsible(rows);
                let distances = rows
                    .par_chunks_exact(dim)
                    .zip(&clusters)
                    .map_init(Vec::new, |scratch, (x, &c)| {
                        let x_norm = crate::clustering::sample_norm(x, self.metric)?;
                        Ok(centers.distance(x, x_norm, c, self.metric, scratch))
                    })
                    .collect::<Result<_>>()?;
                Ok(Assigned {
                    clusters,
                    distances,
                })
            }
            None => centers.assign_all(rows, dim, self.metric),
        }
    }

    /// Cluster of each sample and its distance to that cluster's mean.
    /// Clusters are chosen by nearest mean, or by largest responsibility
    /// when a mixture is attached.
    pub fn assign(&self, samples: &EmbeddingSet) -> Result<Assigned> {
        crate::clustering::check_dim(samples, self.dim())?;
        self.assign_rows(samples.as_slice())
    }

    /// Probability of an already assigned distance under a distance mode.
    pub fn probability(&self, cluster: usize, distance: f64, mode: ThresholdMode) -> Result<f64> {
        match mode {
            ThresholdMode::Cluster => Ok(survival_fraction(&self.references[cluster], distance)),
            ThresholdMode::Global => Ok(survival_fraction(&self.global, distance)),
            ThresholdMode::GmmDefault => Err(Error::InvalidArgument(
                "gmm_default ranks log-likelihoods, not distances".into(),
            )),
        }
    }

    fn mixture(&self) -> Result<&MixtureReference> {
        self.mixture
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model carries no Gaussian mixture".into()))
    }

    fn distance_score(&self, x: &[f64], mode: ThresholdMode) -> Result<ProbabilityScore> {
        self.check_dim(x)?;
        let assigned = self.assign_rows(x)?;
        let (c, d) = (assigned.clusters[0], assigned.distances[0]);
        Ok(ProbabilityScore {
            value: self.probability(c, d, mode)?,
            assigned_cluster: c,
            raw_distance: d,
        })
    }

    /// Scores `x` against its assigned cluster's reference list.
    pub fn score_cluster_threshold(&self, x: &[f64]) -> Result<ProbabilityScore> {
        self.distance_score(x, ThresholdMode::Cluster)
    }

    /// Scores `x` against the pooled reference list.
    pub fn score_global_threshold(&self, x: &[f64]) -> Result<ProbabilityScore> {
        self.distance_score(x, ThresholdMode::Global)
    }

    /// Ranks the mixture log-likelihood of `x` among the training
    /// log-likelihoods, regardless of component.
    pub fn score_gmm_global(&self, x: &[f64]) -> Result<ProbabilityScore> {
        self.check_dim(x)?;
        let m = self.mixture()?;
        let ll = m.model.log_likelihood(x)?;
        let c = m.model.most_responsible(x)[0];
        Ok(ProbabilityScore {
            value: cumulative_fraction(&m.train_log_likelihoods, ll),
            assigned_cluster: c,
            raw_distance: -ll,
        })
    }

    pub fn score(&self, x: &[f64], mode: ThresholdMode) -> Result<ProbabilityScore> {
        match mode {
            ThresholdMode::GmmDefault => self.score_gmm_global(x),
            _ => self.distance_score(x, mode),
        }
    }

    /// Scores every row of `samples`, in row order.
    pub fn score_set(
        &self,
        samples: &EmbeddingSet,
        mode: ThresholdMode,
    ) -> Result<Vec<ProbabilityScore>> {
        crate::clustering::check_dim(samples, self.dim())?;
        if mode == ThresholdMode::GmmDefault {
            let m = self.mixture()?;
            let lls = m.model.log_likelihoods(samples)?;
            let clusters = m.model.most_responsible(samples.as_slice());
            return Ok(lls
                .iter()
                .zip(clusters)
                .map(|(&ll, c)| ProbabilityScore {
                    value: cumulative_fraction(&m.train_log_likelihoods, ll),
                    assigned_cluster: c,
                    raw_distance: -ll,
                })
                .collect());
        }
        let assigned = self.assign(samples)?;
        assigned
            .clusters
            .iter()
            .zip(&assigned.distances)
            .map(|(&c, &d)| {
                Ok(ProbabilityScore {
                    value: self.probability(c, d, mode)?,
                    assigned_cluster: c,
                    raw_distance: d,
                })
            })
            .collect()
    }
}

/// Scores as CSV: `sample,cluster,raw_distance,value`.
pub fn scores_to_csv(scores: &[ProbabilityScore]) -> String {
    let mut out = String::from("sample,cluster,raw_distance,value\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            s.assigned_cluster, s.raw_distance, s.value
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_examples() {
        assert_eq!(survival_fraction(&[1.0, 2.0, 3.0, 4.0, 5.0], 3.0), 0.5);
        assert_eq!(survival_fraction(&[1.0, 1.0, 3.0, 5.0], 2.0), 0.5);
        assert_eq!(survival_fraction(&[1.0, 2.0], 0.5), 1.0);
        assert_eq!(survival_fraction(&[1.0, 2.0], 2.5), 0.0);
        assert_eq!(survival_fraction(&[2.0, 2.0], 2.0), 0.5);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_fraction(&[1.0, 2.0, 3.0, 4.0], 2.0), 0.375);
        assert_eq!(cumulative_fraction(&[1.0, 2.0], -1.0), 0.0);
        assert_eq!(cumulative_fraction(&[1.0, 2.0], 9.0), 1.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            ThresholdMode::Cluster,
            ThresholdMode::Global,
            ThresholdMode::GmmDefault,
        ] {
            assert_eq!(m.as_str().parse::<ThresholdMode>().unwrap(), m);
        }
        assert!("local".parse::<ThresholdMode>().is_err());
    }
}
