//! Cluster diagnostics: global separation, purity and radius.
//!
//! Global separation contrasts, for each cluster `c`, the truncated mean of
//! its intra-cluster pairwise distances `P(c, c)` with the truncated mean of
//! cross distances to its closest other cluster `P(c, c')`:
//!
//! ```text
//! GS_c = (P(c, c') - P(c, c)) / max(P(c, c'), P(c, c))
//! ```
//!
//! Each truncated mean averages the `ceil(x * M)` smallest of the `M`
//! distances in its list. Distances are streamed through a bounded max-heap,
//! so memory stays proportional to the number of kept distances, and the
//! kept values are sorted before summing so results never depend on
//! scheduling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{from_labels, ClusterAssignment};
use crate::embedding::{CheckpointSeries, EmbeddingSet};
use crate::error::{Error, Result};
use crate::geometry::{cosine_with_norms, norm, squared_euclidean, DistanceMetric, GaussianStats};

/// Settings for [`global_separation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    /// Fraction of each pairwise-distance list kept, in `(0, 1]`.
    pub fraction_x: f64,
    /// Cosine or Euclidean.
    pub metric: DistanceMetric,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            fraction_x: 0.1,
            metric: DistanceMetric::Cosine,
        }
    }
}

impl SeparationConfig {
    pub fn new(fraction_x: f64, metric: DistanceMetric) -> Result<Self> {
        let config = SeparationConfig { fraction_x, metric };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction_x > 0.0 && self.fraction_x <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction x = {} must lie in (0, 1]",
                self.fraction_x
            )));
        }
        if self.metric == DistanceMetric::Mahalanobis {
            return Err(Error::InvalidArgument(
                "global separation supports cosine and euclidean distances".into(),
            ));
        }
        Ok(())
    }
}

/// `ceil(q * n)` clamped to `[1, n]`, forgiving floating-point noise such as
/// `0.95 * 100 = 95.00000000000001`.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let exact = q * n as f64;
    let rounded = exact.round();
    let rank = if (exact - rounded).abs() <= 1e-9 * exact.abs().max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    (rank as usize).clamp(1, n.max(1))
}

#[derive(Clone, Copy, PartialEq)]
struct Ordered(f64);

impl Eq for Ordered {}

impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Mean of the `keep` smallest values pushed into it.
struct TruncatedMean {
    keep: usize,
    heap: BinaryHeap<Ordered>,
}

impl TruncatedMean {
    fn new(keep: usize) -> Self {
        TruncatedMean {
            keep,
            heap: BinaryHeap::with_capacity(keep.min(1 << 20)),
        }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if self.heap.len() < self.keep {
            self.heap.push(Ordered(v));
        } else if let Some(mut top) = self.heap.peek_mut() {
            if v < top.0 {
                *top = Ordered(v);
            }
        }
    }

    fn mean(self) -> f64 {
        let mut kept: Vec<f64> = self.heap.into_iter().map(|o| o.0).collect();
        kept.sort_unstable_by(f64::total_cmp);
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

struct PairDistance<'a> {
    set: &'a EmbeddingSet,
    norms: Vec<f64>,
    metric: DistanceMetric,
}

impl PairDistance<'_> {
    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.set.row(i), self.set.row(j));
        match self.metric {
            DistanceMetric::Cosine => cosine_with_norms(a, self.norms[i], b, self.norms[j]),
            _ => squared_euclidean(a, b).sqrt(),
        }
    }
}

/// Sample rows are compared in blocks so each block's rows stay in cache.
const BLOCK: usize = 64;

fn intra_mean(dist: &PairDistance<'_>, members: &[usize], fraction: f64) -> f64 {
    let n = members.len();
    let total = n * (n - 1) / 2;
    let mut acc = TruncatedMean::new(nearest_rank(fraction, total));
    for bi in (0..n).step_by(BLOCK) {
        for bj in (bi..n).step_by(BLOCK) {
            for a in bi..(bi + BLOCK).min(n) {
                let start = if bi == bj { a + 1 } else { bj };
                for b in start..(bj + BLOCK).min(n) {
                    acc.push(dist.get(members[a], members[b]));
                }
            }
        }
    }
    acc.mean()
}

fn cross_mean(dist: &PairDistance<'_>, left: &[usize], right: &[usize], fraction: f64) -> f64 {
    let mut acc = TruncatedMean::new(nearest_rank(fraction, left.len() * right.len()));
    for bi in (0..left.len()).step_by(BLOCK) {
        for bj in (0..right.len()).step_by(BLOCK) {
            for &a in &left[bi..(bi + BLOCK).min(left.len())] {
                for &b in &right[bj..(bj + BLOCK).min(right.len())] {
                    acc.push(dist.get(a, b));
                }
            }
        }
    }
    acc.mean()
}

fn separation_ratio(inter: f64, intra: f64) -> f64 {
    let denom = inter.max(intra);
    if denom == 0.0 {
        0.0
    } else {
        (inter - intra) / denom
    }
}

/// Global separation of every cluster.
pub fn global_separation(
    set: &EmbeddingSet,
    clusters: &ClusterAssignment,
    config: &SeparationConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_cover(set, clusters)?;
    let k = clusters.num_clusters();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "global separation needs at least two clusters".into(),
        ));
    }
    if let Some(c) = (0..k).find(|&c| clusters.members(c).len() < 2) {
        return Err(Error::InvalidData(format!(
            "cluster {c} has a single member; global separation needs at least 2"
        )));
    }
    let norms = match config.metric {
        DistanceMetric::Cosine => set
            .rows()
            .enumerate()
            .map(|(i, r)| match norm(r) {
                0.0 => Err(Error::ZeroNorm { row: i }),
                n => Ok(n),
            })
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let dist = PairDistance {
        set,
        norms,
        metric: config.metric,
    };
    let x = config.fraction_x;
    let intra: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|c| intra_mean(&dist, clusters.members(c), x))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
        .collect();
    let cross: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| cross_mean(&dist, clusters.members(a), clusters.members(b), x))
        .collect();
    let mut inter = vec![f64::INFINITY; k];
    for (&(a, b), &p) in pairs.iter().zip(&cross) {
        inter[a] = inter[a].min(p);
        inter[b] = inter[b].min(p);
    }
    Ok(inter
        .iter()
        .zip(&intra)
        .map(|(&p_inter, &p_intra)| separation_ratio(p_inter, p_intra))
        .collect())
}

fn check_cover(set: &EmbeddingSet, clusters: &ClusterAssignment) -> Result<()> {
    if clusters.len() != set.len() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} samples but the set has {}",
            clusters.len(),
            set.len()
        )));
    }
    Ok(())
}

/// Fraction of each cluster's members that carry its most common label.
pub fn cluster_purity(clusters: &ClusterAssignment, labels: &[u32]) -> Result<Vec<f64>> {
    if labels.len() != clusters.len() {
        return Err(Error::InvalidData(format!(
            "{} labels for {} assigned samples",
            labels.len(),
            clusters.len()
        )));
    }
    Ok(clusters
        .all_members()
        .iter()
        .map(|members| {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in members {
                *counts.entry(labels[i]).or_default() += 1;
            }
            let majority = counts.values().copied().max().unwrap_or(0);
            majority as f64 / members.len() as f64
        })
        .collect())
}

/// Distance from each cluster mean within which a `quantile` of the
/// cluster's members lie (nearest-rank, no interpolation).
pub fn cluster_radius(
    set: &EmbeddingSet,
    clusters: &ClusterAssignment,
    metric: DistanceMetric,
    quantile: f64,
) -> Result<Vec<f64>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "radius quantile {quantile} must lie in (0, 1]"
        )));
    }
    check_cover(set, clusters)?;
    clusters
        .all_members()
        .par_iter()
        .enumerate()
        .map(|(c, members)| {
            let rows = members.iter().map(|&i| set.row(i));
            let mut dists: Vec<f64> = match metric {
                DistanceMetric::Mahalanobis => {
                    if members.len() < 2 {
                        return Err(Error::InvalidData(format!(
                            "cluster {c} has a single member; its covariance is degenerate"
                        )));
                    }
                    let stats = GaussianStats::from_rows(set.dim(), rows.clone())?;
                    rows.map(|x| crate::geometry::mahalanobis_score(x, &stats))
                        .collect::<Result<_>>()?
                }
                _ => {
                    let mut mean = vec![0.0; set.dim()];
                    for x in rows.clone() {
                        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= members.len() as f64);
                    let mean_norm = norm(&mean);
                    rows.map(|x| match metric {
                        DistanceMetric::Cosine => {
                            let n = norm(x);
                            if n == 0.0 || mean_norm == 0.0 {
                                Err(Error::InvalidData(format!(
                                    "cluster {c}: cosine distance undefined for zero vectors"
                                )))
                            } else {
                                Ok(cosine_with_norms(x, n, &mean, mean_norm))
                            }
                        }
                        _ => Ok(squared_euclidean(x, &mean).sqrt()),
                    })
                    .collect::<Result<_>>()?
                }
            };
            dists.sort_unstable_by(f64::total_cmp);
            Ok(dists[nearest_rank(quantile, dists.len()) - 1])
        })
        .collect()
}

/// Global separation of the ground-truth classes at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSeparation {
    pub epoch: u64,
    pub global_separation: Vec<f64>,
}

/// Global separation of the labelled classes at every checkpoint, in epoch
/// order.
pub fn separation_evolution(
    series: &CheckpointSeries,
    config: &SeparationConfig,
) -> Result<Vec<EpochSeparation>> {
    series
        .entries()
        .iter()
        .map(|(epoch, set)| {
            let gs = from_labels(set)
                .and_then(|clusters| global_separation(set, &clusters, config))
                .map_err(|e| e.context(format!("epoch {epoch}")))?;
            Ok(EpochSeparation {
                epoch: *epoch,
                global_separation: gs,
            })
        })
        .collect()
}

/// Per-cluster diagnostics for one clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub sizes: Vec<usize>,
    pub per_cluster_gs: Vec<f64>,
    /// Absent when the data carries no labels.
    pub per_cluster_purity: Option<Vec<f64>>,
    pub per_cluster_radius: Vec<f64>,
    pub radius_quantile: f64,
}

/// Computes separation, purity (when `set` is labelled) and radius.
pub fn quality_report(
    set: &EmbeddingSet,
    clusters: &ClusterAssignment,
    separation: &SeparationConfig,
    radius_metric: DistanceMetric,
    radius_quantile: f64,
) -> Result<QualityReport> {
    let per_cluster_gs =
        global_separation(set, clusters, separation).map_err(|e| e.context("global separation"))?;
    let per_cluster_purity = set
        .labels()
        .map(|labels| cluster_purity(clusters, labels))
        .transpose()
        .map_err(|e| e.context("purity"))?;
    let per_cluster_radius = cluster_radius(set, clusters, radius_metric, radius_quantile)
        .map_err(|e| e.context("radius"))?;
    Ok(QualityReport {
        sizes: clusters.all_members().iter().map(Vec::len).collect(),
        per_cluster_gs,
        per_cluster_purity,
        per_cluster_radius,
        radius_quantile,
    })
}

impl QualityReport {
    /// `cluster,size,global_separation,purity,radius_q<quantile>`; the purity
    /// cell is empty for unlabelled data.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "cluster,size,global_separation,purity,radius_q{}\n",
            self.radius_quantile
        );
        for c in 0..self.sizes.len() {
            let purity = self
                .per_cluster_purity
                .as_ref()
                .map(|p| p[c].to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{c},{},{},{purity},{}\n",
                self.sizes[c], self.per_cluster_gs[c], self.per_cluster_radius[c]
            ));
        }
        out
    }

    pub fn mean_gs(&self) -> f64 {
        self.per_cluster_gs.iter().sum::<f64>() / self.per_cluster_gs.len() as f64
    }
}

/// `epoch,cluster,global_separation` rows.
pub fn evolution_to_csv(rows: &[EpochSeparation]) -> String {
    let mut out = String::from("epoch,cluster,global_separation\n");
    for row in rows {
        for (c, gs) in row.global_separation.iter().enumerate() {
            out.push_str(&format!("{},{c},{gs}\n", row.epoch));
        }
    }
    out
}
