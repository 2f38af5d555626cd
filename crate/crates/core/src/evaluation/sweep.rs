//! Grid sweep over cluster source, metric, K and threshold mode.
//!
//! Every grid cell builds clusters on the training split, fits a
//! [`ClusterModel`], scores the test-ID split and each OOD split, and
//! reports one AUROC per OOD split. Clusterings are shared between cells
//! that differ only in metric or mode, and distances between cells that
//! differ only in mode. Cosine cells run on L2-normalized copies of every
//! split unless `normalize_cosine` is off; other metrics see raw features.
//!
//! Cells that cannot run (missing labels, K larger than the training set,
//! singleton clusters under Mahalanobis, ...) become rows with an error
//! note instead of disappearing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{auroc, labelled_scores};
use crate::clustering::{
    from_labels, gmm_fit, kmeans_fit, single_cluster, Assigned, ClusterAssignment, ClusterSource,
    GmmModel, GmmOptions, KMeansOptions,
};
use crate::embedding::{l2_normalize, EmbeddingSet};
use crate::error::{Error, Result};
use crate::geometry::DistanceMetric;
use crate::scoring::{ClusterModel, ThresholdMode};

/// Number of clusters requested by a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum KSpec {
    /// As many clusters as distinct training labels.
    Gt,
    Fixed(usize),
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Gt => f.write_str("gt"),
            KSpec::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gt" {
            return Ok(KSpec::Gt);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(KSpec::Fixed(k)),
            _ => Err(Error::InvalidArgument(format!(
                "K must be 'gt' or a positive integer, got '{s}'"
            ))),
        }
    }
}

impl From<KSpec> for String {
    fn from(k: KSpec) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for KSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One requested configuration: `source:metric:K:mode` in text form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub source: ClusterSource,
    pub metric: DistanceMetric,
    pub k: KSpec,
    pub mode: ThresholdMode,
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.source, self.metric, self.k, self.mode
        )
    }
}

impl FromStr for GridCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [source, metric, k, mode] = parts[..] else {
            return Err(Error::InvalidArgument(format!(
                "grid cell '{s}' must look like source:metric:K:mode"
            )));
        };
        let cell = GridCell {
            source: source.parse()?,
            metric: metric.parse()?,
            k: k.parse()?,
            mode: mode.parse()?,
        };
        match (cell.source, cell.k, cell.mode) {
            (ClusterSource::Single, k, _) if k != KSpec::Fixed(1) => Err(Error::InvalidArgument(
                format!("grid cell '{s}': the single source always has K = 1"),
            )),
            (ClusterSource::GroundTruth, KSpec::Fixed(_), _) => Err(Error::InvalidArgument(
                format!("grid cell '{s}': ground-truth clusters take K = gt"),
            )),
            (source, _, ThresholdMode::GmmDefault) if source != ClusterSource::Gmm => {
                Err(Error::InvalidArgument(format!(
                    "grid cell '{s}': gmm_default needs the gmm source"
                )))
            }
            _ => Ok(cell),
        }
    }
}

/// Parses a comma- or whitespace-separated list of grid cells.
pub fn parse_grid(text: &str) -> Result<Vec<GridCell>> {
    let cells: Vec<GridCell> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if cells.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    Ok(cells)
}

/// The standard comparison grid. Learned clusterings use K in
/// {1, 5, 10, 15, 20} plus `gt` when the training data is labelled; the
/// mixture additionally reports `gmm_default` under the Mahalanobis metric.
pub fn default_grid(labelled: bool) -> Vec<GridCell> {
    const MODES: [ThresholdMode; 2] = [ThresholdMode::Cluster, ThresholdMode::Global];
    let mut ks: Vec<KSpec> = [1, 5, 10, 15, 20].into_iter().map(KSpec::Fixed).collect();
    let mut sources = vec![(ClusterSource::Single, vec![KSpec::Fixed(1)])];
    if labelled {
        ks.push(KSpec::Gt);
        sources.insert(0, (ClusterSource::GroundTruth, vec![KSpec::Gt]));
    }
    sources.push((ClusterSource::KMeans, ks.clone()));
    sources.push((ClusterSource::Gmm, ks));
    let mut grid = Vec::new();
    for (source, ks) in sources {
        for &k in &ks {
            for metric in DistanceMetric::ALL {
                for mode in MODES {
                    grid.push(GridCell {
                        source,
                        metric,
                        k,
                        mode,
                    });
                }
            }
            if source == ClusterSource::Gmm {
                grid.push(GridCell {
                    source,
                    metric: DistanceMetric::Mahalanobis,
                    k,
                    mode: ThresholdMode::GmmDefault,
                });
            }
        }
    }
    grid
}

/// Fitting options shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seed: u64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_n_init: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    /// Run cosine cells on L2-normalized data.
    pub normalize_cosine: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let km = KMeansOptions::default();
        let gmm = GmmOptions::default();
        SweepConfig {
            seed: 0,
            kmeans_max_iter: km.max_iter,
            kmeans_tol: km.tol,
            kmeans_n_init: km.n_init,
            gmm_max_iter: gmm.max_iter,
            gmm_tol: gmm.tol,
            normalize_cosine: true,
        }
    }
}

impl SweepConfig {
    pub fn kmeans_options(&self) -> KMeansOptions {
        KMeansOptions {
            seed: self.seed,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            n_init: self.kmeans_n_init,
        }
    }

    pub fn gmm_options(&self) -> GmmOptions {
        GmmOptions {
            seed: self.seed,
            max_iter: self.gmm_max_iter,
            tol: self.gmm_tol,
            kmeans: self.kmeans_options(),
        }
    }
}

/// One AUROC (or error note) per grid cell and OOD split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cluster_source: ClusterSource,
    pub metric: DistanceMetric,
    /// Resolved number of clusters; `None` when `gt` could not be resolved.
    pub k: Option<usize>,
    pub threshold_mode: ThresholdMode,
    pub ood_set: String,
    pub auroc: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str =
        "cluster_source,metric,k,threshold_mode,ood_set,auroc,n_id,n_ood,error";

    /// One row per cell and OOD split, sorted by grid key. Empty `auroc`
    /// means the cell failed and `error` says why.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER.split(','))
            .expect("writing to memory");
        for r in &self.rows {
            w.write_record([
                r.cluster_source.to_string(),
                r.metric.to_string(),
                r.k.map_or_else(|| "gt".to_string(), |k| k.to_string()),
                r.threshold_mode.to_string(),
                r.ood_set.clone(),
                r.auroc.map(|a| a.to_string()).unwrap_or_default(),
                r.n_id.to_string(),
                r.n_ood.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 fields")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The row for a cell and OOD split, if present.
    pub fn find(
        &self,
        source: ClusterSource,
        metric: DistanceMetric,
        k: usize,
        mode: ThresholdMode,
        ood_set: &str,
    ) -> Option<&SweepRow> {
        self.rows.iter().find(|r| {
            r.cluster_source == source
                && r.metric == metric
                && r.k == Some(k)
                && r.threshold_mode == mode
                && r.ood_set == ood_set
        })
    }

    pub fn errors(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

/// The three splits in one representation (raw or normalized).
struct Splits<'a> {
    train: &'a EmbeddingSet,
    test_id: &'a EmbeddingSet,
    oods: Vec<&'a EmbeddingSet>,
}

struct NormalizedSplits {
    train: EmbeddingSet,
    test_id: EmbeddingSet,
    oods: Vec<EmbeddingSet>,
}

impl NormalizedSplits {
    fn build(train: &EmbeddingSet, test_id: &EmbeddingSet, oods: &[EmbeddingSet]) -> Result<Self> {
        let norm = |s: &EmbeddingSet| l2_normalize(s).map_err(|e| e.context(s.name().to_string()));
        Ok(NormalizedSplits {
            train: norm(train)?,
            test_id: norm(test_id)?,
            oods: oods.iter().map(norm).collect::<Result<_>>()?,
        })
    }

    fn view(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            test_id: &self.test_id,
            oods: self.oods.iter().collect(),
        }
    }
}

/// Clusters `train` from `source` with `k` clusters. The mixture is returned
/// alongside the assignment for the gmm source.
pub fn build_clusters(
    source: ClusterSource,
    k: usize,
    train: &EmbeddingSet,
    config: &SweepConfig,
) -> Result<(ClusterAssignment, Option<GmmModel>)> {
    match source {
        ClusterSource::GroundTruth => Ok((from_labels(train)?, None)),
        ClusterSource::Single if k == 1 => Ok((single_cluster(train), None)),
        ClusterSource::Single => Err(Error::InvalidArgument(format!(
            "the single source has K = 1, not {k}"
        ))),
        ClusterSource::KMeans => Ok((kmeans_fit(train, k, &config.kmeans_options())?.1, None)),
        ClusterSource::Gmm => {
            let (model, assignment) = gmm_fit(train, k, &config.gmm_options())?;
            Ok((assignment, Some(model)))
        }
    }
}

/// Clusters `train` and fits a scoring model under `metric`, with the
/// mixture attached for the gmm source. Normalization is left to the caller.
pub fn fit_cluster_model(
    train: &EmbeddingSet,
    source: ClusterSource,
    k: usize,
    metric: DistanceMetric,
    config: &SweepConfig,
) -> Result<(ClusterAssignment, ClusterModel)> {
    let (assignment, gmm) = build_clusters(source, k, train, config)?;
    let model = ClusterModel::fit(train, &assignment, metric)?;
    let model = match gmm {
        Some(g) => model.with_gmm(g, train)?,
        None => model,
    };
    Ok((assignment, model))
}

/// AUROC of each OOD split against the test-ID split, from per-sample
/// in-distribution scores.
fn aurocs(id_scores: &[f64], ood_scores: &[Vec<f64>]) -> Vec<Result<f64>> {
    ood_scores
        .iter()
        .map(|ood| auroc(&labelled_scores(id_scores, ood)))
        .collect()
}

fn distance_values(model: &ClusterModel, assigned: &Assigned, mode: ThresholdMode) -> Vec<f64> {
    assigned
        .clusters
        .iter()
        .zip(&assigned.distances)
        .map(|(&c, &d)| model.probability(c, d, mode).expect("distance mode"))
        .collect()
}

/// Runs every cell of `grid` and returns the rows sorted by grid key.
pub fn run_sweep(
    train: &EmbeddingSet,
    test_id: &EmbeddingSet,
    oods: &[EmbeddingSet],
    grid: &[GridCell],
    config: &SweepConfig,
) -> Result<SweepReport> {
    if oods.is_empty() {
        return Err(Error::InvalidArgument(
            "a sweep needs at least one OOD split".into(),
        ));
    }
    for s in std::iter::once(test_id).chain(oods) {
        if s.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                actual: s.dim(),
            }
            .context(s.name().to_string()));
        }
    }
    let mut names: Vec<&str> = oods.iter().map(EmbeddingSet::name).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(
            "OOD splits must have distinct names".into(),
        ));
    }
    let classes = train.num_classes();
    let n_id = test_id.len();

    // Resolve K and group cells that share a clustering.
    type Group = BTreeMap<DistanceMetric, Vec<ThresholdMode>>;
    type CellKey = (ClusterSource, DistanceMetric, Option<usize>, ThresholdMode);
    let mut groups: BTreeMap<(ClusterSource, usize, bool), Group> = BTreeMap::new();
    let mut rows: BTreeMap<CellKey, Vec<(usize, Result<f64>)>> = BTreeMap::new();
    for cell in grid {
        let k = match cell.k {
            KSpec::Fixed(k) => Some(k),
            KSpec::Gt => classes,
        };
        let key = (cell.source, cell.metric, k, cell.mode);
        if rows.contains_key(&key) {
            continue;
        }
        match k {
            None => {
                let err = format!("K = gt needs labels on '{}'", train.name());
                rows.insert(
                    key,
                    (0..oods.len())
                        .map(|i| (i, Err(Error::InvalidData(err.clone()))))
                        .collect(),
                );
            }
            Some(k) => {
                rows.insert(key, Vec::new());
                let normalized = cell.metric == DistanceMetric::Cosine && config.normalize_cosine;
                let modes = groups
                    .entry((cell.source, k, normalized))
                    .or_default()
                    .entry(cell.metric)
                    .or_default();
                if !modes.contains(&cell.mode) {
                    modes.push(cell.mode);
                }
            }
        }
    }

    let needs_normalized = groups.keys().any(|&(_, _, normalized)| normalized);
    let normalized = needs_normalized.then(|| NormalizedSplits::build(train, test_id, oods));
    let raw = Splits {
        train,
        test_id,
        oods: oods.iter().collect(),
    };

    for (&(source, k, use_normalized), metrics) in &groups {
        let owned;
        let splits = if use_normalized {
            match normalized.as_ref().expect("built when needed") {
                Ok(n) => {
                    owned = n.view();
                    &owned
                }
                Err(e) => {
                    let msg = e.to_string();
                    for (&metric, modes) in metrics {
                        for &mode in modes {
                            rows.insert(
                                (source, metric, Some(k), mode),
                                (0..oods.len())
                                    .map(|i| (i, Err(Error::InvalidData(msg.clone()))))
                                    .collect(),
                            );
                        }
                    }
                    continue;
                }
            }
        } else {
            &raw
        };
        let clustering = build_clusters(source, k, splits.train, config)
            .map_err(|e| e.context(format!("{source} clustering with K = {k}")));
        for (&metric, modes) in metrics {
            let results = run_metric(&clustering, splits, metric, modes);
            for (mode, per_ood) in modes.iter().zip(results) {
                rows.insert(
                    (source, metric, Some(k), *mode),
                    per_ood.into_iter().enumerate().collect(),
                );
            }
        }
    }

    let mut out = Vec::new();
    for ((source, metric, k, mode), per_ood) in rows {
        for (i, result) in per_ood {
            let (auroc, error) = match result {
                Ok(a) => (Some(a), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(SweepRow {
                cluster_source: source,
                metric,
                k,
                threshold_mode: mode,
                ood_set: oods[i].name().to_string(),
                auroc,
                n_id,
                n_ood: oods[i].len(),
                error,
            });
        }
    }
    out.sort_by(|a, b| {
        (
            a.cluster_source,
            a.metric,
            a.k,
            a.threshold_mode,
            &a.ood_set,
        )
            .cmp(&(
                b.cluster_source,
                b.metric,
                b.k,
                b.threshold_mode,
                &b.ood_set,
            ))
    });
    Ok(SweepReport { rows: out })
}

/// AUROCs for each mode (outer) and OOD split (inner) of one metric.
fn run_metric(
    clustering: &Result<(ClusterAssignment, Option<GmmModel>)>,
    splits: &Splits<'_>,
    metric: DistanceMetric,
    modes: &[ThresholdMode],
) -> Vec<Vec<Result<f64>>> {
    let fail = |e: &Error| -> Vec<Vec<Result<f64>>> {
        let msg = e.to_string();
        modes
            .iter()
            .map(|_| {
                splits
                    .oods
                    .iter()
                    .map(|_| Err(Error::InvalidData(msg.clone())))
                    .collect()
            })
            .collect()
    };
    let (assignment, gmm) = match clustering {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let fitted = ClusterModel::fit(splits.train, assignment, metric).and_then(|m| match gmm {
        Some(g) => m.with_gmm(g.clone(), splits.train),
        None => Ok(m),
    });
    let model = match fitted {
        Ok(m) => m,
        Err(e) => return fail(&e.context(format!("{metric} model"))),
    };
    let mut assigned: Option<Result<(Assigned, Vec<Assigned>)>> = None;
    modes
        .iter()
        .map(|&mode| {
            let scores = match mode {
                ThresholdMode::GmmDefault => (|| {
                    let value = |s: &EmbeddingSet| -> Result<Vec<f64>> {
                        Ok(model.score_set(s, mode)?.iter().map(|p| p.value).collect())
                    };
                    let id = value(splits.test_id)?;
                    let oods = splits
                        .oods
                        .iter()
                        .map(|s| value(s))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((id, oods))
                })(),
                _ => {
                    let cached = assigned.get_or_insert_with(|| {
                        let id = model.assign(splits.test_id)?;
                        let oods = splits
                            .oods
                            .iter()
                            .map(|s| model.assign(s))
                            .collect::<Result<Vec<_>>>()?;
                        Ok((id, oods))
                    });
                    match cached {
                        Ok((id, oods)) => Ok((
                            distance_values(&model, id, mode),
                            oods.iter()
                                .map(|a| distance_values(&model, a, mode))
                                .collect(),
                        )),
                        Err(e) => Err(Error::InvalidData(e.to_string())),
                    }
                }
            };
            match scores {
                Ok((id, oods)) => aurocs(&id, &oods),
                Err(e) => {
                    let msg = e.to_string();
                    splits
                        .oods
                        .iter()
                        .map(|_| Err(Error::InvalidData(msg.clone())))
                        .collect()
                }
            }
        })
        .collect()
}
