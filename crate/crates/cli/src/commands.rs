//! Command implementations. Each returns the lines to print on success.

use std::fmt;
use std::fs;
use std::path::Path;

use ood_clusters::clustering::{from_labels, ClusterAssignment, ClusterSource};
use ood_clusters::embedding::{
    l2_normalize, load_checkpoints, load_split, save_manifest, synth_dataset, BlobSpec,
    DatasetManifest, EmbeddingSet, Split,
};
use ood_clusters::error::Error;
use ood_clusters::evaluation::{
    auroc, build_clusters, default_grid, labelled_scores, parse_grid, roc_curve, run_sweep, KSpec,
    SweepConfig,
};
use ood_clusters::quality::{
    evolution_to_csv, quality_report, separation_evolution, SeparationConfig,
};
use ood_clusters::scoring::{scores_to_csv, ClusterModel};

use crate::config::{
    EvalConfig, FitConfig, QualityConfig, RunConfig, ScoreConfig, SweepRunConfig, SynthConfig,
    CONFIG_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

/// A library error tagged with the pipeline module it came from.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub error: Error,
}

impl Failure {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        if self.error.is_usage() {
            1
        } else if self.error.is_numerical() {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.module, self.error)
    }
}

pub type Outcome<T> = Result<T, Failure>;

pub trait InModule<T> {
    fn in_module(self, module: &'static str) -> Outcome<T>;
}

impl<T> InModule<T> for Result<T, Error> {
    fn in_module(self, module: &'static str) -> Outcome<T> {
        self.map_err(|error| Failure { module, error })
    }
}

pub fn usage(message: impl Into<String>) -> Failure {
    Failure {
        module: "cli",
        error: Error::InvalidArgument(message.into()),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Outcome<()> {
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(dir.join(name), contents))
        .map_err(|e| Error::Io {
            context: dir.join(name).display().to_string(),
            source: e,
        })
        .in_module("cli")
}

/// Writes `config.json` and `run_manifest.txt` next to the outputs.
fn finish(config: &RunConfig, outputs: &[String]) -> Outcome<()> {
    let out = config.out();
    write(out, CONFIG_FILE, &config.to_json())?;
    let mut text = format!(
        "command = {}\nversion = {}\nconfig = {CONFIG_FILE}\n",
        config.name(),
        env!("CARGO_PKG_VERSION")
    );
    for o in outputs {
        text.push_str(&format!("output = {o}\n"));
    }
    write(out, RUN_MANIFEST_FILE, &text)
}

pub fn run(config: &RunConfig) -> Outcome<Vec<String>> {
    match config {
        RunConfig::Synth(c) => synth(c, config),
        RunConfig::Fit(c) => fit(c, config),
        RunConfig::Quality(c) => quality(c, config),
        RunConfig::Score(c) => score(c, config),
        RunConfig::Eval(c) => eval(c, config),
        RunConfig::Sweep(c) => sweep(c, config),
    }
}

fn synth(c: &SynthConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    let spec = BlobSpec {
        num_clusters: c.clusters,
        per_cluster: c.per_cluster,
        dimension: c.dim,
        center_scale: c.scale,
        sigma: c.sigma,
        seed: c.seed,
    };
    let data = synth_dataset(&spec, c.test_per_cluster, &c.ood_offsets).in_module("embedding")?;
    save_manifest(&c.out, MANIFEST_FILE, &data.sets()).in_module("embedding")?;
    let mut outputs = vec![MANIFEST_FILE.to_string()];
    for set in data.sets() {
        outputs.push(format!("{}.f32", set.name()));
        outputs.push(format!("{}.labels", set.name()));
    }
    finish(config, &outputs)?;
    let mut lines = vec![format!(
        "N = {} train, {} test_id; D = {}; J = {}; s/sigma = {}",
        data.train.len(),
        data.test_id.len(),
        c.dim,
        c.clusters,
        c.scale / c.sigma
    )];
    for (set, offset) in data.oods.iter().zip(&c.ood_offsets) {
        lines.push(format!(
            "{}: {} samples at {offset} sigma",
            set.name(),
            set.len()
        ));
    }
    lines.push(format!("wrote {}", c.out.join(MANIFEST_FILE).display()));
    Ok(lines)
}

fn load(data: &Path, key: &str) -> Outcome<EmbeddingSet> {
    load_split(data, key).in_module("embedding")
}

fn normalize_if(set: EmbeddingSet, normalize: bool) -> Outcome<EmbeddingSet> {
    if normalize {
        l2_normalize(&set)
            .map_err(|e| e.context(set.name().to_string()))
            .in_module("embedding")
    } else {
        Ok(set)
    }
}

fn resolve_k(k: KSpec, set: &EmbeddingSet) -> Outcome<usize> {
    match k {
        KSpec::Fixed(k) => Ok(k),
        KSpec::Gt => set.num_classes().ok_or_else(|| Failure {
            module: "clustering",
            error: Error::InvalidData(format!("K = gt needs labels on split '{}'", set.name())),
        }),
    }
}

fn clusters_to_csv(assignment: &ClusterAssignment) -> String {
    let mut out = String::from("sample,cluster\n");
    for (i, c) in assignment.assignment().iter().enumerate() {
        out.push_str(&format!("{i},{c}\n"));
    }
    out
}

fn fit(c: &FitConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    let train = normalize_if(load(&c.data, &c.split)?, c.normalized())?;
    let k = resolve_k(c.k, &train)?;
    let (assignment, gmm) =
        build_clusters(c.source, k, &train, &c.fitting).in_module("clustering")?;
    let model = ClusterModel::fit(&train, &assignment, c.metric)
        .and_then(|m| match gmm {
            Some(g) => m.with_gmm(g, &train),
            None => Ok(m),
        })
        .in_module("scoring")?;
    model.save(&c.out).in_module("scoring")?;
    write(&c.out, "clusters.csv", &clusters_to_csv(&assignment))?;
    finish(config, &["model.txt".into(), "clusters.csv".into()])?;
    let sizes: Vec<String> = assignment
        .all_members()
        .iter()
        .map(|m| m.len().to_string())
        .collect();
    Ok(vec![
        format!(
            "{} clusters (K = {k}) from {} on {} samples; metric {}",
            assignment.num_clusters(),
            c.source,
            train.len(),
            c.metric
        ),
        format!("sizes: {}", sizes.join(",")),
        format!("wrote model to {}", c.out.display()),
    ])
}

/// The fitted model and the configuration it was fitted with.
fn load_model(dir: &Path) -> Outcome<(ClusterModel, FitConfig)> {
    let config = match RunConfig::read(&dir.join(CONFIG_FILE)).in_module("cli")? {
        RunConfig::Fit(f) => f,
        other => {
            return Err(usage(format!(
                "{} was written by '{}', not 'fit'",
                dir.display(),
                other.name()
            )))
        }
    };
    let model = ClusterModel::load(dir).in_module("scoring")?;
    Ok((model, config))
}

fn score(c: &ScoreConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    let (model, fitted) = load_model(&c.model)?;
    let set = normalize_if(load(&c.data, &c.split)?, fitted.normalized())?;
    let scores = model
        .score_set(&set, c.mode)
        .map_err(|e| e.context(format!("split '{}'", c.split)))
        .in_module("scoring")?;
    write(&c.out, "scores.csv", &scores_to_csv(&scores))?;
    finish(config, &["scores.csv".into()])?;
    let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
    Ok(vec![format!(
        "scored {} samples of '{}' ({} mode); mean probability {mean}",
        scores.len(),
        c.split,
        c.mode
    )])
}

fn ood_keys(data: &Path) -> Outcome<Vec<String>> {
    let manifest = DatasetManifest::read(data).in_module("embedding")?;
    Ok(manifest
        .splits
        .iter()
        .filter(|s| Split::from_key(&s.key) == Some(Split::Ood))
        .map(|s| s.key.clone())
        .collect())
}

fn eval(c: &EvalConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    let (model, fitted) = load_model(&c.model)?;
    let keys = if c.ood_splits.is_empty() {
        ood_keys(&c.data)?
    } else {
        c.ood_splits.clone()
    };
    if keys.is_empty() {
        return Err(Failure {
            module: "evaluation",
            error: Error::InvalidData(format!("{} declares no OOD split", c.data.display())),
        });
    }
    let values = |key: &str| -> Outcome<Vec<f64>> {
        let set = normalize_if(load(&c.data, key)?, fitted.normalized())?;
        Ok(model
            .score_set(&set, c.mode)
            .map_err(|e| e.context(format!("split '{key}'")))
            .in_module("scoring")?
            .iter()
            .map(|s| s.value)
            .collect())
    };
    let id = values(&c.id_split)?;
    let mut table = String::from("ood_set,auroc,n_id,n_ood\n");
    let mut outputs = vec!["auroc.csv".to_string()];
    let mut lines = Vec::new();
    for key in &keys {
        let ood = values(key)?;
        let samples = labelled_scores(&id, &ood);
        let area = auroc(&samples)
            .map_err(|e| e.context(key.clone()))
            .in_module("evaluation")?;
        let curve = roc_curve(&samples).in_module("evaluation")?;
        let mut roc = String::from("fpr,tpr\n");
        for (fpr, tpr) in curve {
            roc.push_str(&format!("{fpr},{tpr}\n"));
        }
        let name = format!("roc_{key}.csv");
        write(&c.out, &name, &roc)?;
        outputs.push(name);
        table.push_str(&format!("{key},{area},{},{}\n", id.len(), ood.len()));
        lines.push(format!("{key}: AUROC {area}"));
    }
    write(&c.out, "auroc.csv", &table)?;
    finish(config, &outputs)?;
    Ok(lines)
}

fn quality(c: &QualityConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    if c.data.is_none() && c.checkpoints.is_none() {
        return Err(usage("quality needs --data, --checkpoints, or both"));
    }
    let separation =
        SeparationConfig::new(c.fraction_x, c.separation_metric).in_module("quality")?;
    let mut outputs = Vec::new();
    let mut lines = Vec::new();
    if let Some(data) = &c.data {
        let normalize = c.separation_metric == ood_clusters::geometry::DistanceMetric::Cosine
            && c.fitting.normalize_cosine;
        let set = normalize_if(load(data, &c.split)?, normalize)?;
        let clusters = quality_clusters(c.source, c.k, &set, &c.fitting)?;
        let report = quality_report(
            &set,
            &clusters,
            &separation,
            c.radius_metric,
            c.radius_quantile,
        )
        .in_module("quality")?;
        write(&c.out, "quality.csv", &report.to_csv())?;
        outputs.push("quality.csv".to_string());
        lines.push(format!(
            "{} clusters from {}; mean global separation {}",
            clusters.num_clusters(),
            c.source,
            report.mean_gs()
        ));
        if let Some(p) = &report.per_cluster_purity {
            lines.push(format!(
                "mean purity {}",
                p.iter().sum::<f64>() / p.len() as f64
            ));
        }
    }
    if let Some(index) = &c.checkpoints {
        let series = load_checkpoints(index, &c.split).in_module("embedding")?;
        let rows = separation_evolution(&series, &separation).in_module("quality")?;
        write(&c.out, "evolution.csv", &evolution_to_csv(&rows))?;
        outputs.push("evolution.csv".to_string());
        lines.push(format!("separation over {} checkpoints", rows.len()));
    }
    finish(config, &outputs)?;
    Ok(lines)
}

fn quality_clusters(
    source: ClusterSource,
    k: KSpec,
    set: &EmbeddingSet,
    fitting: &SweepConfig,
) -> Outcome<ClusterAssignment> {
    if source == ClusterSource::GroundTruth {
        return from_labels(set).in_module("clustering");
    }
    let k = resolve_k(k, set)?;
    Ok(build_clusters(source, k, set, fitting)
        .in_module("clustering")?
        .0)
}

fn sweep(c: &SweepRunConfig, config: &RunConfig) -> Outcome<Vec<String>> {
    let train = load(&c.data, "train")?;
    let test_id = load(&c.data, "test_id")?;
    let oods = ood_keys(&c.data)?
        .iter()
        .map(|k| load(&c.data, k))
        .collect::<Outcome<Vec<_>>>()?;
    let grid = if c.grid.is_empty() {
        default_grid(train.labels().is_some())
    } else {
        parse_grid(&c.grid.join(",")).in_module("evaluation")?
    };
    let report = run_sweep(&train, &test_id, &oods, &grid, &c.fitting).in_module("evaluation")?;
    write(&c.out, "sweep.csv", &report.to_csv())?;
    finish(config, &["sweep.csv".into()])?;
    Ok(vec![format!(
        "{} rows over {} OOD splits, {} failed cells",
        report.rows.len(),
        oods.len(),
        report.errors().count()
    )])
}
