//! Serializable run configurations. Every command writes its resolved
//! configuration to `config.json` in its output directory; passing that file
//! back with `--config` repeats the run.

use std::path::{Path, PathBuf};

use ood_clusters::clustering::ClusterSource;
use ood_clusters::error::Error;
use ood_clusters::evaluation::{KSpec, SweepConfig};
use ood_clusters::geometry::DistanceMetric;
use ood_clusters::scoring::ThresholdMode;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Synth(SynthConfig),
    Fit(FitConfig),
    Quality(QualityConfig),
    Score(ScoreConfig),
    Eval(EvalConfig),
    Sweep(SweepRunConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Synth(_) => "synth",
            RunConfig::Fit(_) => "fit",
            RunConfig::Quality(_) => "quality",
            RunConfig::Score(_) => "score",
            RunConfig::Eval(_) => "eval",
            RunConfig::Sweep(_) => "sweep",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            RunConfig::Synth(c) => &c.out,
            RunConfig::Fit(c) => &c.out,
            RunConfig::Quality(c) => &c.out,
            RunConfig::Score(c) => &c.out,
            RunConfig::Eval(c) => &c.out,
            RunConfig::Sweep(c) => &c.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            RunConfig::Synth(c) => c.out = out,
            RunConfig::Fit(c) => c.out = out,
            RunConfig::Quality(c) => c.out = out,
            RunConfig::Score(c) => c.out = out,
            RunConfig::Eval(c) => c.out = out,
            RunConfig::Sweep(c) => c.out = out,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configs serialize");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        if !path.exists() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub scale: f64,
    pub sigma: f64,
    pub seed: u64,
    pub test_per_cluster: usize,
    pub ood_offsets: Vec<f64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: PathBuf,
    pub split: String,
    pub source: ClusterSource,
    pub k: KSpec,
    pub metric: DistanceMetric,
    pub fitting: SweepConfig,
    pub out: PathBuf,
}

impl FitConfig {
    /// Whether the model was fitted, and must be applied, on L2-normalized rows.
    pub fn normalized(&self) -> bool {
        self.metric == DistanceMetric::Cosine && self.fitting.normalize_cosine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub split: String,
    pub source: ClusterSource,
    pub k: KSpec,
    pub fraction_x: f64,
    pub separation_metric: DistanceMetric,
    pub radius_metric: DistanceMetric,
    pub radius_quantile: f64,
    pub fitting: SweepConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub mode: ThresholdMode,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub id_split: String,
    /// Empty means every OOD split of the dataset.
    pub ood_splits: Vec<String>,
    pub mode: ThresholdMode,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunConfig {
    pub data: PathBuf,
    /// Empty means the default grid.
    pub grid: Vec<String>,
    pub fitting: SweepConfig,
    pub out: PathBuf,
}

/// Default K for a cluster source, when the source implies one.
pub fn default_k(source: ClusterSource) -> Option<KSpec> {
    match source {
        ClusterSource::GroundTruth => Some(KSpec::Gt),
        ClusterSource::Single => Some(KSpec::Fixed(1)),
        ClusterSource::KMeans | ClusterSource::Gmm => None,
    }
}
