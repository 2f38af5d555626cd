//! `ood-clusters`: synthesize or load embeddings, fit cluster models, report
//! cluster quality, score samples and run AUROC sweeps.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ood_clusters::clustering::ClusterSource;
use ood_clusters::evaluation::{KSpec, SweepConfig};
use ood_clusters::geometry::DistanceMetric;
use ood_clusters::scoring::ThresholdMode;

use commands::{usage, Failure, Outcome};
use config::{
    default_k, EvalConfig, FitConfig, QualityConfig, RunConfig, ScoreConfig, SweepRunConfig,
    SynthConfig,
};

#[derive(Parser)]
#[command(
    name = "ood-clusters",
    version,
    about = "Cluster-based out-of-distribution detection over embedding matrices"
)]
struct Cli {
    /// Worker threads [default: available parallelism]. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Gaussian blob train/test_id/OOD splits and a dataset manifest.
    Synth(SynthArgs),
    /// Cluster a split and fit a scoring model.
    Fit(FitArgs),
    /// Global separation, purity and radius per cluster; separation over checkpoints.
    Quality(QualityArgs),
    /// Probability scores of a split under a fitted model.
    Score(ScoreArgs),
    /// AUROC and ROC curves of test_id against each OOD split.
    Eval(EvalArgs),
    /// AUROC for every cell of a source:metric:K:mode grid.
    Sweep(SweepArgs),
}

/// Output location and config replay, shared by every command.
#[derive(Args)]
struct RunArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Repeat the run recorded in a config.json snapshot. Only --out and
    /// --threads may accompany it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of blobs J [default: 5].
    #[arg(long)]
    clusters: Option<usize>,
    /// Training samples per blob [default: 200].
    #[arg(long)]
    per_cluster: Option<usize>,
    /// Embedding dimension D [default: 64].
    #[arg(long)]
    dim: Option<usize>,
    /// Radius s of the sphere carrying the blob centers [default: 10].
    #[arg(long)]
    scale: Option<f64>,
    /// Per-coordinate standard deviation [default: 1].
    #[arg(long)]
    sigma: Option<f64>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Test-ID and OOD samples per blob [default: 100].
    #[arg(long)]
    test_per_cluster: Option<usize>,
    /// OOD center offsets in units of sigma, comma-separated [default: 2,10].
    #[arg(long, value_delimiter = ',')]
    ood_offsets: Option<Vec<f64>>,
    #[command(flatten)]
    run: RunArgs,
}

/// Clustering options shared by fit, quality and sweep.
#[derive(Args)]
struct FittingArgs {
    /// Random seed for k-means and EM [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// k-means iteration cap [default: 300].
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    /// k-means relative inertia tolerance [default: 1e-6].
    #[arg(long)]
    kmeans_tol: Option<f64>,
    /// k-means restarts, best inertia kept [default: 1].
    #[arg(long)]
    kmeans_n_init: Option<usize>,
    /// EM iteration cap [default: 200].
    #[arg(long)]
    gmm_max_iter: Option<usize>,
    /// EM relative log-likelihood tolerance [default: 1e-6].
    #[arg(long)]
    gmm_tol: Option<f64>,
    /// L2-normalize rows for cosine work [default: true].
    #[arg(long)]
    normalize_cosine: Option<bool>,
}

impl FittingArgs {
    fn resolve(&self) -> SweepConfig {
        let d = SweepConfig::default();
        SweepConfig {
            seed: self.seed.unwrap_or(d.seed),
            kmeans_max_iter: self.kmeans_max_iter.unwrap_or(d.kmeans_max_iter),
            kmeans_tol: self.kmeans_tol.unwrap_or(d.kmeans_tol),
            kmeans_n_init: self.kmeans_n_init.unwrap_or(d.kmeans_n_init),
            gmm_max_iter: self.gmm_max_iter.unwrap_or(d.gmm_max_iter),
            gmm_tol: self.gmm_tol.unwrap_or(d.gmm_tol),
            normalize_cosine: self.normalize_cosine.unwrap_or(d.normalize_cosine),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to fit on [default: train].
    #[arg(long)]
    split: Option<String>,
    /// Cluster source: gt, single, kmeans or gmm [default: gt].
    #[arg(long)]
    source: Option<ClusterSource>,
    /// Number of clusters, or `gt` for the number of labelled classes.
    #[arg(long)]
    k: Option<KSpec>,
    /// Distance metric: cosine, euclidean or mahalanobis [default: cosine].
    #[arg(long)]
    metric: Option<DistanceMetric>,
    #[command(flatten)]
    fitting: FittingArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct QualityArgs {
    /// Dataset manifest for the per-cluster report.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint index (`<epoch> = <manifest>` lines) for separation over epochs.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Split to analyse [default: train].
    #[arg(long)]
    split: Option<String>,
    /// Cluster source: gt, single, kmeans or gmm [default: gt].
    #[arg(long)]
    source: Option<ClusterSource>,
    /// Number of clusters, or `gt`.
    #[arg(long)]
    k: Option<KSpec>,
    /// Fraction x of smallest pairwise distances averaged [default: 0.1].
    #[arg(long)]
    fraction_x: Option<f64>,
    /// Separation metric: cosine or euclidean [default: cosine].
    #[arg(long)]
    separation_metric: Option<DistanceMetric>,
    /// Radius metric [default: cosine].
    #[arg(long)]
    radius_metric: Option<DistanceMetric>,
    /// Member quantile defining the radius [default: 0.95].
    #[arg(long)]
    radius_quantile: Option<f64>,
    #[command(flatten)]
    fitting: FittingArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// Model directory written by `fit`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to score [default: test_id].
    #[arg(long)]
    split: Option<String>,
    /// Threshold mode: cluster, global or gmm_default [default: cluster].
    #[arg(long)]
    mode: Option<ThresholdMode>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Model directory written by `fit`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// In-distribution split [default: test_id].
    #[arg(long)]
    id_split: Option<String>,
    /// OOD splits, comma-separated [default: every OOD split of the dataset].
    #[arg(long, value_delimiter = ',')]
    ood_splits: Option<Vec<String>>,
    /// Threshold mode: cluster, global or gmm_default [default: cluster].
    #[arg(long)]
    mode: Option<ThresholdMode>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset manifest with train, test_id and OOD splits.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Grid cells `source:metric:K:mode`, comma- or space-separated [default: full grid].
    #[arg(long)]
    grid: Option<Vec<String>>,
    #[command(flatten)]
    fitting: FittingArgs,
    #[command(flatten)]
    run: RunArgs,
}

fn required<T>(value: Option<T>, flag: &str) -> Outcome<T> {
    value.ok_or_else(|| usage(format!("--{flag} is required (or pass --config)")))
}

fn source_k(source: ClusterSource, k: Option<KSpec>) -> Outcome<KSpec> {
    k.or(default_k(source))
        .ok_or_else(|| usage(format!("--k is required for the {source} source")))
}

impl Command {
    fn run_args(&self) -> &RunArgs {
        match self {
            Command::Synth(a) => &a.run,
            Command::Fit(a) => &a.run,
            Command::Quality(a) => &a.run,
            Command::Score(a) => &a.run,
            Command::Eval(a) => &a.run,
            Command::Sweep(a) => &a.run,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Quality(_) => "quality",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
        }
    }
}

/// Reads a `config.json` snapshot, which must record a run of `command`.
fn replay(command: &str, path: &Path, out: Option<PathBuf>) -> Outcome<RunConfig> {
    let mut saved = RunConfig::read(path).map_err(|error| Failure {
        module: "cli",
        error,
    })?;
    if saved.name() != command {
        return Err(usage(format!(
            "{} records a {} run, not {command}",
            path.display(),
            saved.name()
        )));
    }
    if let Some(out) = out {
        saved.set_out(out);
    }
    Ok(saved)
}

/// The flags with defaults filled in.
fn from_flags(command: Command) -> Outcome<RunConfig> {
    let out = required(command.run_args().out.clone(), "out")?;
    Ok(match command {
        Command::Synth(a) => RunConfig::Synth(SynthConfig {
            clusters: a.clusters.unwrap_or(5),
            per_cluster: a.per_cluster.unwrap_or(200),
            dim: a.dim.unwrap_or(64),
            scale: a.scale.unwrap_or(10.0),
            sigma: a.sigma.unwrap_or(1.0),
            seed: a.seed.unwrap_or(0),
            test_per_cluster: a.test_per_cluster.unwrap_or(100),
            ood_offsets: a.ood_offsets.unwrap_or_else(|| vec![2.0, 10.0]),
            out,
        }),
        Command::Fit(a) => {
            let source = a.source.unwrap_or(ClusterSource::GroundTruth);
            RunConfig::Fit(FitConfig {
                data: required(a.data, "data")?,
                split: a.split.unwrap_or_else(|| "train".into()),
                source,
                k: source_k(source, a.k)?,
                metric: a.metric.unwrap_or(DistanceMetric::Cosine),
                fitting: a.fitting.resolve(),
                out,
            })
        }
        Command::Quality(a) => {
            let source = a.source.unwrap_or(ClusterSource::GroundTruth);
            RunConfig::Quality(QualityConfig {
                data: a.data,
                checkpoints: a.checkpoints,
                split: a.split.unwrap_or_else(|| "train".into()),
                source,
                k: source_k(source, a.k)?,
                fraction_x: a.fraction_x.unwrap_or(0.1),
                separation_metric: a.separation_metric.unwrap_or(DistanceMetric::Cosine),
                radius_metric: a.radius_metric.unwrap_or(DistanceMetric::Cosine),
                radius_quantile: a.radius_quantile.unwrap_or(0.95),
                fitting: a.fitting.resolve(),
                out,
            })
        }
        Command::Score(a) => RunConfig::Score(ScoreConfig {
            model: required(a.model, "model")?,
            data: required(a.data, "data")?,
            split: a.split.unwrap_or_else(|| "test_id".into()),
            mode: a.mode.unwrap_or(ThresholdMode::Cluster),
            out,
        }),
        Command::Eval(a) => RunConfig::Eval(EvalConfig {
            model: required(a.model, "model")?,
            data: required(a.data, "data")?,
            id_split: a.id_split.unwrap_or_else(|| "test_id".into()),
            ood_splits: a.ood_splits.unwrap_or_default(),
            mode: a.mode.unwrap_or(ThresholdMode::Cluster),
            out,
        }),
        Command::Sweep(a) => RunConfig::Sweep(SweepRunConfig {
            data: required(a.data, "data")?,
            grid: a
                .grid
                .unwrap_or_default()
                .iter()
                .flat_map(|g| g.split(|c: char| c == ',' || c.is_whitespace()))
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect(),
            fitting: a.fitting.resolve(),
            out,
        }),
    })
}

/// Flags other than `--out` and `--threads` given together with `--config`.
fn replay_conflicts(matches: &ArgMatches) -> Vec<String> {
    let Some((name, sub)) = matches.subcommand() else {
        return Vec::new();
    };
    if sub.value_source("config") != Some(ValueSource::CommandLine) {
        return Vec::new();
    }
    let command = Cli::command();
    let Some(definition) = command.find_subcommand(name) else {
        return Vec::new();
    };
    definition
        .get_arguments()
        .map(|a| a.get_id().as_str())
        .filter(|id| !matches!(*id, "config" | "out" | "threads" | "help" | "version"))
        .filter(|id| sub.value_source(id) == Some(ValueSource::CommandLine))
        .map(|id| format!("--{}", id.replace('_', "-")))
        .collect()
}

fn parse() -> Result<Cli, ExitCode> {
    let fail = |e: clap::Error| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 1 } else { 0 })
    };
    let matches = Cli::command().try_get_matches().map_err(fail)?;
    let conflicts = replay_conflicts(&matches);
    if !conflicts.is_empty() {
        eprintln!(
            "cli error: --config cannot be combined with {}",
            conflicts.join(", ")
        );
        return Err(ExitCode::from(1));
    }
    Cli::from_arg_matches(&matches).map_err(fail)
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("cli error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    let run = cli.command.run_args();
    let config = match run.config.clone() {
        Some(path) => {
            let name = cli.command.name();
            replay(name, &path, run.out.clone())
        }
        None => from_flags(cli.command),
    };
    match config.and_then(|config| commands::run(&config)) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
