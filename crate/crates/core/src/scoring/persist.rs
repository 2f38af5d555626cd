//! Directory format for fitted cluster models.
//!
//! `model.txt` holds `key = value` lines; every array lives in its own file
//! of little-endian `f64` values:
//!
//! ```text
//! format = cluster-model/1
//! metric = mahalanobis
//! dimension = 2
//! clusters = 3
//! reference_counts = 10,12,9
//! gaussian = true
//! mixture = false
//! ```
//!
//! Gaussian statistics are stored as mean, unregularized covariance and
//! ridge; the Cholesky factor is recomputed on load, which reproduces it
//! bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::ClusterModel;
use crate::clustering::GmmModel;
use crate::embedding::write_file;
use crate::error::{Error, Result};
use crate::geometry::{DistanceMetric, GaussianStats};

const FORMAT: &str = "cluster-model/1";
const MANIFEST: &str = "model.txt";

fn to_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::InvalidData(format!(
            "{}: expected {expected} values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn save_gaussians(dir: &Path, prefix: &str, stats: &[GaussianStats]) -> Result<()> {
    write_file(
        &dir.join(format!("{prefix}means.f64")),
        &to_bytes(stats.iter().flat_map(|s| s.mean().iter().copied())),
    )?;
    write_file(
        &dir.join(format!("{prefix}covariances.f64")),
        &to_bytes(stats.iter().flat_map(|s| s.covariance().iter().copied())),
    )?;
    write_file(
        &dir.join(format!("{prefix}epsilons.f64")),
        &to_bytes(stats.iter().map(GaussianStats::epsilon)),
    )
}

fn load_gaussians(dir: &Path, prefix: &str, k: usize, d: usize) -> Result<Vec<GaussianStats>> {
    let means = read_f64s(&dir.join(format!("{prefix}means.f64")), k * d)?;
    let covs = read_f64s(&dir.join(format!("{prefix}covariances.f64")), k * d * d)?;
    let eps = read_f64s(&dir.join(format!("{prefix}epsilons.f64")), k)?;
    (0..k)
        .map(|c| {
            GaussianStats::with_epsilon(
                means[c * d..(c + 1) * d].to_vec(),
                covs[c * d * d..(c + 1) * d * d].to_vec(),
                eps[c],
            )
        })
        .collect()
}

impl ClusterModel {
    /// Writes the model into `dir`, creating it if needed. Returns the
    /// manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let counts: Vec<String> = self
            .references
            .iter()
            .map(|r| r.len().to_string())
            .collect();
        let mut text = format!(
            "format = {FORMAT}\nmetric = {}\ndimension = {}\nclusters = {}\nreference_counts = {}\ngaussian = {}\n",
            self.metric,
            self.dim(),
            self.k(),
            counts.join(","),
            self.stats.is_some()
        );
        write_file(
            &dir.join("means.f64"),
            &to_bytes(self.means.iter().flatten().copied()),
        )?;
        write_file(
            &dir.join("references.f64"),
            &to_bytes(self.references.iter().flatten().copied()),
        )?;
        if let Some(stats) = &self.stats {
            save_gaussians(dir, "gaussian_", stats)?;
        }
        match &self.mixture {
            Some(m) => {
                text.push_str(&format!(
                    "mixture = true\nmixture_iterations = {}\nmixture_final_log_likelihood = {}\nmixture_trace_length = {}\n",
                    m.model.iterations_run,
                    m.model.final_log_likelihood,
                    m.model.log_likelihood_trace.len()
                ));
                save_gaussians(dir, "mixture_", &m.model.components)?;
                write_file(
                    &dir.join("mixture_weights.f64"),
                    &to_bytes(m.model.weights.iter().copied()),
                )?;
                write_file(
                    &dir.join("mixture_trace.f64"),
                    &to_bytes(m.model.log_likelihood_trace.iter().copied()),
                )?;
                write_file(
                    &dir.join("mixture_train_loglik.f64"),
                    &to_bytes(m.train_log_likelihoods.iter().copied()),
                )?;
            }
            None => text.push_str("mixture = false\n"),
        }
        let path = dir.join(MANIFEST);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Reads a model written by [`ClusterModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingFile { path });
        }
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut keys = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("{}:{}", path.display(), n + 1),
                message: "expected 'key = value'".into(),
            })?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            keys.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Parse {
                    location: path.display().to_string(),
                    message: format!("missing key '{key}'"),
                })
        };
        let parse_num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Parse {
                location: path.display().to_string(),
                message: format!("'{key}' is not a non-negative integer"),
            })
        };
        let parse_bool = |key: &str| -> Result<bool> {
            get(key)?.parse().map_err(|_| Error::Parse {
                location: path.display().to_string(),
                message: format!("'{key}' must be true or false"),
            })
        };
        if get("format")? != FORMAT {
            return Err(Error::InvalidData(format!(
                "{}: unsupported format '{}'",
                path.display(),
                get("format")?
            )));
        }
        let metric: DistanceMetric = get("metric")?.parse()?;
        let d = parse_num("dimension")?;
        let k = parse_num("clusters")?;
        let counts: Vec<usize> = get("reference_counts")?
            .split(',')
            .map(|c| c.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                location: path.display().to_string(),
                message: "bad reference_counts".into(),
            })?;
        if counts.len() != k || d == 0 || k == 0 {
            return Err(Error::InvalidData(format!(
                "{}: inconsistent cluster count or dimension",
                path.display()
            )));
        }
        let flat_means = read_f64s(&dir.join("means.f64"), k * d)?;
        let means = flat_means.chunks_exact(d).map(<[f64]>::to_vec).collect();
        let flat_refs = read_f64s(&dir.join("references.f64"), counts.iter().sum())?;
        let mut references = Vec::with_capacity(k);
        let mut start = 0;
        for n in counts {
            references.push(flat_refs[start..start + n].to_vec());
            start += n;
        }
        let stats = if parse_bool("gaussian")? {
            Some(load_gaussians(dir, "gaussian_", k, d)?)
        } else {
            None
        };
        let mixture = if parse_bool("mixture")? {
            let components = load_gaussians(dir, "mixture_", k, d)?;
            let weights = read_f64s(&dir.join("mixture_weights.f64"), k)?;
            let mut gmm = GmmModel::new(components, weights)?;
            gmm.iterations_run = parse_num("mixture_iterations")?;
            gmm.final_log_likelihood =
                get("mixture_final_log_likelihood")?
                    .parse()
                    .map_err(|_| Error::Parse {
                        location: path.display().to_string(),
                        message: "bad mixture_final_log_likelihood".into(),
                    })?;
            gmm.log_likelihood_trace = read_f64s(
                &dir.join("mixture_trace.f64"),
                parse_num("mixture_trace_length")?,
            )?;
            let lls = fs::metadata(dir.join("mixture_train_loglik.f64"))
                .map(|m| m.len() as usize / 8)
                .unwrap_or(0);
            let lls = read_f64s(&dir.join("mixture_train_loglik.f64"), lls)?;
            if lls.is_empty() {
                return Err(Error::InvalidData(format!(
                    "{}: mixture has no training log-likelihoods",
                    dir.display()
                )));
            }
            Some((gmm, lls))
        } else {
            None
        };
        ClusterModel::from_parts(metric, means, stats, references, mixture)
            .map_err(|e| e.context(dir.display().to_string()))
    }
}
