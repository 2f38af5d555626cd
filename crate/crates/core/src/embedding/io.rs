//! Binary + manifest and CSV readers/writers for embedding sets.
//!
//! A dataset manifest is a plain-text file of `key = value` lines:
//!
//! ```text
//! dimension = 64
//! dtype = f32
//! train.data = train.f32
//! train.rows = 1000
//! train.labels = train.labels
//! test_id.data = test_id.f32
//! ood.data = ood.f32
//! ```
//!
//! Data files hold little-endian 4-byte IEEE floats, row-major. Label files
//! hold one non-negative integer per line. Relative paths resolve against the
//! manifest's directory. `<split>.rows` is optional; when present it must
//! agree with the data file's length.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CheckpointSeries, EmbeddingSet, Split};
use crate::error::{Error, Result};

const ELEMENT_WIDTH: usize = 4;

/// Files backing one split of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitFiles {
    pub key: String,
    pub data: PathBuf,
    pub labels: Option<PathBuf>,
    pub rows: Option<usize>,
}

/// Parsed dataset manifest, with paths already resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dimension: usize,
    pub splits: Vec<SplitFiles>,
}

fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                location: format!("{origin}:{}", lineno + 1),
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let mut dimension = None;
        let mut splits: Vec<SplitFiles> = Vec::new();
        let bad = |message: String| Error::Parse {
            location: origin.to_string(),
            message,
        };
        for (key, value) in parse_key_values(text, origin)? {
            match key.as_str() {
                "dimension" => {
                    let d: usize = value
                        .parse()
                        .map_err(|_| bad(format!("dimension '{value}' is not an integer")))?;
                    if d == 0 {
                        return Err(bad("dimension must be at least 1".into()));
                    }
                    dimension = Some(d);
                }
                "dtype" => {
                    if value != "f32" {
                        return Err(bad(format!("unsupported dtype '{value}' (expected f32)")));
                    }
                }
                _ => {
                    let Some((split, field)) = key.rsplit_once('.') else {
                        return Err(bad(format!("unknown key '{key}'")));
                    };
                    if Split::from_key(split).is_none() {
                        return Err(bad(format!("unknown split '{split}'")));
                    }
                    let idx = match splits.iter().position(|s| s.key == split) {
                        Some(i) => i,
                        None => {
                            splits.push(SplitFiles {
                                key: split.to_string(),
                                data: PathBuf::new(),
                                labels: None,
                                rows: None,
                            });
                            splits.len() - 1
                        }
                    };
                    let entry = &mut splits[idx];
                    match field {
                        "data" => entry.data = base.join(&value),
                        "labels" => entry.labels = Some(base.join(&value)),
                        "rows" => {
                            entry.rows =
                                Some(value.parse().map_err(|_| {
                                    bad(format!("{key} '{value}' is not an integer"))
                                })?)
                        }
                        _ => return Err(bad(format!("unknown key '{key}'"))),
                    }
                }
            }
        }
        let dimension = dimension.ok_or_else(|| bad("missing required key 'dimension'".into()))?;
        if let Some(s) = splits.iter().find(|s| s.data.as_os_str().is_empty()) {
            return Err(bad(format!(
                "split '{}' has no '{}.data' entry",
                s.key, s.key
            )));
        }
        Ok(DatasetManifest { dimension, splits })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        DatasetManifest::parse(&text, base, &path.display().to_string())
    }

    pub fn split(&self, key: &str) -> Option<&SplitFiles> {
        self.splits.iter().find(|s| s.key == key)
    }

    fn load(&self, files: &SplitFiles) -> Result<EmbeddingSet> {
        let data = read_f32_matrix(&files.data, self.dimension)?;
        let rows = data.len() / self.dimension;
        if let Some(declared) = files.rows {
            if declared != rows {
                return Err(Error::InvalidData(format!(
                    "{}: manifest declares {declared} rows but file holds {rows}",
                    files.data.display()
                )));
            }
        }
        let labels = match &files.labels {
            Some(p) => {
                let labels = read_labels(p)?;
                if labels.len() != rows {
                    return Err(Error::InvalidData(format!(
                        "{}: {} labels for {rows} rows",
                        p.display(),
                        labels.len()
                    )));
                }
                Some(labels)
            }
            None => None,
        };
        let split = Split::from_key(&files.key).expect("validated at parse time");
        EmbeddingSet::new(data, self.dimension, labels, split, files.key.clone()).map_err(|e| {
            match e {
                Error::NonFinite { .. } => {
                    Error::InvalidData(format!("{}: {e}", files.data.display()))
                }
                e => e,
            }
        })
    }
}

fn read_f32_matrix(path: &Path, dim: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % ELEMENT_WIDTH != 0 {
        return Err(Error::InvalidData(format!(
            "{}: {} bytes is not a whole number of 4-byte floats",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / ELEMENT_WIDTH;
    if count == 0 {
        return Err(Error::InvalidData(format!(
            "{}: file is empty",
            path.display()
        )));
    }
    if !count.is_multiple_of(dim) {
        return Err(Error::InvalidData(format!(
            "{}: {count} floats not divisible by dimension {dim}",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(ELEMENT_WIDTH)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let l = l.trim();
            l.parse::<u32>().map_err(|_| Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: format!("label '{l}' is not a non-negative integer"),
            })
        })
        .collect()
}

/// Loads every split declared by the manifest at `path`, in declaration order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSet>> {
    let manifest = DatasetManifest::read(path.as_ref())?;
    manifest.splits.iter().map(|s| manifest.load(s)).collect()
}

/// Loads one split (`train`, `test_id`, `ood`, `ood_<name>`) from a manifest.
pub fn load_split(path: impl AsRef<Path>, key: &str) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let files = manifest
        .split(key)
        .ok_or_else(|| Error::InvalidData(format!("{}: no split named '{key}'", path.display())))?;
    manifest.load(files)
}

/// Writes each set as `<dir>/<name>.f32` (+ `.labels`) and a manifest at
/// `<dir>/<manifest_name>` listing them. Set names must be valid split keys.
///
/// Values are stored as 4-byte floats, so a set round-trips bit-exactly when
/// its values are representable in single precision (always true for loaded
/// or synthesized sets).
pub fn save_manifest(
    dir: impl AsRef<Path>,
    manifest_name: &str,
    sets: &[&EmbeddingSet],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no embedding sets to save".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = format!("dimension = {}\ndtype = f32\n", first.dim());
    for set in sets {
        if set.dim() != first.dim() {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                actual: set.dim(),
            });
        }
        let key = set.name();
        if Split::from_key(key).is_none() {
            return Err(Error::InvalidArgument(format!(
                "set name '{key}' is not a valid split key"
            )));
        }
        let data_name = format!("{key}.f32");
        let mut bytes = Vec::with_capacity(set.as_slice().len() * ELEMENT_WIDTH);
        for &v in set.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_file(&dir.join(&data_name), &bytes)?;
        manifest.push_str(&format!(
            "{key}.data = {data_name}\n{key}.rows = {}\n",
            set.len()
        ));
        if let Some(labels) = set.labels() {
            let labels_name = format!("{key}.labels");
            let mut text = String::with_capacity(labels.len() * 3);
            for l in labels {
                text.push_str(&l.to_string());
                text.push('\n');
            }
            write_file(&dir.join(&labels_name), text.as_bytes())?;
            manifest.push_str(&format!("{key}.labels = {labels_name}\n"));
        }
    }
    let path = dir.join(manifest_name);
    write_file(&path, manifest.as_bytes())?;
    Ok(path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a comma-separated matrix, optionally with a trailing integer label
/// column. No header row.
pub fn load_csv(path: impl AsRef<Path>, has_label_column: bool) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            location: format!("{}: row {row}", path.display()),
            message: e.to_string(),
        })?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    location: format!("{}: row {row}", path.display()),
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        let value_cols = if has_label_column {
            record.len().saturating_sub(1)
        } else {
            record.len()
        };
        if value_cols == 0 {
            return Err(Error::Parse {
                location: format!("{}: row {row}", path.display()),
                message: "row has no value columns".into(),
            });
        }
        for (c, cell) in record.iter().take(value_cols).enumerate() {
            let location = || format!("{}: row {row}, column {}", path.display(), c + 1);
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: location(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    location: location(),
                    message: format!("non-finite value '{cell}'"),
                });
            }
            data.push(v);
        }
        if has_label_column {
            let cell = &record[value_cols];
            let l: u32 = cell.parse().map_err(|_| Error::Parse {
                location: format!("{}: row {row}, column {}", path.display(), value_cols + 1),
                message: format!("label '{cell}' is not a non-negative integer"),
            })?;
            labels.push(l);
        }
    }
    let Some(width) = width else {
        return Err(Error::InvalidData(format!("{}: no rows", path.display())));
    };
    let dim = if has_label_column { width - 1 } else { width };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingSet::new(
        data,
        dim,
        has_label_column.then_some(labels),
        Split::Train,
        name,
    )
}

/// Reads a checkpoint index: lines of `<epoch> = <dataset manifest>`, taking
/// split `key` from each manifest.
pub fn load_checkpoints(path: impl AsRef<Path>, key: &str) -> Result<CheckpointSeries> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let origin = path.display().to_string();
    let mut entries = Vec::new();
    for (epoch, manifest) in parse_key_values(&text, &origin)? {
        let epoch: u64 = epoch.parse().map_err(|_| Error::Parse {
            location: origin.clone(),
            message: format!("epoch '{epoch}' is not a non-negative integer"),
        })?;
        let set = load_split(base.join(manifest), key)
            .map_err(|e| Error::InvalidData(format!("epoch {epoch}: {e}")))?;
        entries.push((epoch, set));
    }
    CheckpointSeries::new(entries)
}
