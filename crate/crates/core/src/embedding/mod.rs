//! Embedding matrices, their on-disk formats, and synthetic generators.
//!
//! An [`EmbeddingSet`] is an immutable `N x D` row-major matrix held in `f64`
//! regardless of how it was stored, with optional integer class labels.

mod io;
mod synth;

pub(crate) use io::write_file;
pub use io::{
    load_checkpoints, load_csv, load_manifest, load_split, save_manifest, DatasetManifest,
    SplitFiles,
};
pub use synth::{
    blob_centers, shifted_centers, synth_blobs, synth_dataset, synth_shifted_blobs, BlobDataset,
    BlobSpec,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which role a set of embeddings plays in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    Ood,
}

impl Split {
    /// Split tag for a manifest key. `ood` and any `ood_<suffix>` name an
    /// out-of-distribution set.
    pub fn from_key(key: &str) -> Option<Split> {
        match key {
            "train" => Some(Split::Train),
            "test_id" => Some(Split::TestId),
            "ood" => Some(Split::Ood),
            k if k.starts_with("ood_") && k.len() > 4 => Some(Split::Ood),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::from_key(s).ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

/// An `N x D` matrix of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    labels: Option<Vec<u32>>,
    split: Split,
    name: String,
}

impl EmbeddingSet {
    /// Builds a set from row-major `data`, checking shape, finiteness and
    /// label length.
    pub fn new(
        data: Vec<f64>,
        dim: usize,
        labels: Option<Vec<u32>>,
        split: Split,
        name: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("dimension must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidData("embedding set has no rows".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidData(format!(
                "{} values are not divisible by dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                column: pos % dim,
            });
        }
        let rows = data.len() / dim;
        if let Some(labels) = &labels {
            if labels.len() != rows {
                return Err(Error::InvalidData(format!(
                    "label count {} does not match row count {rows}",
                    labels.len()
                )));
            }
        }
        Ok(EmbeddingSet {
            data,
            rows,
            dim,
            labels,
            split,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// The whole matrix, row-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of distinct labels, if labelled.
    pub fn num_classes(&self) -> Option<usize> {
        let labels = self.labels.as_ref()?;
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        Some(distinct.len())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        EmbeddingSet::new(data, self.dim, labels, self.split, self.name.clone())
    }

    /// Applies `f` to every value, keeping shape, labels and tags.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        EmbeddingSet::new(
            data,
            self.dim,
            self.labels.clone(),
            self.split,
            self.name.clone(),
        )
    }
}

/// Rows whose norm is already this close to 1 are left untouched, which
/// makes normalization exactly idempotent.
const UNIT_NORM_TOLERANCE: f64 = 1e-12;

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(set.data.len());
    for (i, row) in set.rows().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row: i });
        }
        if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
            data.extend_from_slice(row);
        } else {
            data.extend(row.iter().map(|v| v / norm));
        }
    }
    EmbeddingSet::new(
        data,
        set.dim,
        set.labels.clone(),
        set.split,
        set.name.clone(),
    )
}

/// Embeddings of the same inputs captured at successive training epochs.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    entries: Vec<(u64, EmbeddingSet)>,
}

impl CheckpointSeries {
    pub fn new(entries: Vec<(u64, EmbeddingSet)>) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(Error::InvalidData("checkpoint series is empty".into()));
        };
        let dim = first.dim();
        let labelled = first.labels().is_some();
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidData(format!(
                    "checkpoint epochs must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for (epoch, set) in &entries {
            if set.dim() != dim {
                return Err(Error::InvalidData(format!(
                    "epoch {epoch}: dimension {} differs from {dim}",
                    set.dim()
                )));
            }
            if set.labels().is_some() != labelled {
                return Err(Error::InvalidData(format!(
                    "epoch {epoch}: label presence differs from the first checkpoint"
                )));
            }
        }
        Ok(CheckpointSeries { entries })
    }

    pub fn entries(&self) -> &[(u64, EmbeddingSet)] {
        &self.entries
    }
}
