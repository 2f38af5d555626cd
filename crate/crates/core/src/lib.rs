//! Cluster-based out-of-distribution detection over embedding matrices.
//!
//! Training embeddings are partitioned into clusters ([`clustering`]), each
//! cluster keeps the sorted distances of its members to its mean
//! ([`scoring`]), and a test sample is scored by where its distance to the
//! nearest cluster falls in that reference distribution. [`evaluation`]
//! measures the resulting separation of in-distribution and OOD splits with
//! AUROC and runs grids of clustering choices; [`quality`] reports global
//! separation, purity and radius per cluster.
//!
//! ```
//! use ood_clusters::clustering::from_labels;
//! use ood_clusters::embedding::{synth_dataset, BlobSpec};
//! use ood_clusters::geometry::DistanceMetric;
//! use ood_clusters::scoring::{ClusterModel, ThresholdMode};
//!
//! let spec = BlobSpec {
//!     num_clusters: 3,
//!     per_cluster: 50,
//!     dimension: 8,
//!     center_scale: 10.0,
//!     sigma: 1.0,
//!     seed: 0,
//! };
//! let data = synth_dataset(&spec, 10, &[10.0])?;
//! let model = ClusterModel::fit(&data.train, &from_labels(&data.train)?, DistanceMetric::Cosine)?;
//! let scores = model.score_set(&data.oods[0], ThresholdMode::Cluster)?;
//! assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.value)));
//! # Ok::<(), ood_clusters::error::Error>(())
//! ```

pub mod clustering;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod quality;
pub mod scoring;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/quality.md")]
    mod quality {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
