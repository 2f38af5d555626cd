//! Distance metrics and regularized Gaussian estimation.

mod distance;
mod gaussian;

pub use distance::{cosine_distance, euclidean_distance, DistanceMetric};
pub use gaussian::{
    estimate_gaussian, log_gaussian_density, mahalanobis_score, regularization_epsilon,
    GaussianStats,
};

pub(crate) use distance::{cosine_with_norms, norm, squared_euclidean};
pub(crate) use gaussian::{
    accumulate_scatter, finish_symmetric, scatter_about, transpose_rows, ROW_BLOCK,
};
