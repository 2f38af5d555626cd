//! Isotropic Gaussian blobs standing in for trained-network embeddings.
//!
//! Centers are `J` normalized standard-normal draws scaled to radius `s`, so
//! the separation between classes is controlled by `s / sigma`. All draws come
//! from ChaCha8 streams keyed by the seed: centers use stream 0, shift
//! directions stream 1000, and each sampled split its own caller-chosen stream.
//! Generated values are rounded to single precision so that in-memory sets and
//! their saved files agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EmbeddingSet, Split};
use crate::error::{Error, Result};

const CENTER_STREAM: u64 = 0;
const SHIFT_STREAM: u64 = 1000;

/// Parameters of a blob dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_clusters: usize,
    pub per_cluster: usize,
    pub dimension: usize,
    pub center_scale: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.per_cluster == 0 || self.dimension == 0 {
            return Err(Error::InvalidArgument(
                "clusters, per-cluster count and dimension must all be at least 1".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "center scale must be finite and non-negative, got {}",
                self.center_scale
            )));
        }
        Ok(())
    }

    /// Draws `per_cluster` samples around each of `centers` from noise
    /// stream `stream`. Labels are the center index.
    pub fn sample(
        &self,
        centers: &[Vec<f64>],
        split: Split,
        name: &str,
        stream: u64,
    ) -> Result<EmbeddingSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut data = Vec::with_capacity(centers.len() * self.per_cluster * self.dimension);
        let mut labels = Vec::with_capacity(centers.len() * self.per_cluster);
        for (j, center) in centers.iter().enumerate() {
            if center.len() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    actual: center.len(),
                });
            }
            for _ in 0..self.per_cluster {
                for &c in center {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(round_single(c + self.sigma * z));
                }
                labels.push(j as u32);
            }
        }
        EmbeddingSet::new(data, self.dimension, Some(labels), split, name)
    }
}

fn round_single(v: f64) -> f64 {
    v as f32 as f64
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// The `J` blob centers: seeded directions on the sphere of radius `s`.
pub fn blob_centers(spec: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(CENTER_STREAM);
    Ok((0..spec.num_clusters)
        .map(|_| {
            unit_gaussian(&mut rng, spec.dimension)
                .into_iter()
                .map(|u| round_single(spec.center_scale * u))
                .collect()
        })
        .collect())
}

/// Centers rotated along the sphere of radius `s` so that each lies at
/// Euclidean distance `offset * sigma` from its original center, in a seeded
/// direction orthogonal to it. The rotated classes keep the norm profile of
/// the originals; only their direction changes.
pub fn shifted_centers(spec: &BlobSpec, offset: f64) -> Result<Vec<Vec<f64>>> {
    let centers = blob_centers(spec)?;
    let chord = offset * spec.sigma;
    let s = spec.center_scale;
    if !(chord >= 0.0 && chord.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "offset must be non-negative, got {offset}"
        )));
    }
    if chord > 0.0 && spec.dimension < 2 {
        return Err(Error::InvalidArgument(
            "shifting centers needs dimension of at least 2".into(),
        ));
    }
    if chord > 2.0 * s {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} sigma exceeds the sphere diameter {}",
            2.0 * s
        )));
    }
    let angle = if chord == 0.0 {
        0.0
    } else {
        2.0 * (chord / (2.0 * s)).asin()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SHIFT_STREAM);
    centers
        .into_iter()
        .map(|c| {
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(c);
            }
            let u: Vec<f64> = c.iter().map(|x| x / norm).collect();
            let v = loop {
                let mut v = unit_gaussian(&mut rng, spec.dimension);
                let proj: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    v.iter_mut().for_each(|x| *x /= n);
                    break v;
                }
            };
            Ok(u.iter()
                .zip(&v)
                .map(|(a, b)| round_single(s * (angle.cos() * a + angle.sin() * b)))
                .collect())
        })
        .collect()
}

/// `J * n` training samples around the seeded centers.
pub fn synth_blobs(spec: &BlobSpec) -> Result<EmbeddingSet> {
    let centers = blob_centers(spec)?;
    spec.sample(&centers, Split::Train, "train", 1)
}

/// Out-of-distribution samples around [`shifted_centers`], from noise stream
/// `stream`.
pub fn synth_shifted_blobs(
    spec: &BlobSpec,
    offset: f64,
    name: &str,
    stream: u64,
) -> Result<EmbeddingSet> {
    let centers = shifted_centers(spec, offset)?;
    spec.sample(&centers, Split::Ood, name, stream)
}

/// Train, test-ID and OOD splits drawn from one blob specification.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobDataset {
    pub train: EmbeddingSet,
    pub test_id: EmbeddingSet,
    pub oods: Vec<EmbeddingSet>,
}

impl BlobDataset {
    /// All splits in manifest order.
    pub fn sets(&self) -> Vec<&EmbeddingSet> {
        let mut v = vec![&self.train, &self.test_id];
        v.extend(&self.oods);
        v
    }
}

/// Samples a full dataset: `spec.per_cluster` training and
/// `test_per_cluster` test-ID samples per blob, plus one OOD split of
/// `test_per_cluster` per blob for each offset (in units of sigma). A single
/// OOD split is named `ood`; several are named `ood_<offset>`.
pub fn synth_dataset(
    spec: &BlobSpec,
    test_per_cluster: usize,
    ood_offsets: &[f64],
) -> Result<BlobDataset> {
    let centers = blob_centers(spec)?;
    let train = spec.sample(&centers, Split::Train, "train", 1)?;
    let test_spec = BlobSpec {
        per_cluster: test_per_cluster,
        ..*spec
    };
    let test_id = test_spec.sample(&centers, Split::TestId, "test_id", 2)?;
    let oods = ood_offsets
        .iter()
        .enumerate()
        .map(|(i, &offset)| {
            let name = if ood_offsets.len() == 1 {
                "ood".to_string()
            } else {
                format!("ood_{offset}")
            };
            synth_shifted_blobs(&test_spec, offset, &name, 3 + i as u64)
        })
        .collect::<Result<_>>()?;
    Ok(BlobDataset {
        train,
        test_id,
        oods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> BlobSpec {
        BlobSpec {
            num_clusters: 3,
            per_cluster: 100,
            dimension: 16,
            center_scale: 10.0,
            sigma,
            seed: 42,
        }
    }

    #[test]
    fn zero_sigma_samples_equal_centers() {
        let s = spec(0.0);
        let centers = blob_centers(&s).unwrap();
        let set = synth_blobs(&s).unwrap();
        for (i, row) in set.rows().enumerate() {
            assert_eq!(row, centers[i / 100].as_slice());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            synth_blobs(&spec(1.0)).unwrap(),
            synth_blobs(&spec(1.0)).unwrap()
        );
        let other = BlobSpec {
            seed: 43,
            ..spec(1.0)
        };
        assert_ne!(
            synth_blobs(&spec(1.0)).unwrap(),
            synth_blobs(&other).unwrap()
        );
    }

    #[test]
    fn sample_means_near_centers() {
        let s = spec(1.0);
        let centers = blob_centers(&s).unwrap();
        let set = synth_blobs(&s).unwrap();
        for (j, center) in centers.iter().enumerate() {
            for d in 0..s.dimension {
                let mean: f64 = (0..100).map(|i| set.row(j * 100 + i)[d]).sum::<f64>() / 100.0;
                assert!(
                    (mean - center[d]).abs() < 0.5,
                    "cluster {j} dim {d}: {mean}"
                );
            }
        }
        assert_eq!(set.labels().unwrap()[150], 1);
    }

    #[test]
    fn centers_lie_on_sphere() {
        for c in blob_centers(&spec(1.0)).unwrap() {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 10.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shifted_centers_keep_norm_and_offset() {
        let s = spec(1.0);
        let base = blob_centers(&s).unwrap();
        for offset in [2.0, 10.0] {
            for (a, b) in base.iter().zip(shifted_centers(&s, offset).unwrap()) {
                let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let d = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((n - 10.0).abs() < 1e-5);
                assert!((d - offset).abs() < 1e-5, "{d} vs {offset}");
            }
        }
        assert!(shifted_centers(&s, 25.0).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_blobs(&BlobSpec {
            sigma: -1.0,
            ..spec(1.0)
        })
        .is_err());
        assert!(synth_blobs(&BlobSpec {
            num_clusters: 0,
            ..spec(1.0)
        })
        .is_err());
    }
}
