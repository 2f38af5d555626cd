//! Rank-based ROC analysis and the comparison sweep.

mod sweep;

pub use sweep::{
    build_clusters, default_grid, fit_cluster_model, parse_grid, run_sweep, GridCell, KSpec,
    SweepConfig, SweepReport, SweepRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored sample with its ground truth. Higher scores mean "more
/// in-distribution".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScoredSample {
    pub score: f64,
    pub is_id: bool,
}

impl BinaryScoredSample {
    pub fn new(score: f64, is_id: bool) -> Self {
        BinaryScoredSample { score, is_id }
    }
}

/// Labels `id` scores as in-distribution and `ood` scores as not.
pub fn labelled_scores(id: &[f64], ood: &[f64]) -> Vec<BinaryScoredSample> {
    id.iter()
        .map(|&s| BinaryScoredSample::new(s, true))
        .chain(ood.iter().map(|&s| BinaryScoredSample::new(s, false)))
        .collect()
}

fn check(samples: &[BinaryScoredSample]) -> Result<(usize, usize)> {
    if let Some(i) = samples.iter().position(|s| !s.score.is_finite()) {
        return Err(Error::InvalidData(format!("score {i} is not finite")));
    }
    let n_id = samples.iter().filter(|s| s.is_id).count();
    let n_ood = samples.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(Error::InvalidData(format!(
            "AUROC needs both classes ({n_id} ID, {n_ood} OOD samples)"
        )));
    }
    Ok((n_id, n_ood))
}

fn sorted_by_score(samples: &[BinaryScoredSample]) -> Vec<BinaryScoredSample> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    sorted
}

/// Probability that a random ID sample outscores a random OOD sample, ties
/// counting one half (the Mann-Whitney statistic), from one sort with
/// mid-rank ties.
pub fn auroc(samples: &[BinaryScoredSample]) -> Result<f64> {
    let (n_id, n_ood) = check(samples)?;
    let sorted = sorted_by_score(samples);
    // Sum of 1-based mid-ranks of the ID samples, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end < sorted.len() && sorted[end].score == sorted[start].score {
            end += 1;
        }
        let ids = sorted[start..end].iter().filter(|s| s.is_id).count() as u128;
        // Ranks start+1 ..= end share the mid-rank (start + 1 + end) / 2.
        twice_rank_sum += ids * (start + 1 + end) as u128;
        start = end;
    }
    let (a, b) = (n_id as u128, n_ood as u128);
    // Twice the count of winning pairs (ties counted once).
    let twice_u = twice_rank_sum - a * (a + 1);
    Ok(twice_u as f64 / (2 * a * b) as f64)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score threshold, highest threshold first.
pub fn roc_curve(samples: &[BinaryScoredSample]) -> Result<Vec<(f64, f64)>> {
    let (n_id, n_ood) = check(samples)?;
    let mut sorted = sorted_by_score(samples);
    sorted.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].is_id {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_ood as f64, tp as f64 / n_id as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a polyline of `(x, y)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&labelled_scores(&[0.9, 0.8], &[0.1, 0.2])).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&labelled_scores(&[0.3, 0.5], &[0.5, 0.3])).unwrap(),
            0.5
        );
        assert_eq!(
            auroc(&labelled_scores(&[0.9, 0.4], &[0.6, 0.1])).unwrap(),
            0.75
        );
    }

    #[test]
    fn auroc_needs_both_classes() {
        assert!(auroc(&labelled_scores(&[0.1], &[])).is_err());
        assert!(auroc(&labelled_scores(&[], &[0.1])).is_err());
        assert!(auroc(&labelled_scores(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn roc_examples() {
        let perfect = roc_curve(&labelled_scores(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert!(perfect.contains(&(0.0, 1.0)));
        let flat = roc_curve(&labelled_scores(&[0.5, 0.5], &[0.5])).unwrap();
        assert_eq!(flat, vec![(0.0, 0.0), (1.0, 1.0)]);
        let mixed = roc_curve(&labelled_scores(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert_eq!(trapezoid_area(&mixed), 0.75);
    }
}
