use ood_clusters::clustering::{from_labels, single_cluster, ClusterAssignment, ClusterSource};
use ood_clusters::embedding::{synth_blobs, BlobSpec, CheckpointSeries, EmbeddingSet, Split};
use ood_clusters::geometry::DistanceMetric;
use ood_clusters::quality::{
    cluster_purity, cluster_radius, evolution_to_csv, global_separation, quality_report,
    separation_evolution, SeparationConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(data: Vec<f64>, dim: usize) -> EmbeddingSet {
    EmbeddingSet::new(data, dim, None, Split::Train, "t").unwrap()
}

fn labelled(data: Vec<f64>, dim: usize, labels: Vec<u32>) -> EmbeddingSet {
    EmbeddingSet::new(data, dim, Some(labels), Split::Train, "t").unwrap()
}

fn blobs(j: usize, n: usize, d: usize, s: f64, sigma: f64, seed: u64) -> EmbeddingSet {
    synth_blobs(&BlobSpec {
        num_clusters: j,
        per_cluster: n,
        dimension: d,
        center_scale: s,
        sigma,
        seed,
    })
    .unwrap()
}

fn euclid(x: f64) -> SeparationConfig {
    SeparationConfig::new(x, DistanceMetric::Euclidean).unwrap()
}

fn two_clusters(a: &[f64], b: &[f64]) -> (EmbeddingSet, ClusterAssignment) {
    let data = [a, b].concat();
    let ids = [vec![0; a.len()], vec![1; b.len()]].concat();
    (
        set(data, 1),
        ClusterAssignment::new(ids, 2, ClusterSource::KMeans).unwrap(),
    )
}

/// Mean of the smallest `ceil(x * M)` of an explicit distance list.
fn oracle_truncated_mean(mut d: Vec<f64>, x: f64) -> f64 {
    d.sort_by(f64::total_cmp);
    let keep = ((x * d.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    d[..keep].iter().sum::<f64>() / keep as f64
}

#[test]
fn separated_pair_hand_case() {
    let (s, c) = two_clusters(&[0.0, 0.1], &[10.0, 10.1]);
    let gs = global_separation(&s, &c, &euclid(1.0)).unwrap();
    assert!((gs[0] - 0.99).abs() < 1e-12, "{}", gs[0]);
}

#[test]
fn overlapping_pair_hand_case() {
    let (s, c) = two_clusters(&[0.0, 10.0], &[5.0, 5.1]);
    let gs = global_separation(&s, &c, &euclid(1.0)).unwrap();
    assert!((gs[0] + 0.5).abs() < 1e-12, "{}", gs[0]);
}

#[test]
fn identical_point_sets_are_symmetric() {
    // Intra lists exclude self-pairs, while the cross list contains the three
    // coincident pairs at distance 0: intra mean 6/3, cross mean 12/9.
    let (s, c) = two_clusters(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]);
    let gs = global_separation(&s, &c, &euclid(1.0)).unwrap();
    assert_eq!(gs[0], gs[1]);
    assert!((gs[0] - (12.0 / 9.0 - 2.0) / 2.0).abs() < 1e-15);
    // With every distance zero both terms vanish.
    let (z, cz) = two_clusters(&[3.0, 3.0], &[3.0, 3.0]);
    assert_eq!(
        global_separation(&z, &cz, &euclid(0.5)).unwrap(),
        vec![0.0, 0.0]
    );
}

#[test]
fn matches_explicit_pair_lists() {
    let s = blobs(3, 9, 4, 2.0, 1.0, 31);
    let c = from_labels(&s).unwrap();
    let rows: Vec<&[f64]> = s.rows().collect();
    let d = |i: usize, j: usize| {
        rows[i]
            .iter()
            .zip(rows[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for x in [0.05, 0.1, 0.37, 1.0] {
        let gs = global_separation(&s, &c, &euclid(x)).unwrap();
        for a in 0..3 {
            let m = c.members(a);
            let mut intra = Vec::new();
            for (p, &i) in m.iter().enumerate() {
                for &j in &m[p + 1..] {
                    intra.push(d(i, j));
                }
            }
            let p_intra = oracle_truncated_mean(intra, x);
            let p_inter = (0..3)
                .filter(|&b| b != a)
                .map(|b| {
                    let cross = m
                        .iter()
                        .flat_map(|&i| c.members(b).iter().map(move |&j| (i, j)))
                        .map(|(i, j)| d(i, j))
                        .collect();
                    oracle_truncated_mean(cross, x)
                })
                .fold(f64::INFINITY, f64::min);
            let expected = (p_inter - p_intra) / p_inter.max(p_intra);
            assert!((gs[a] - expected).abs() < 1e-12, "x={x} c={a}");
        }
    }
}

#[test]
fn separation_rejects_degenerate_input() {
    let s = set(vec![0.0, 1.0, 2.0], 1);
    assert!(global_separation(&s, &single_cluster(&s), &euclid(1.0)).is_err());
    let c = ClusterAssignment::new(vec![0, 0, 1], 2, ClusterSource::KMeans).unwrap();
    assert!(global_separation(&s, &c, &euclid(1.0)).is_err());
    assert!(SeparationConfig::new(0.0, DistanceMetric::Cosine).is_err());
    assert!(SeparationConfig::new(1.5, DistanceMetric::Cosine).is_err());
    assert!(SeparationConfig::new(0.5, DistanceMetric::Mahalanobis).is_err());
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn transform(s: &EmbeddingSet, rot: &[Vec<f64>], shift: f64) -> EmbeddingSet {
    let data = s
        .rows()
        .flat_map(|x| {
            rot.iter()
                .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + shift)
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingSet::new(
        data,
        s.dim(),
        s.labels().map(<[u32]>::to_vec),
        s.split(),
        "r",
    )
    .unwrap()
}

#[test]
fn invariant_under_isometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = blobs(3, 20, 5, 4.0, 1.0, 8);
    let c = from_labels(&s).unwrap();
    let rot = random_rotation(5, &mut rng);
    for x in [0.1, 1.0] {
        let base = global_separation(&s, &c, &euclid(x)).unwrap();
        let moved = global_separation(&transform(&s, &rot, 3.5), &c, &euclid(x)).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
        let cos = SeparationConfig::new(x, DistanceMetric::Cosine).unwrap();
        let base = global_separation(&s, &c, &cos).unwrap();
        let moved = global_separation(&transform(&s, &rot, 0.0), &c, &cos).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn separation_is_bounded(
        points in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4..40),
        k in 2usize..5,
        seed in 0u64..1000,
        x in 0.01f64..=1.0,
    ) {
        let n = points.len();
        prop_assume!(n >= 2 * k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let s = set(points.iter().flat_map(|&(a, b)| [a, b]).collect(), 2);
        let c = ClusterAssignment::new(ids, k, ClusterSource::KMeans).unwrap();
        for gs in global_separation(&s, &c, &euclid(x)).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&gs));
        }
    }
}

#[test]
fn purity_examples() {
    let mut labels = vec![3u32; 490];
    labels.extend([1u32; 10]);
    let one = ClusterAssignment::new(vec![0; 500], 1, ClusterSource::KMeans).unwrap();
    assert_eq!(cluster_purity(&one, &labels).unwrap(), vec![0.98]);
    let half = ClusterAssignment::new(vec![0; 4], 1, ClusterSource::KMeans).unwrap();
    assert_eq!(cluster_purity(&half, &[1, 2, 1, 2]).unwrap(), vec![0.5]);
    assert!(cluster_purity(&half, &[1, 2]).is_err());
}

#[test]
fn ground_truth_clusters_are_pure() {
    let s = blobs(7, 13, 3, 1.0, 2.0, 2);
    let c = from_labels(&s).unwrap();
    assert!(cluster_purity(&c, s.labels().unwrap())
        .unwrap()
        .iter()
        .all(|&p| p == 1.0));
}

#[test]
fn purity_of_proportional_subset_matches() {
    let labels: Vec<u32> = (0..60).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
    let full = ClusterAssignment::new(vec![0; 60], 1, ClusterSource::KMeans).unwrap();
    let sub = ClusterAssignment::new(vec![0; 30], 1, ClusterSource::KMeans).unwrap();
    assert_eq!(
        cluster_purity(&full, &labels).unwrap(),
        cluster_purity(&sub, &labels[..30]).unwrap()
    );
}

#[test]
fn radius_examples() {
    let ring: Vec<f64> = (0..8)
        .flat_map(|i| {
            let t = i as f64 * std::f64::consts::FRAC_PI_4;
            [2.0 * t.cos(), 2.0 * t.sin()]
        })
        .collect();
    let s = set(ring, 2);
    for q in [0.1, 0.5, 1.0] {
        let r = cluster_radius(&s, &single_cluster(&s), DistanceMetric::Euclidean, q).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12);
    }
    // Members at distances 1..100 on both sides of 0 (mean exactly 0).
    let line: Vec<f64> = (1..=100).flat_map(|d| [d as f64, -(d as f64)]).collect();
    let s = set(line, 1);
    let r = cluster_radius(&s, &single_cluster(&s), DistanceMetric::Euclidean, 0.95).unwrap();
    assert_eq!(r, vec![95.0]);
    let lone = set(vec![1.0, 2.0, 3.0], 1);
    let c = ClusterAssignment::new(vec![0, 0, 1], 2, ClusterSource::KMeans).unwrap();
    assert!(cluster_radius(&lone, &c, DistanceMetric::Mahalanobis, 0.95).is_err());
    assert!(cluster_radius(&lone, &c, DistanceMetric::Euclidean, 0.0).is_err());
}

#[test]
fn radius_ratio_tracks_sigma_ratio() {
    let narrow = blobs(1, 2000, 32, 0.0, 1.0, 3);
    let wide = blobs(1, 2000, 32, 0.0, 2.5, 4).with_name("w");
    let labels = [vec![0; 2000], vec![1; 2000]].concat();
    let s = labelled([narrow.as_slice(), wide.as_slice()].concat(), 32, labels);
    let r = cluster_radius(
        &s,
        &from_labels(&s).unwrap(),
        DistanceMetric::Euclidean,
        0.95,
    )
    .unwrap();
    let ratio = r[1] / r[0];
    assert!((2.25..=2.75).contains(&ratio), "{ratio}");
}

fn series(sets: Vec<EmbeddingSet>) -> CheckpointSeries {
    CheckpointSeries::new(
        sets.into_iter()
            .enumerate()
            .map(|(e, s)| (e as u64, s))
            .collect(),
    )
    .unwrap()
}

#[test]
fn evolution_examples() {
    let cfg = SeparationConfig::default();
    let a = blobs(3, 20, 8, 5.0, 1.0, 1);
    let rows = separation_evolution(&series(vec![a.clone(), a.clone()]), &cfg).unwrap();
    assert_eq!(rows[0].global_separation, rows[1].global_separation);
    assert_eq!(rows[1].epoch, 1);
    assert_eq!(
        separation_evolution(&series(vec![a]), &cfg).unwrap().len(),
        1
    );

    let loose = blobs(3, 30, 8, 1.0, 5.0, 2);
    let tight = blobs(3, 30, 8, 10.0, 0.2, 2);
    let rows = separation_evolution(&series(vec![loose, tight]), &cfg).unwrap();
    for c in 0..3 {
        assert!(rows[1].global_separation[c] > rows[0].global_separation[c]);
    }
    let csv = evolution_to_csv(&rows);
    assert!(csv.starts_with("epoch,cluster,global_separation\n0,0,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn evolution_errors_name_the_epoch() {
    let ok = blobs(2, 5, 3, 3.0, 1.0, 1);
    let bad = labelled(
        ok.as_slice().to_vec(),
        3,
        vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
    );
    let err = separation_evolution(
        &CheckpointSeries::new(vec![(0, ok), (7, bad)]).unwrap(),
        &SeparationConfig::default(),
    )
    .unwrap_err();
    assert!(err.to_string().starts_with("epoch 7:"), "{err}");
}

#[test]
fn report_csv_echoes_quantile() {
    let s = blobs(3, 20, 4, 5.0, 1.0, 6);
    let c = from_labels(&s).unwrap();
    let report = quality_report(
        &s,
        &c,
        &SeparationConfig::default(),
        DistanceMetric::Cosine,
        0.95,
    )
    .unwrap();
    let csv = report.to_csv();
    assert!(csv.starts_with("cluster,size,global_separation,purity,radius_q0.95\n"));
    assert_eq!(report.per_cluster_purity, Some(vec![1.0; 3]));
    assert_eq!(report.sizes, vec![20; 3]);
    let unlabelled = quality_report(
        &s.clone().without_labels(),
        &c,
        &SeparationConfig::default(),
        DistanceMetric::Cosine,
        0.95,
    )
    .unwrap();
    assert!(unlabelled.to_csv().lines().nth(1).unwrap().contains(",,"));
}
