use ood_clusters::clustering::{
    from_labels, gmm_fit, kmeans_fit, single_cluster, ClusterAssignment, ClusterSource, GmmOptions,
    KMeansOptions,
};
use ood_clusters::embedding::{synth_blobs, BlobSpec, EmbeddingSet, Split};
use ood_clusters::geometry::DistanceMetric;
use ood_clusters::scoring::{scores_to_csv, survival_fraction, ClusterModel, ThresholdMode};

fn set(data: Vec<f64>, dim: usize) -> EmbeddingSet {
    EmbeddingSet::new(data, dim, None, Split::Train, "t").unwrap()
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

#[test]
fn single_cluster_mean_and_reference() {
    let train = set(vec![0.0, 2.0], 1);
    let model =
        ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Euclidean).unwrap();
    assert_eq!(model.mean(0), &[1.0]);
    assert_eq!(model.reference(0), &[1.0, 1.0]);
    assert_eq!(model.global_reference(), &[1.0, 1.0]);
}

#[test]
fn identical_members_give_zero_reference() {
    let train = set(vec![3.0, -1.0, 3.0, -1.0, 3.0, -1.0], 2);
    let model =
        ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Euclidean).unwrap();
    assert_eq!(model.reference(0), &[0.0, 0.0, 0.0]);
}

#[test]
fn cluster_threshold_examples() {
    let train = set(
        vec![-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        1,
    );
    let model =
        ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Euclidean).unwrap();
    assert_eq!(model.score_cluster_threshold(&[3.0]).unwrap().value, 0.5);
    assert_eq!(model.score_cluster_threshold(&[0.5]).unwrap().value, 1.0);
    assert_eq!(model.score_cluster_threshold(&[-9.0]).unwrap().value, 0.0);
    let s = model.score_cluster_threshold(&[-3.0]).unwrap();
    assert_eq!((s.assigned_cluster, s.raw_distance), (0, 3.0));
}

#[test]
fn global_threshold_pools_references() {
    let train = set(vec![-1.0, 1.0, 97.0, 103.0], 1);
    let clusters = ClusterAssignment::new(vec![0, 0, 1, 1], 2, ClusterSource::KMeans).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean).unwrap();
    assert_eq!(model.global_reference(), &[1.0, 1.0, 3.0, 3.0]);
    let g = model.score_global_threshold(&[-2.0]).unwrap();
    assert_eq!((g.assigned_cluster, g.raw_distance, g.value), (0, 2.0, 0.5));
    assert_eq!(model.score_cluster_threshold(&[-2.0]).unwrap().value, 0.0);
    assert_eq!(model.score_global_threshold(&[0.0]).unwrap().value, 1.0);
}

#[test]
fn k1_cluster_and_global_scores_are_identical() {
    let train = blobs(3, 40, 6, 4.0, 1.0, 1);
    let test = blobs(3, 30, 6, 4.0, 2.0, 2);
    for metric in DistanceMetric::ALL {
        let model = ClusterModel::fit(&train, &single_cluster(&train), metric).unwrap();
        let a = model.score_set(&test, ThresholdMode::Cluster).unwrap();
        let b = model.score_set(&test, ThresholdMode::Global).unwrap();
        assert_eq!(a, b, "{metric}");
        for (x, s) in test.rows().zip(&a) {
            assert_eq!(model.score_global_threshold(x).unwrap(), *s);
        }
    }
}

#[test]
fn value_is_non_increasing_in_distance_within_a_cluster() {
    let train = blobs(2, 50, 3, 6.0, 1.0, 5);
    let clusters = from_labels(&train).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean).unwrap();
    let mean = model.mean(1).to_vec();
    let dir = [1.0, 0.0, 0.0];
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let t = step as f64 * 0.05;
        let x: Vec<f64> = mean.iter().zip(dir).map(|(m, d)| m + t * d).collect();
        let s = model.score_cluster_threshold(&x).unwrap();
        assert_eq!(s.assigned_cluster, 1);
        assert!(s.value <= last);
        last = s.value;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn training_scores_are_calibrated() {
    let train = blobs(4, 400, 8, 5.0, 1.0, 9);
    let (_, clusters) = kmeans_fit(&train, 4, &KMeansOptions::default()).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean).unwrap();
    let mut values: Vec<f64> = model
        .score_set(&train, ThresholdMode::Cluster)
        .unwrap()
        .iter()
        .map(|s| s.value)
        .collect();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let ks = values
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).abs().max((v - i as f64 / n).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS statistic {ks}");
}

#[test]
fn cosine_scores_ignore_query_scale() {
    let train = blobs(3, 50, 5, 4.0, 1.0, 3);
    let clusters = from_labels(&train).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Cosine).unwrap();
    let test = blobs(3, 20, 5, 4.0, 1.5, 4);
    for x in test.rows() {
        let base = model.score_cluster_threshold(x).unwrap();
        for scale in [1e-3, 0.37, 2.0, 913.0] {
            let y: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let s = model.score_cluster_threshold(&y).unwrap();
            assert_eq!(s.assigned_cluster, base.assigned_cluster);
            assert_eq!(s.value, base.value);
            assert!((s.raw_distance - base.raw_distance).abs() < 1e-12);
        }
    }
}

#[test]
fn increasing_transform_preserves_values() {
    let reference: Vec<f64> = (0..60).map(|i| (i / 3) as f64 * 0.25).collect();
    let transform = |v: f64| v.exp() * 3.0 + v;
    let mapped: Vec<f64> = reference.iter().map(|&v| transform(v)).collect();
    for q in 0..80 {
        let d = q as f64 * 0.07;
        assert_eq!(
            survival_fraction(&reference, d),
            survival_fraction(&mapped, transform(d))
        );
    }
}

#[test]
fn mahalanobis_rejects_singleton_clusters() {
    let train = set(vec![0.0, 1.0, 2.0, 10.0], 1);
    let clusters = ClusterAssignment::new(vec![0, 0, 0, 1], 2, ClusterSource::KMeans).unwrap();
    assert!(ClusterModel::fit(&train, &clusters, DistanceMetric::Mahalanobis).is_err());
    assert!(ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean).is_ok());
}

#[test]
fn gmm_scores_follow_likelihood() {
    let train = blobs(2, 150, 3, 8.0, 0.5, 12);
    let (gmm, clusters) = gmm_fit(&train, 2, &GmmOptions::default()).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean)
        .unwrap()
        .with_gmm(gmm.clone(), &train)
        .unwrap();
    let dominant = (0..2)
        .max_by(|&a, &b| gmm.weights[a].total_cmp(&gmm.weights[b]))
        .unwrap();
    let at_mode = model
        .score_gmm_global(gmm.components[dominant].mean())
        .unwrap();
    assert!(at_mode.value > 0.95, "{}", at_mode.value);
    assert_eq!(at_mode.assigned_cluster, dominant);
    let far: Vec<f64> = gmm.components[0].mean().iter().map(|m| m + 40.0).collect();
    assert_eq!(model.score_gmm_global(&far).unwrap().value, 0.0);
    let without = ClusterModel::fit(&train, &clusters, DistanceMetric::Euclidean).unwrap();
    assert!(without.score_gmm_global(&far).is_err());
}

#[test]
fn single_component_likelihood_ranks_like_mahalanobis() {
    let train = blobs(1, 300, 4, 3.0, 1.0, 6);
    let test = blobs(1, 80, 4, 3.0, 2.0, 7);
    let (gmm, clusters) = gmm_fit(&train, 1, &GmmOptions::default()).unwrap();
    let maha = ClusterModel::fit(&train, &clusters, DistanceMetric::Mahalanobis).unwrap();
    let both = maha.clone().with_gmm(gmm, &train).unwrap();
    let m = maha.score_set(&test, ThresholdMode::Cluster).unwrap();
    let g = both.score_set(&test, ThresholdMode::GmmDefault).unwrap();
    let order = |v: Vec<f64>| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    // Higher Mahalanobis distance means lower likelihood, i.e. higher -log p.
    assert_eq!(
        order(m.iter().map(|s| s.raw_distance).collect()),
        order(g.iter().map(|s| s.raw_distance).collect())
    );
}

#[test]
fn gmm_models_assign_by_responsibility() {
    let train = blobs(3, 60, 4, 6.0, 1.0, 14);
    let (gmm, clusters) = gmm_fit(&train, 3, &GmmOptions::default()).unwrap();
    let model = ClusterModel::fit(&train, &clusters, DistanceMetric::Cosine)
        .unwrap()
        .with_gmm(gmm.clone(), &train)
        .unwrap();
    let assigned = model.assign(&train).unwrap();
    assert_eq!(assigned.clusters, clusters.assignment());
    let bad = ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Cosine).unwrap();
    assert!(bad.with_gmm(gmm, &train).is_err());
}

#[test]
fn dimension_mismatch_is_reported() {
    let train = blobs(2, 10, 3, 4.0, 1.0, 1);
    let model = ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Cosine).unwrap();
    assert!(model.score_cluster_threshold(&[1.0, 2.0]).is_err());
}

#[test]
fn saved_models_reload_identically() {
    let train = blobs(3, 40, 5, 6.0, 1.0, 21);
    let test = blobs(3, 15, 5, 6.0, 1.5, 22);
    let (gmm, clusters) = gmm_fit(&train, 3, &GmmOptions::default()).unwrap();
    let plain = ClusterModel::fit(&train, &clusters, DistanceMetric::Mahalanobis).unwrap();
    let mixed = plain.clone().with_gmm(gmm, &train).unwrap();
    for (model, modes) in [
        (plain, vec![ThresholdMode::Cluster, ThresholdMode::Global]),
        (
            mixed,
            vec![ThresholdMode::Cluster, ThresholdMode::GmmDefault],
        ),
    ] {
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = ClusterModel::load(dir.path()).unwrap();
        assert_eq!(loaded, model);
        for mode in modes {
            assert_eq!(
                loaded.score_set(&test, mode).unwrap(),
                model.score_set(&test, mode).unwrap()
            );
        }
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(ClusterModel::load(empty.path()).is_err());
}

#[test]
fn score_csv_layout() {
    let train = set(vec![0.0, 2.0], 1);
    let model =
        ClusterModel::fit(&train, &single_cluster(&train), DistanceMetric::Euclidean).unwrap();
    let scores = model
        .score_set(&set(vec![1.0, 4.0], 1), ThresholdMode::Cluster)
        .unwrap();
    assert_eq!(
        scores_to_csv(&scores),
        "sample,cluster,raw_distance,value\n0,0,0,1\n1,0,3,0\n"
    );
}
