//! Hand-computed values and statistical oracles, checked through the public API.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use styleshift::balance::{
    build_move_matrix, compute_targets, pick_style_carriers, plan_moves, sb_transform,
    select_samples, BatchMeta,
};
use styleshift::data::{gen_dataset, long_tail_counts, pixel_style, DatasetSpec};
use styleshift::kmeans::{kmeans, KMeansParams};
use styleshift::rng::derive_rng;
use styleshift::shift::{decide, DomainCentroid, DomainRegistry};
use styleshift::style_ops::{
    adain, dsu_uncertainty, dsu_with_noise, efdm, efdmix, sample_lambda, DsuNoise, MixCoefficient,
};
use styleshift::tensor::{channel_mean, channel_std, style_distance, style_vector, ChannelStats};
use styleshift::{FeatureBatch, FeatureMap, StyleVector};

fn map(values: &[f64]) -> FeatureMap {
    FeatureMap::new(1, 2, 2, values.to_vec()).unwrap()
}

fn sv(v: &[f64]) -> StyleVector {
    StyleVector::new(v.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn channel_statistics_of_one_to_four() {
    let f = map(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(channel_mean(&f), vec![2.5]);
    assert!(close(channel_std(&f, 0.0)[0], 1.25f64.sqrt(), 1e-12));
    assert!(close(channel_std(&f, 0.0)[0], 1.1180, 1e-4));
    let phi = style_vector(&f);
    assert!(close(phi.as_slice()[0], 2.5, 1e-12));
    assert!(close(phi.as_slice()[1], 1.1180, 1e-4));
}

#[test]
fn three_four_five() {
    assert_eq!(
        style_distance(&sv(&[0.0, 1.0]), &sv(&[3.0, 5.0])).unwrap(),
        5.0
    );
}

#[test]
fn adain_to_unit_statistics() {
    let out = adain(
        &map(&[1.0, 2.0, 3.0, 4.0]),
        &ChannelStats::new(vec![0.0], vec![1.0]).unwrap(),
    )
    .unwrap();
    for (o, e) in out
        .as_slice()
        .iter()
        .zip([-1.3416, -0.4472, 0.4472, 1.3416])
    {
        assert!(close(*o, e, 1e-4), "{o} vs {e}");
    }
}

#[test]
fn efdm_and_efdmix_by_hand() {
    assert_eq!(
        efdm(&[3.0, 1.0, 2.0], &[10.0, 30.0, 20.0]).unwrap(),
        vec![30.0, 10.0, 20.0]
    );
    let half = MixCoefficient::new(0.5).unwrap();
    assert_eq!(
        efdmix(&[3.0, 1.0, 2.0], &[10.0, 30.0, 20.0], half).unwrap(),
        vec![16.5, 5.5, 11.0]
    );
}

#[test]
fn dsu_mean_spread_matches_its_uncertainty() {
    let mut rng = derive_rng(11, 0);
    let data: Vec<f64> = (0..4 * 2 * 9)
        .map(|i| ((i * 37 % 17) as f64) * 0.3 + (i / 18) as f64)
        .collect();
    let batch = FeatureBatch::new(4, 2, 3, 3, data).unwrap();
    let (sd_mu, _) = dsu_uncertainty(&batch).unwrap();
    let draws = 10_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..draws {
        let noise = DsuNoise::draw(&mut rng, 4, 2);
        let out = dsu_with_noise(&batch, &noise).unwrap();
        let mu = channel_mean(&out.sample(0));
        for c in 0..2 {
            sum[c] += mu[c];
            sq[c] += mu[c] * mu[c];
        }
    }
    for c in 0..2 {
        let mean = sum[c] / draws as f64;
        let std = (sq[c] / draws as f64 - mean * mean).sqrt();
        assert!(
            close(std / sd_mu[c], 1.0, 0.05),
            "channel {c}: {std} vs {}",
            sd_mu[c]
        );
    }
}

#[test]
fn beta_variance_at_shape_one_tenth() {
    let mut rng = derive_rng(5, 0);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_lambda(&mut rng, 0.1).unwrap().value())
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let expected = 1.0 / (4.0 * (2.0 * 0.1 + 1.0));
    assert!(close(expected, 0.2083, 1e-4));
    assert!(close(var, expected, 0.01), "{var}");
}

#[test]
fn targets_and_moves_by_hand() {
    let t = compute_targets(&[4, 2, 1]).unwrap();
    assert!(close(t.average, 7.0 / 3.0, 1e-15));
    assert_eq!(t.targets, vec![3, 2, 2]);
    assert_eq!(compute_targets(&[5, 0, 0]).unwrap().targets, vec![2, 2, 1]);

    let m = build_move_matrix(&[6, 2, 1], &compute_targets(&[6, 2, 1]).unwrap()).unwrap();
    assert_eq!((m.get(0, 1), m.get(0, 2)), (1, 2));
    let m = build_move_matrix(&[4, 2, 1], &compute_targets(&[4, 2, 1]).unwrap()).unwrap();
    assert_eq!(m.get(0, 2), 1);
    assert_eq!(m.total(), 1);
}

#[test]
fn redundant_sample_selection_by_hand() {
    let styles: Vec<StyleVector> = [0.0, 0.1, 0.5, 1.0]
        .iter()
        .map(|&v| sv(&[v, 1.0]))
        .collect();
    assert_eq!(select_samples(&styles, 1).unwrap().selected, vec![1]);
}

#[test]
fn carrier_pairs_are_uniform() {
    // Sample 0 is the moved one (domain 0); samples 1..=4 belong to domain 1.
    let meta = BatchMeta::new(vec![0, 1, 1, 1, 1], vec![0, 0, 1, 1, 0], 2, 2).unwrap();
    let mut rng = derive_rng(3, 0);
    let mut freq: HashMap<(usize, usize), usize> = HashMap::new();
    let n = 10_000;
    for _ in 0..n {
        let c = pick_style_carriers(&meta, 1, 0, &mut rng).unwrap();
        assert_ne!(c.first, c.second);
        *freq
            .entry((c.first.min(c.second), c.first.max(c.second)))
            .or_default() += 1;
    }
    assert_eq!(freq.len(), 6);
    for (pair, count) in freq {
        let f = count as f64 / n as f64;
        assert!(close(f, 1.0 / 6.0, 0.02), "{pair:?}: {f}");
    }
}

#[test]
fn sb_transform_by_hand() {
    let one = |v: [f64; 3]| FeatureMap::new(1, 1, 3, v.to_vec()).unwrap();
    let out = sb_transform(
        &one([3.0, 1.0, 2.0]),
        &one([10.0, 30.0, 20.0]),
        &one([100.0, 300.0, 200.0]),
        MixCoefficient::new(0.5).unwrap(),
    )
    .unwrap();
    assert_eq!(out.as_slice(), &[165.0, 55.0, 110.0]);
}

#[test]
fn class_present_in_one_domain_only() {
    // Class 0: six samples in domain 0. Class 1 provides carriers in domains 1 and 2.
    let mut domains = vec![0; 6];
    let mut classes = vec![0; 6];
    domains.extend([1, 1, 2, 2]);
    classes.extend([1, 1, 1, 1]);
    let meta = BatchMeta::new(domains, classes, 3, 2).unwrap();
    let styles: Vec<StyleVector> = (0..10).map(|i| sv(&[i as f64 * 0.37 % 1.0, 1.0])).collect();
    let mut rng = derive_rng(0, 0);
    let plan = plan_moves(&styles, &meta, 0.1, &mut rng).unwrap();
    let moved: Vec<_> = plan
        .executed()
        .filter(|m| meta.class(m.sample) == 0)
        .collect();
    assert_eq!(moved.len(), 4);
    assert_eq!(moved.iter().filter(|m| m.to == 1).count(), 2);
    assert_eq!(moved.iter().filter(|m| m.to == 2).count(), 2);
    assert_eq!(plan.effective_counts(&meta, 0), vec![2, 2, 2]);
}

fn two_domain_registry() -> DomainRegistry {
    let domains = vec![
        DomainCentroid {
            name: "a".into(),
            style: sv(&[0.0, 1.0]),
        },
        DomainCentroid {
            name: "b".into(),
            style: sv(&[4.0, 1.0]),
        },
    ];
    DomainRegistry::from_centroids("block1", 3.0, domains).unwrap()
}

#[test]
fn registry_and_decisions_by_hand() {
    let reg = two_domain_registry();
    assert_eq!(reg.global().as_slice(), &[2.0, 1.0]);
    assert_eq!(reg.spread(), 2.0);

    let d = decide(&sv(&[10.0, 1.0]), &reg, 3.0).unwrap();
    assert_eq!(d.avg_distance, 8.0);
    assert_eq!(d.threshold, 6.0);
    assert_eq!(d.shift_to, Some(1));

    let d = decide(&sv(&[1.0, 1.0]), &reg, 3.0).unwrap();
    assert_eq!(d.avg_distance, 2.0);
    assert_eq!(d.shift_to, None);
}

#[test]
fn separated_gaussian_clusters_are_recovered() {
    let mut rng = derive_rng(9, 0);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        let (dx, dy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        points.push(vec![centers[c][0] + dx, centers[c][1] + dy]);
        truth.push(c);
    }
    let fit = kmeans(&points, 3, &KMeansParams::default(), &mut derive_rng(1, 0)).unwrap();
    // canonical labels: first appearance order matches i % 3
    assert_eq!(fit.labels, truth);
}

#[test]
fn pixel_styles_separate_the_default_domains() {
    let spec = DatasetSpec {
        train_per_cell: 10,
        test_per_cell: 1,
        ..DatasetSpec::default()
    };
    let ds = gen_dataset(&spec).unwrap();
    let points: Vec<Vec<f64>> = ds.images.iter().map(pixel_style).collect();
    let truth: Vec<usize> = ds.manifest.samples.iter().map(|s| s.domain).collect();
    let k = spec.domains.len();
    let fit = kmeans(&points, k, &KMeansParams::default(), &mut derive_rng(0, 0)).unwrap();
    let mut correct = 0;
    for c in 0..k {
        let mut votes = vec![0; k];
        for (l, t) in fit.labels.iter().zip(&truth) {
            if *l == c {
                votes[*t] += 1;
            }
        }
        correct += votes.iter().max().unwrap();
    }
    let purity = correct as f64 / points.len() as f64;
    assert!(purity > 0.9, "purity {purity}");
}

#[test]
fn long_tail_head_to_tail_ratio() {
    let counts = long_tail_counts(640, 7, 64.0);
    assert_eq!(counts[0], 640);
    assert_eq!(counts[6], 10);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
}
