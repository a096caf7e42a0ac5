mod common;

use std::collections::HashMap;

use common::{enumerate_paths, random_model};
use mdma::stats::ks_two_sample;
use mdma::{init_model, sample, sample_autoregressive, sample_component, Query, QueryTag};
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn one_hot_mixing_gives_a_deterministic_path() {
    let mut model = init_model::<f64>(4, 3, 1, 1, 2, 0).unwrap();
    for level in model.ht_mut().raw_levels_mut() {
        let (n, m, _) = level.dim();
        *level = Array3::from_shape_fn((n, m, m), |(_, i, k)| {
            if k == (i + 1) % m {
                50.0
            } else {
                -50.0
            }
        });
    }
    model.ht_mut().raw_root_mut().assign(&ndarray::arr1(&[-50.0, 50.0, -50.0]));
    let eff = model.ht().effective();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let path = sample_component(&eff, &mut rng);
        assert_eq!(path.nodes, vec![vec![2, 2], vec![1]]);
        assert_eq!(path.leaves, vec![2; 4]);
    }
}

#[test]
fn draw_count_equals_internal_nodes() {
    for (d, pool, expected) in [(8, 2, 7), (4, 2, 3), (5, 2, 6), (9, 3, 4), (1, 2, 1)] {
        let model = random_model(d, 2, 1, 1, pool, 3);
        let eff = model.ht().effective();
        let path = sample_component(&eff, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(path.draws(), expected, "d={d} pool={pool}");
        assert_eq!(path.draws(), model.ht().shape().internal_node_count());
        assert_eq!(path.leaves.len(), d);
    }
}

#[test]
fn path_frequencies_match_enumerated_probabilities() {
    let model = random_model(4, 2, 1, 1, 2, 17);
    let eff = model.ht().effective();
    let exact: HashMap<Vec<Vec<usize>>, f64> = enumerate_paths(&eff).into_iter().collect();
    let n = 100_000;
    let mut counts: HashMap<Vec<Vec<usize>>, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..n {
        *counts.entry(sample_component(&eff, &mut rng).nodes).or_default() += 1;
    }
    for (path, p) in &exact {
        let observed = *counts.get(path).unwrap_or(&0) as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((observed - p).abs() <= 3.0 * sd + 1e-12, "{path:?}: {observed} vs {p}");
    }
    assert!(counts.keys().all(|k| exact.contains_key(k)));
}

#[test]
fn single_component_marginals_follow_the_univariate_cdf() {
    let model = random_model(2, 1, 2, 3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = sample(&model, 10_000, &mut rng, 1e-9).unwrap();
    let prepared = model.prepare();
    for j in 0..2 {
        // KS against the exact CDF: transform through it and compare with uniform quantiles
        let mut u: Vec<f64> = draws.column(j).iter().map(|&x| prepared.net(0, j).cdf_unchecked(x)).collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let stat = u
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
            .fold(0.0, f64::max);
        let p = mdma::stats::kolmogorov_survival(stat * (n.sqrt() + 0.12 + 0.11 / n.sqrt()));
        assert!(p > 0.01, "coordinate {j}: D = {stat}, p = {p}");
    }
}

#[test]
fn empirical_joint_cdf_matches_model() {
    let model = random_model(3, 3, 2, 2, 2, 12);
    let n = 10_000;
    let draws = sample(&model, n, &mut ChaCha8Rng::seed_from_u64(2), 1e-9).unwrap();
    let probes = sample(&model, 20, &mut ChaCha8Rng::seed_from_u64(3), 1e-9).unwrap();
    for probe in probes.axis_iter(Axis(0)) {
        let exact = model
            .evaluate(&Query::new(probe.iter().map(|&v| QueryTag::CdfAt(v)).collect()))
            .unwrap();
        let hits = draws
            .axis_iter(Axis(0))
            .filter(|r| r.iter().zip(probe.iter()).all(|(a, b)| a <= b))
            .count();
        let ecdf = hits as f64 / n as f64;
        assert!((ecdf - exact).abs() < 4.0 / (n as f64).sqrt());
    }
}

#[test]
fn hierarchical_and_autoregressive_samplers_agree() {
    let model = random_model(3, 3, 2, 2, 2, 21);
    let n = 4000;
    let a = sample(&model, n, &mut ChaCha8Rng::seed_from_u64(7), 1e-9).unwrap();
    let b = sample_autoregressive(&model, n, &mut ChaCha8Rng::seed_from_u64(8), 1e-9).unwrap();
    for j in 0..3 {
        let ks = ks_two_sample(&a.column(j).to_vec(), &b.column(j).to_vec());
        assert!(ks.p_value > 0.01, "coordinate {j}: {ks:?}");
    }
    let w = ndarray::arr1(&[0.6, -0.3, 0.74]);
    let ks = ks_two_sample(&a.dot(&w).to_vec(), &b.dot(&w).to_vec());
    assert!(ks.p_value > 0.01, "projection: {ks:?}");
}

#[test]
fn one_dimensional_samplers_coincide() {
    let model = random_model(1, 3, 1, 2, 2, 4);
    let a = sample(&model, 3000, &mut ChaCha8Rng::seed_from_u64(1), 1e-9).unwrap();
    let b = sample_autoregressive(&model, 3000, &mut ChaCha8Rng::seed_from_u64(2), 1e-9).unwrap();
    let ks = ks_two_sample(&a.column(0).to_vec(), &b.column(0).to_vec());
    assert!(ks.p_value > 0.01);
}

#[test]
fn sampling_is_deterministic_and_thread_independent() {
    let model = random_model(4, 3, 1, 2, 2, 6);
    let a = sample(&model, 500, &mut ChaCha8Rng::seed_from_u64(42), 1e-9).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| sample(&model, 500, &mut ChaCha8Rng::seed_from_u64(42), 1e-9).unwrap());
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn rejects_bad_arguments() {
    let model = random_model(2, 2, 1, 1, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample(&model, 0, &mut rng, 1e-9).is_err());
    assert!(sample(&model, 5, &mut rng, 0.0).is_err());
}
