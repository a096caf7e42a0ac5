mod common;

use common::{brute_force_contract, dense_coefficients, random_model};
use mdma::{Query, QueryTag};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn contraction_matches_explicit_coefficient_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in 2..=4 {
        for m in 1..=3 {
            for pool in [2, 3] {
                let mut model = random_model(d, m, 1, 2, pool, (d * 10 + m + pool) as u64);
                let mut order: Vec<usize> = (0..d).collect();
                order.shuffle(&mut rng);
                model.ht_mut().set_leaf_order(order).unwrap();
                let eff = model.ht().effective();
                let a = dense_coefficients(&eff);
                assert!(a.iter().all(|&v| v >= 0.0));
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for _ in 0..5 {
                    let factors: Vec<Vec<f64>> = (0..d)
                        .map(|_| (0..m).map(|_| rng.random_range(0.01..3.0)).collect())
                        .collect();
                    let oracle = brute_force_contract(&a, &factors, m);
                    let fast = model.ht_contract(&factors).unwrap();
                    assert!(
                        (fast - oracle).abs() <= 1e-12 * oracle.abs(),
                        "d={d} m={m} pool={pool}: {fast} vs {oracle}"
                    );
                }
            }
        }
    }
}

#[test]
fn joint_cdf_matches_enumeration() {
    let model = random_model(3, 2, 2, 2, 2, 5);
    let prepared = model.prepare();
    let a = dense_coefficients(prepared.ht());
    let x = [0.3, -1.2, 0.8];
    let factors: Vec<Vec<f64>> = (0..3).map(|j| prepared.cdf_vector(j, x[j])).collect();
    let q = Query::new(x.iter().map(|&v| QueryTag::CdfAt(v)).collect());
    let value = model.evaluate(&q).unwrap();
    assert!((value - brute_force_contract(&a, &factors, 2)).abs() < 1e-13);
}

#[test]
fn cdf_limits() {
    let model = random_model(3, 3, 2, 3, 2, 8);
    let top = Query::new(vec![QueryTag::CdfAt(1e6); 3]);
    assert!((model.evaluate(&top).unwrap() - 1.0).abs() < 1e-9);
    let bottom = Query::new(vec![QueryTag::CdfAt(-1e6), QueryTag::Marginalize, QueryTag::CdfAt(0.0)]);
    assert!(model.evaluate(&bottom).unwrap() < 1e-9);
}

#[test]
fn query_parsing_round_trip() {
    let q: Query = "c:1.5,d:-2,m,given:0.25".parse().unwrap();
    assert_eq!(
        q.tags,
        vec![
            QueryTag::CdfAt(1.5),
            QueryTag::DensityAt(-2.0),
            QueryTag::Marginalize,
            QueryTag::ConditionDensityAt(0.25)
        ]
    );
    let text = q.tags.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    assert_eq!(text.parse::<Query>().unwrap(), q);
    assert!("c:abc".parse::<Query>().is_err());
    assert!("x:1".parse::<Query>().is_err());
}

#[test]
fn conditioning_on_a_zero_density_event_fails() {
    let model = random_model(2, 2, 1, 1, 2, 3);
    let q = Query::new(vec![QueryTag::CdfAt(0.0), QueryTag::ConditionDensityAt(1e200)]);
    assert_eq!(model.evaluate(&q), Err(mdma::MdmaError::ZeroDensityCondition));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn marginal_query_equals_lower_dimensional_contraction(
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let model = random_model(3, 2, 1, 2, 2, seed);
        let q = Query::new(vec![QueryTag::DensityAt(x[0]), QueryTag::Marginalize, QueryTag::DensityAt(x[2])]);
        let direct = model.evaluate(&q).unwrap();
        let logged = model.log_density(&x, &[false, true, false]).unwrap();
        prop_assert!((direct.ln() - logged).abs() < 1e-10);
    }

    #[test]
    fn conditional_cdf_is_monotone_and_bounded(
        seed in 0u64..1000,
        a in -4.0f64..4.0,
        b in -4.0f64..4.0,
        z in -2.0f64..2.0,
    ) {
        let model = random_model(2, 3, 2, 2, 2, seed);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let at = |v: f64| model
            .evaluate(&Query::new(vec![QueryTag::CdfAt(v), QueryTag::ConditionDensityAt(z)]))
            .unwrap();
        let (fl, fh) = (at(lo), at(hi));
        prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        prop_assert!(fl <= fh + 1e-15);
    }

    #[test]
    fn batch_log_density_matches_plain_contraction(
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let model = random_model(4, 3, 1, 2, 2, seed);
        let q = Query::new(x.iter().map(|&v| QueryTag::DensityAt(v)).collect());
        let plain = model.evaluate(&q).unwrap().ln();
        let logged = model.log_density(&x, &[false; 4]).unwrap();
        prop_assert!((plain - logged).abs() < 1e-10 * plain.abs().max(1.0));
    }
}
