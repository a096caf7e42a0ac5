mod common;

use common::{normal_rows, random_model};
use mdma::training::mean_nll;
use mdma::{adaptive_coupling, fit, init_model, loss_and_grad, Dataset, FitStatus, MdmaError, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn initialization_is_seeded_and_near_identity() {
    let a = init_model::<f64>(4, 3, 2, 3, 2, 7).unwrap();
    let b = init_model::<f64>(4, 3, 2, 3, 2, 7).unwrap();
    let c = init_model::<f64>(4, 3, 2, 3, 2, 8).unwrap();
    assert_eq!(a.params_flat(), b.params_flat());
    assert_ne!(a.params_flat(), c.params_flat());
    let eff = a.ht().effective();
    for level in eff.levels() {
        for node in level.outer_iter() {
            for i in 0..3 {
                assert!(node[[i, i]] > 0.95);
            }
        }
    }
    assert!((eff.root().sum() - 1.0).abs() < 1e-12);
}

#[test]
fn coupling_pairs_the_most_correlated_variables() {
    let z = normal_rows(2000, 4, 1);
    let noise = normal_rows(2000, 4, 2);
    // columns 0,2 share one latent, 1,3 another
    let mut x = Array2::zeros((2000, 4));
    for r in 0..2000 {
        x[[r, 0]] = z[[r, 0]] + 0.3 * noise[[r, 0]];
        x[[r, 2]] = z[[r, 0]] + 0.3 * noise[[r, 2]];
        x[[r, 1]] = z[[r, 1]] + 0.3 * noise[[r, 1]];
        x[[r, 3]] = z[[r, 1]] + 0.3 * noise[[r, 3]];
    }
    let order = adaptive_coupling(x.view(), None, 2).unwrap();
    let mut pairs = vec![[order[0], order[1]], [order[2], order[3]]];
    pairs.iter_mut().for_each(|p| p.sort());
    pairs.sort();
    assert_eq!(pairs, vec![[0, 2], [1, 3]]);
}

#[test]
fn coupling_is_always_a_permutation() {
    for d in 1..=9 {
        for pool in 2..=4 {
            let x = normal_rows(50, d, d as u64);
            let mut order = adaptive_coupling(x.view(), None, pool).unwrap();
            order.sort();
            assert_eq!(order, (0..d).collect::<Vec<_>>());
        }
    }
}

#[test]
fn coupling_order_is_consistent_with_the_tree_layout() {
    // five variables, pool 2: the undersized group must stay in the last slot
    let z = normal_rows(3000, 5, 3);
    let mut x = z.clone();
    x.column_mut(4).assign(&(&z.column(0) + &(0.1 * &z.column(4))));
    let order = adaptive_coupling(x.view(), None, 2).unwrap();
    let pos = |v: usize| order.iter().position(|&o| o == v).unwrap();
    assert_eq!(pos(0) / 2, pos(4) / 2, "{order:?}");
}

#[test]
fn coupling_needs_two_complete_rows() {
    let x = normal_rows(3, 2, 0);
    let mut mask = Array2::from_elem((3, 2), false);
    mask[[0, 0]] = true;
    mask[[1, 1]] = true;
    assert_eq!(
        adaptive_coupling(x.view(), Some(mask.view()), 2),
        Err(MdmaError::InsufficientCouplingData)
    );
}

#[test]
fn constant_column_does_not_break_coupling() {
    let mut x = normal_rows(100, 3, 0);
    x.column_mut(1).fill(2.0);
    let order = adaptive_coupling(x.view(), None, 2).unwrap();
    assert_eq!(order.len(), 3);
}

#[test]
fn fully_observed_mask_equals_unmasked_loss() {
    let model = random_model(3, 2, 1, 2, 2, 3);
    let rows = normal_rows(20, 3, 4);
    let mask = Array2::from_elem((20, 3), false);
    let (a, ga) = loss_and_grad(&model, rows.view(), None).unwrap();
    let (b, gb) = loss_and_grad(&model, rows.view(), Some(mask.view())).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga.flat(), gb.flat());
}

#[test]
fn non_finite_loss_reports_the_row() {
    let mut model = random_model(2, 2, 1, 1, 2, 3);
    let mut p = model.params_flat();
    p[0] = f64::NAN;
    model.set_params_flat(&p).unwrap();
    let rows = normal_rows(4, 2, 4);
    match loss_and_grad(&model, rows.view(), None) {
        Err(MdmaError::NonFiniteLoss { row }) => assert_eq!(row, 0),
        other => panic!("unexpected {other:?}"),
    }
}

fn correlated(n: usize, seed: u64) -> Array2<f64> {
    let z = normal_rows(n, 2, seed);
    let mut x = z.clone();
    x.column_mut(1).assign(&(&z.column(0) * 0.8 + &z.column(1) * 0.6));
    x
}

#[test]
fn fit_lowers_the_likelihood_and_is_reproducible() {
    let data = Dataset::complete(correlated(2000, 1)).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 200,
        learning_rate: 0.02,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = init_model::<f64>(2, 4, 2, 3, 2, 1).unwrap();
    let out = fit(model.clone(), &data, &cfg).unwrap();
    assert_eq!(out.status, FitStatus::Completed);
    assert_eq!(out.trace.len(), 9);
    let first = out.trace[0].validation_nll.unwrap();
    let best = out.trace[out.best_epoch].validation_nll.unwrap();
    assert!(best < first - 0.3, "{:?}", out.trace);
    // the returned model is the best-validation snapshot
    assert!(out.trace.iter().all(|e| e.validation_nll.unwrap() >= best));
    let again = fit(model, &data, &cfg).unwrap();
    assert_eq!(out.model.params_flat(), again.model.params_flat());
    assert_eq!(out.trace, again.trace);
}

#[test]
fn fit_with_missing_values_uses_marginal_likelihood() {
    let full = Dataset::complete(correlated(1000, 2)).unwrap();
    let data = full.with_mcar(0.3, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(data.has_missing());
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 100,
        ..TrainConfig::default()
    };
    let out = fit(init_model::<f64>(2, 3, 1, 2, 2, 0).unwrap(), &data, &cfg).unwrap();
    assert!(out.trace.iter().all(|e| e.train_nll.is_finite()));
    let no_mask = TrainConfig {
        use_mask: false,
        ..cfg
    };
    assert!(matches!(
        fit(init_model::<f64>(2, 3, 1, 2, 2, 0).unwrap(), &data, &no_mask),
        Err(MdmaError::InvalidConfig(_))
    ));
}

#[test]
fn single_precision_training_runs() {
    let data = Dataset::complete(correlated(500, 5)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 100,
        ..TrainConfig::default()
    };
    let out = fit(init_model::<f32>(2, 3, 1, 2, 2, 0).unwrap(), &data, &cfg).unwrap();
    let last = out.trace.last().unwrap();
    assert!(last.train_nll < out.trace[0].train_nll);
    assert!(mean_nll(&out.model, &data, true).unwrap().is_finite());
}

#[test]
fn config_validation() {
    let data = Dataset::complete(normal_rows(10, 2, 0)).unwrap();
    let model = init_model::<f64>(2, 2, 1, 1, 2, 0).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(fit(model.clone(), &data, &cfg).is_err());
    }
    let wrong = Dataset::complete(normal_rows(10, 3, 0)).unwrap();
    assert!(fit(model, &wrong, &TrainConfig::default()).is_err());
}
