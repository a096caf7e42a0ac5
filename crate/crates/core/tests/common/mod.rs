#![allow(dead_code)]

use mdma::{init_model, loss_and_grad, Mdma};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Randomly initialized model with every raw parameter perturbed, so that mixing weights are
/// far from the identity initialization.
pub fn random_model(d: usize, m: usize, l: usize, r: usize, pool: usize, seed: u64) -> Mdma {
    let mut model = init_model::<f64>(d, m, l, r, pool, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut p = model.params_flat();
    for v in &mut p {
        let e: f64 = rng.sample(StandardNormal);
        *v += 0.5 * e;
    }
    model.set_params_flat(&p).unwrap();
    model
}

pub fn normal_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Composite Simpson weights for `n` (odd) equally spaced nodes on `[a, b]`.
pub fn simpson(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n % 2 == 1 && n >= 3);
    let h = (b - a) / (n - 1) as f64;
    let xs = (0..n).map(|i| a + i as f64 * h).collect();
    let ws = (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect();
    (xs, ws)
}

/// Every assignment of components to internal nodes with its probability, computed by
/// recursive enumeration over the tree: `(nodes[level][node], probability)`.
pub fn enumerate_paths(ht: &mdma::EffectiveHt<f64>) -> Vec<(Vec<Vec<usize>>, f64)> {
    let levels = ht.shape().levels();
    let top = levels.len() - 1;
    let m = ht.m();
    let order: Vec<(usize, usize)> = (0..=top)
        .rev()
        .flat_map(|l| (0..levels[l].len()).map(move |n| (l, n)))
        .collect();
    let parent_of = |level: usize, node: usize| -> usize {
        levels[level + 1]
            .iter()
            .position(|r| r.contains(&node))
            .unwrap()
    };
    let mut out = Vec::new();
    let mut choice: Vec<Vec<usize>> = levels.iter().map(|l| vec![0; l.len()]).collect();
    let total = m.pow(order.len() as u32);
    for code in 0..total {
        let mut c = code;
        for &(l, n) in &order {
            choice[l][n] = c % m;
            c /= m;
        }
        let mut p = ht.root()[choice[top][0]];
        for &(l, n) in &order[1..] {
            let k = choice[l + 1][parent_of(l, n)];
            p *= ht.levels()[l][[n, k, choice[l][n]]];
        }
        out.push((choice.clone(), p));
    }
    out
}

/// Component index per variable implied by a node assignment.
pub fn leaf_components(ht: &mdma::EffectiveHt<f64>, nodes: &[Vec<usize>]) -> Vec<usize> {
    let mut leaves = vec![0; ht.shape().d()];
    for (n, range) in ht.shape().levels()[0].iter().enumerate() {
        for s in range.clone() {
            leaves[ht.leaf_order()[s]] = nodes[0][n];
        }
    }
    leaves
}

/// Dense coefficient tensor `A` (row-major over `(i_1, …, i_d)`) from path enumeration.
pub fn dense_coefficients(ht: &mdma::EffectiveHt<f64>) -> Vec<f64> {
    let m = ht.m();
    let d = ht.shape().d();
    let mut a = vec![0.0; m.pow(d as u32)];
    for (nodes, p) in enumerate_paths(ht) {
        let idx = leaf_components(ht, &nodes)
            .iter()
            .fold(0, |acc, &i| acc * m + i);
        a[idx] += p;
    }
    a
}

/// `Σ_{i_1..i_d} A_{i_1..i_d} Π_j f_j[i_j]` by explicit enumeration.
pub fn brute_force_contract(a: &[f64], factors: &[Vec<f64>], m: usize) -> f64 {
    let d = factors.len();
    let mut total = 0.0;
    for (code, &coef) in a.iter().enumerate() {
        let mut c = code;
        let mut prod = coef;
        for j in (0..d).rev() {
            prod *= factors[j][c % m];
            c /= m;
        }
        total += prod;
    }
    total
}

/// Like [`random_model`] but with every effective weight in `[0.7, 1.3]`, so the univariate
/// CDFs have logistic-scale tails and quadrature on a modest window is accurate.
pub fn tame_model(d: usize, m: usize, l: usize, r: usize, pool: usize, seed: u64) -> Mdma {
    let mut model = random_model(d, m, l, r, pool, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a3e);
    for j in 0..d {
        for i in 0..m {
            for layer in model.net_mut(i, j).layers_mut() {
                for w in &mut layer.raw_weights {
                    *w = mdma::scalar::softplus_inverse(rng.random_range(0.7..1.3), 10.0);
                }
            }
        }
    }
    model
}

/// Largest relative gap between the analytic gradient and central finite differences,
/// with the parameter index where it occurs.
pub fn worst_gradient_error(
    model: &Mdma,
    rows: ArrayView2<f64>,
    mask: Option<ArrayView2<bool>>,
) -> (usize, f64) {
    let nll = |m: &Mdma| loss_and_grad(m, rows, mask).unwrap().0;
    let (_, grad) = loss_and_grad(model, rows, mask).unwrap();
    let analytic = grad.flat();
    let base = model.params_flat();
    assert_eq!(analytic.len(), base.len());
    let mut probe = model.clone();
    let mut worst = (0, 0.0);
    for (k, &g) in analytic.iter().enumerate() {
        let h = 1e-5 * base[k].abs().max(1.0);
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params_flat(&p).unwrap();
        let up = nll(&probe);
        p[k] = base[k] - h;
        probe.set_params_flat(&p).unwrap();
        let down = nll(&probe);
        let fd = (up - down) / (2.0 * h);
        let err = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-3);
        if err > worst.1 {
            worst = (k, err);
        }
    }
    worst
}
