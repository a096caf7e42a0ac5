//! Exact sampling: a categorical descent of the mixing tree followed by independent
//! univariate inversions, and a slower autoregressive sampler used as a reference.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MdmaError, Result};
use crate::ht::EffectiveHt;
use crate::model::{MdmaModel, PreparedModel};
use crate::scalar::Scalar;
use crate::univariate::invert_monotone;

/// Default inversion tolerance in CDF space.
pub const DEFAULT_INV_TOL: f64 = 1e-9;

/// Mixture component selected by one descent of the tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentPath {
    /// `nodes[ℓ][n]`: component chosen at node `n` of level `ℓ` (the last level is the root).
    pub nodes: Vec<Vec<usize>>,
    /// Component used for each variable, indexed by variable.
    pub leaves: Vec<usize>,
}

impl ComponentPath {
    /// Number of categorical draws taken, one per internal node.
    pub fn draws(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }
}

fn categorical<T: Scalar, R: Rng + ?Sized>(weights: impl Iterator<Item = T>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        let w = w.f64();
        if w > 0.0 {
            last = k;
        }
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding left the cumulative sum just below one
    last
}

/// Top-down descent: the root draws from its mixing vector, every other node from the row of
/// its matrix selected by its parent's choice.
pub fn sample_component<T: Scalar, R: Rng + ?Sized>(ht: &EffectiveHt<T>, rng: &mut R) -> ComponentPath {
    let shape = ht.shape();
    let levels = shape.levels();
    let top = levels.len() - 1;
    let mut nodes: Vec<Vec<usize>> = levels.iter().map(|l| vec![0; l.len()]).collect();
    nodes[top][0] = categorical(ht.root().iter().copied(), rng);
    for level in (0..top).rev() {
        let lam = &ht.levels()[level];
        for parent in 0..levels[level + 1].len() {
            let k = nodes[level + 1][parent];
            for node in levels[level + 1][parent].clone() {
                nodes[level][node] =
                    categorical(lam.slice(ndarray::s![node, k, ..]).iter().copied(), rng);
            }
        }
    }
    let mut leaves = vec![0; shape.d()];
    for (node, range) in levels[0].iter().enumerate() {
        for slot in range.clone() {
            leaves[ht.leaf_order()[slot]] = nodes[0][node];
        }
    }
    ComponentPath { nodes, leaves }
}

fn sample_stream(root: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index as u64);
    rng
}

fn check_tol<T: Scalar>(n: usize, inv_tol: T) -> Result<()> {
    if n == 0 {
        return Err(MdmaError::InvalidConfig("sample count must be positive".into()));
    }
    if !(inv_tol > T::zero()) {
        return Err(MdmaError::InvalidConfig("inversion tolerance must be positive".into()));
    }
    Ok(())
}

/// `n` independent draws. One seed is taken from `rng`; sample `s` then uses its own stream,
/// so the output does not depend on the thread count.
pub fn sample<T: Scalar, R: RngCore + ?Sized>(
    model: &MdmaModel<T>,
    n: usize,
    rng: &mut R,
    inv_tol: T,
) -> Result<Array2<T>> {
    check_tol(n, inv_tol)?;
    let prepared = model.prepare();
    let root = rng.next_u64();
    let d = model.d();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_stream(root, s);
            let path = sample_component(prepared.ht(), &mut rng);
            let u: Vec<f64> = (0..d).map(|_| open_unit(&mut rng)).collect();
            (0..d)
                .map(|j| prepared.net(path.leaves[j], j).inverse(T::c(u[j]), inv_tol))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    Ok(to_matrix(rows, d))
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn to_matrix<T: Scalar>(rows: Vec<Vec<T>>, d: usize) -> Array2<T> {
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular")
}

/// Sequential inversion of `F(x_1)`, `F(x_2 | x_1)`, … with the conditional CDFs taken from the
/// model. Much slower than [`sample`]; intended as a reference.
pub fn sample_autoregressive<T: Scalar, R: RngCore + ?Sized>(
    model: &MdmaModel<T>,
    n: usize,
    rng: &mut R,
    inv_tol: T,
) -> Result<Array2<T>> {
    check_tol(n, inv_tol)?;
    let prepared = model.prepare();
    let root = rng.next_u64();
    let d = model.d();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_stream(root, s);
            let mut x = Vec::with_capacity(d);
            for j in 0..d {
                let u = T::c(open_unit(&mut rng));
                let weights = conditional_weights(&prepared, &x, j)?;
                let xj = invert_monotone(u, inv_tol, |t| {
                    weights
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| w * prepared.net(k, j).cdf_unchecked(t))
                        .sum::<T>()
                })?;
                x.push(xj);
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    Ok(to_matrix(rows, d))
}

/// Mixture weights `w` with `F(x_j | x_<j) = Σ_k w_k φ_{k,j}(x_j)`: the contraction is linear in
/// the factor of variable `j`, so `w_k` is the contraction with the `k`-th unit vector there,
/// normalized.
fn conditional_weights<T: Scalar>(prepared: &PreparedModel<T>, prefix: &[T], j: usize) -> Result<Vec<T>> {
    let m = prepared.m();
    let d = prepared.d();
    let mut factors: Vec<Vec<T>> = Vec::with_capacity(d);
    for (i, &x) in prefix.iter().enumerate() {
        let mut f = prepared.density_vector(i, x);
        // the ratio is invariant to rescaling a conditioning factor
        let top = f.iter().copied().fold(T::zero(), T::max);
        if top > T::zero() {
            f.iter_mut().for_each(|v| *v /= top);
        }
        factors.push(f);
    }
    factors.push(vec![T::zero(); m]);
    factors.extend((j + 1..d).map(|_| vec![T::one(); m]));
    let mut weights = Vec::with_capacity(m);
    for k in 0..m {
        factors[j][k] = T::one();
        weights.push(prepared.ht().contract(&factors)?);
        factors[j][k] = T::zero();
    }
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(MdmaError::ZeroDensityCondition);
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}
