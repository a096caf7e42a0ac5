//! Diagonal hierarchical Tucker combinator.
//!
//! Leaves hold one length-`m` factor vector per variable. Each internal node multiplies its
//! children elementwise and maps the product through a row-stochastic `m × m` matrix
//! (`out_i = Σ_k λ_{i,k} prod_k`); the root contracts the product with a probability vector.
//! Every internal node, including single-child pass-through nodes, therefore preserves the
//! all-ones vector, so the implicit coefficient tensor is nonnegative and sums to one.

use std::ops::Range;

use ndarray::{Array1, Array3};

use crate::error::{MdmaError, Result};
use crate::scalar::{softplus, softplus_grad, Scalar};

/// Sharpness of the softplus applied to raw mixing weights.
pub const LAMBDA_BETA: f64 = 20.0;

/// Node layout of the tree. `levels[0]` groups leaf slots; `levels[ℓ]` groups the nodes of
/// `levels[ℓ - 1]`; the last level is the single root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeShape {
    d: usize,
    pool_size: usize,
    levels: Vec<Vec<Range<usize>>>,
}

/// Bottom-up grouping of consecutive blocks of `pool_size` children per node.
///
/// `d = 1` yields a single root with one child.
pub fn build_tree(d: usize, pool_size: usize) -> Result<TreeShape> {
    if d == 0 {
        return Err(MdmaError::InvalidConfig("dimension must be positive".into()));
    }
    if pool_size < 2 {
        return Err(MdmaError::InvalidConfig("pool size must be at least 2".into()));
    }
    let mut levels = Vec::new();
    let mut count = d;
    loop {
        let nodes: Vec<Range<usize>> = (0..count.div_ceil(pool_size))
            .map(|n| n * pool_size..((n + 1) * pool_size).min(count))
            .collect();
        count = nodes.len();
        levels.push(nodes);
        if count == 1 {
            break;
        }
    }
    Ok(TreeShape {
        d,
        pool_size,
        levels,
    })
}

impl TreeShape {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// Number of levels `p`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn internal_node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Children of node `node` on level `level`, as indices into the level below
    /// (leaf slots for level 0).
    pub fn children(&self, level: usize, node: usize) -> Range<usize> {
        self.levels[level][node].clone()
    }

    pub fn levels(&self) -> &[Vec<Range<usize>>] {
        &self.levels
    }
}

/// Raw (unconstrained) mixing parameters on a [`TreeShape`].
#[derive(Debug, Clone, PartialEq)]
pub struct HtTensor<T> {
    m: usize,
    shape: TreeShape,
    /// One array per non-root level, shaped `(nodes, m, m)` and indexed `[node, i, k]` where
    /// `i` is the component requested by the parent and `k` the component passed to children.
    raw_levels: Vec<Array3<T>>,
    raw_root: Array1<T>,
    leaf_order: Vec<usize>,
}

impl<T: Scalar> HtTensor<T> {
    /// Zero raw parameters (uniform mixing) with the identity leaf order.
    pub fn zeros(d: usize, m: usize, pool_size: usize) -> Result<Self> {
        if m == 0 {
            return Err(MdmaError::InvalidConfig("m must be positive".into()));
        }
        let shape = build_tree(d, pool_size)?;
        let counts = shape.node_counts();
        let raw_levels = counts[..counts.len() - 1]
            .iter()
            .map(|&n| Array3::zeros((n, m, m)))
            .collect();
        Ok(HtTensor {
            m,
            shape,
            raw_levels,
            raw_root: Array1::zeros(m),
            leaf_order: (0..d).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.shape.d
    }

    pub fn pool_size(&self) -> usize {
        self.shape.pool_size
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    pub fn set_leaf_order(&mut self, order: Vec<usize>) -> Result<()> {
        if !is_permutation(&order, self.d()) {
            return Err(MdmaError::Shape(format!(
                "leaf order {order:?} is not a permutation of 0..{}",
                self.d()
            )));
        }
        self.leaf_order = order;
        Ok(())
    }

    pub fn raw_levels(&self) -> &[Array3<T>] {
        &self.raw_levels
    }

    pub fn raw_levels_mut(&mut self) -> &mut [Array3<T>] {
        &mut self.raw_levels
    }

    pub fn raw_root(&self) -> &Array1<T> {
        &self.raw_root
    }

    pub fn raw_root_mut(&mut self) -> &mut Array1<T> {
        &mut self.raw_root
    }

    pub fn param_count(&self) -> usize {
        self.raw_levels.iter().map(|a| a.len()).sum::<usize>() + self.raw_root.len()
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for a in &mut self.raw_levels {
            f(a.as_slice_mut().expect("standard layout"));
        }
        f(self.raw_root.as_slice_mut().expect("standard layout"));
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&[T])) {
        for a in &self.raw_levels {
            f(a.as_slice().expect("standard layout"));
        }
        f(self.raw_root.as_slice().expect("standard layout"));
    }

    /// Softplus followed by normalization of every row (and of the root vector).
    pub fn effective(&self) -> EffectiveHt<T> {
        let beta = T::c(LAMBDA_BETA);
        let m = self.m;
        let levels = self
            .raw_levels
            .iter()
            .map(|raw| {
                let mut lam = raw.mapv(|v| softplus(v, beta));
                for mut node in lam.outer_iter_mut() {
                    for mut row in node.outer_iter_mut() {
                        let s: T = row.iter().copied().sum();
                        row.mapv_inplace(|v| v / s);
                    }
                }
                lam
            })
            .collect();
        let mut root = self.raw_root.mapv(|v| softplus(v, beta));
        let s: T = root.iter().copied().sum();
        root.mapv_inplace(|v| v / s);
        debug_assert_eq!(root.len(), m);
        EffectiveHt {
            m,
            shape: self.shape.clone(),
            levels,
            root,
            leaf_order: self.leaf_order.clone(),
        }
    }

    /// Converts gradients on the effective (normalized) weights into gradients on the raw
    /// parameters, in place.
    pub fn raw_gradient(&self, eff: &EffectiveHt<T>, levels: &mut [Array3<T>], root: &mut Array1<T>) {
        let beta = T::c(LAMBDA_BETA);
        for ((raw, lam), g) in self.raw_levels.iter().zip(&eff.levels).zip(levels.iter_mut()) {
            for node in 0..raw.shape()[0] {
                for i in 0..self.m {
                    let mut row_sum = T::zero();
                    let mut dot = T::zero();
                    for k in 0..self.m {
                        row_sum += softplus(raw[[node, i, k]], beta);
                        dot += g[[node, i, k]] * lam[[node, i, k]];
                    }
                    for k in 0..self.m {
                        let gs = (g[[node, i, k]] - dot) / row_sum;
                        g[[node, i, k]] = gs * softplus_grad(raw[[node, i, k]], beta);
                    }
                }
            }
        }
        let mut total = T::zero();
        let mut dot = T::zero();
        for k in 0..self.m {
            total += softplus(self.raw_root[k], beta);
            dot += root[k] * eff.root[k];
        }
        for k in 0..self.m {
            root[k] = (root[k] - dot) / total * softplus_grad(self.raw_root[k], beta);
        }
    }
}

pub(crate) fn is_permutation(order: &[usize], d: usize) -> bool {
    if order.len() != d {
        return false;
    }
    let mut seen = vec![false; d];
    for &v in order {
        if v >= d || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

/// Normalized mixing weights.
#[derive(Debug, Clone)]
pub struct EffectiveHt<T> {
    m: usize,
    shape: TreeShape,
    levels: Vec<Array3<T>>,
    root: Array1<T>,
    leaf_order: Vec<usize>,
}

impl<T: Scalar> EffectiveHt<T> {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    /// Row-stochastic matrices of the non-root levels, indexed `[node, i, k]`.
    pub fn levels(&self) -> &[Array3<T>] {
        &self.levels
    }

    pub fn root(&self) -> &Array1<T> {
        &self.root
    }

    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    /// Full contraction of one factor vector per variable (indexed by variable, not by leaf
    /// slot). Costs `O(d m²)`.
    pub fn contract(&self, factors: &[Vec<T>]) -> Result<T> {
        let d = self.shape.d;
        if factors.len() != d {
            return Err(MdmaError::Shape(format!(
                "expected {d} factor vectors, got {}",
                factors.len()
            )));
        }
        if let Some(j) = factors.iter().position(|f| f.len() != self.m) {
            return Err(MdmaError::Shape(format!(
                "factor vector {j} has length {}, expected {}",
                factors[j].len(),
                self.m
            )));
        }
        let m = self.m;
        let mut below: Vec<Vec<T>> = self
            .leaf_order
            .iter()
            .map(|&var| factors[var].clone())
            .collect();
        let top = self.shape.depth() - 1;
        for (level, nodes) in self.shape.levels.iter().enumerate() {
            let mut above = Vec::with_capacity(nodes.len());
            for (node, children) in nodes.iter().enumerate() {
                let mut prod = vec![T::one(); m];
                for c in children.clone() {
                    for (p, v) in prod.iter_mut().zip(&below[c]) {
                        *p *= *v;
                    }
                }
                if level == top {
                    let value = prod
                        .iter()
                        .zip(self.root.iter())
                        .fold(T::zero(), |acc, (p, l)| acc + *p * *l);
                    return Ok(value);
                }
                let lam = &self.levels[level];
                let out = (0..m)
                    .map(|i| (0..m).fold(T::zero(), |acc, k| acc + lam[[node, i, k]] * prod[k]))
                    .collect();
                above.push(out);
            }
            below = above;
        }
        unreachable!("tree always ends in a root level")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_shapes() {
        assert_eq!(build_tree(4, 2).unwrap().node_counts(), vec![2, 1]);
        assert_eq!(build_tree(4, 2).unwrap().depth(), 2);
        assert_eq!(build_tree(5, 2).unwrap().node_counts(), vec![3, 2, 1]);
        let t8 = build_tree(8, 2).unwrap();
        assert_eq!(t8.node_counts(), vec![4, 2, 1]);
        assert_eq!(t8.internal_node_count(), 7);
        assert_eq!(build_tree(2, 2).unwrap().node_counts(), vec![1]);
        assert_eq!(build_tree(1, 2).unwrap().node_counts(), vec![1]);
        assert_eq!(build_tree(7, 3).unwrap().node_counts(), vec![3, 1]);
    }

    #[test]
    fn odd_tree_has_pass_through_nodes() {
        let t = build_tree(5, 2).unwrap();
        assert_eq!(t.children(0, 2), 4..5);
        assert_eq!(t.children(1, 1), 2..3);
        assert_eq!(t.children(2, 0), 0..2);
    }

    #[test]
    fn build_tree_rejects_bad_pool() {
        assert!(build_tree(4, 1).is_err());
        assert!(build_tree(0, 2).is_err());
    }

    #[test]
    fn effective_rows_are_normalized() {
        let mut ht = HtTensor::<f64>::zeros(5, 3, 2).unwrap();
        let mut v: f64 = 0.1;
        ht.for_each_param_mut(|s| {
            for x in s {
                *x = v.sin();
                v += 0.37;
            }
        });
        let eff = ht.effective();
        for lam in eff.levels() {
            for node in lam.outer_iter() {
                for row in node.outer_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-14);
                    assert!(row.iter().all(|&x| x > 0.0));
                }
            }
        }
        assert!((eff.root().sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn contract_all_ones_is_one() {
        let ht = HtTensor::<f64>::zeros(7, 4, 2).unwrap().effective();
        let ones = vec![vec![1.0; 4]; 7];
        assert!((ht.contract(&ones).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contract_rejects_wrong_lengths() {
        let ht = HtTensor::<f64>::zeros(3, 2, 2).unwrap().effective();
        assert!(matches!(
            ht.contract(&[vec![1.0; 2], vec![1.0; 3], vec![1.0; 2]]),
            Err(MdmaError::Shape(_))
        ));
        assert!(matches!(ht.contract(&[vec![1.0; 2]]), Err(MdmaError::Shape(_))));
    }

    #[test]
    fn leaf_order_must_be_permutation() {
        let mut ht = HtTensor::<f64>::zeros(3, 2, 2).unwrap();
        assert!(ht.set_leaf_order(vec![0, 0, 1]).is_err());
        assert!(ht.set_leaf_order(vec![2, 0, 1]).is_ok());
    }
}
