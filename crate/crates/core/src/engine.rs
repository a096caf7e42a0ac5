//! Batched contraction in log space, with an exact reverse pass.
//!
//! Leaf vectors and every intermediate product are rescaled row-wise by their maximum and the
//! log of each scale is accumulated, so the contraction of thousands of tiny densities never
//! underflows. Because the tree is multilinear in every node output, the rescaling constants
//! drop out of the gradient of the log value and can be treated as constants in reverse mode.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{MdmaError, Result};
use crate::model::{MdmaModel, PreparedModel};
use crate::scalar::Scalar;
use crate::univariate::NetGrad;

/// What a variable contributes to a contraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeafKind {
    Cdf,
    #[default]
    Density,
    Marginal,
}

const CHUNK_ROWS: usize = 256;

/// Row-wise log of the contraction selected by `kinds`.
pub fn log_contract<T: Scalar>(
    model: &PreparedModel<T>,
    rows: ArrayView2<T>,
    kinds: ArrayView2<LeafKind>,
) -> Result<Array1<T>> {
    check_shapes(model, rows, kinds)?;
    let n = rows.nrows();
    let mut out = Array1::zeros(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let tape = forward(
            model,
            rows.slice(ndarray::s![start..end, ..]),
            kinds.slice(ndarray::s![start..end, ..]),
        );
        out.slice_mut(ndarray::s![start..end]).assign(&tape.log_value);
        start = end;
    }
    Ok(out)
}

fn check_shapes<T: Scalar>(
    model: &PreparedModel<T>,
    rows: ArrayView2<T>,
    kinds: ArrayView2<LeafKind>,
) -> Result<()> {
    if rows.ncols() != model.d() {
        return Err(MdmaError::Shape(format!(
            "data has {} columns, model has {} variables",
            rows.ncols(),
            model.d()
        )));
    }
    if kinds.dim() != rows.dim() {
        return Err(MdmaError::Shape("leaf kinds shape differs from data".into()));
    }
    Ok(())
}

struct NodeTape<T> {
    /// Rescaled elementwise product of the children.
    prod: Array2<T>,
    prod_scale: Array1<T>,
    /// Rescaled output (empty for the root).
    out: Array2<T>,
    out_scale: Array1<T>,
}

/// Recorded activations of one batched forward pass through the tree.
pub struct GradientTape<T> {
    /// Rescaled leaf vectors per leaf slot.
    leaves: Vec<Array2<T>>,
    nodes: Vec<Vec<NodeTape<T>>>,
    root_value: Array1<T>,
    pub log_value: Array1<T>,
}

fn row_rescale<T: Scalar>(a: &mut Array2<T>, acc: &mut Array1<T>) -> Array1<T> {
    let mut scales = Array1::ones(a.nrows());
    for (r, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        let mx = row.iter().copied().fold(T::zero(), T::max);
        if mx > T::zero() && mx.is_finite() {
            row.mapv_inplace(|v| v / mx);
            acc[r] += mx.ln();
            scales[r] = mx;
        }
    }
    scales
}

/// Log leaf values, one `(n × m)` block per variable. Marginal entries are left at zero.
fn leaf_logs<T: Scalar>(
    model: &PreparedModel<T>,
    rows: ArrayView2<T>,
    kinds: ArrayView2<LeafKind>,
) -> Vec<Array2<T>> {
    let n = rows.nrows();
    let m = model.m();
    (0..model.d())
        .map(|j| {
            let cols: Vec<Vec<T>> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let net = model.net(i, j);
                    let mut col = vec![T::zero(); n];
                    let xs: Vec<T> = rows.column(j).to_vec();
                    let has = |k: LeafKind| kinds.column(j).iter().any(|&v| v == k);
                    if has(LeafKind::Density) {
                        net.log_values_into(&xs, false, &mut col);
                    }
                    if has(LeafKind::Cdf) {
                        let mut c = vec![T::zero(); n];
                        net.log_values_into(&xs, true, &mut c);
                        for r in 0..n {
                            if kinds[[r, j]] == LeafKind::Cdf {
                                col[r] = c[r];
                            }
                        }
                    }
                    for r in 0..n {
                        if kinds[[r, j]] == LeafKind::Marginal {
                            col[r] = T::zero();
                        }
                    }
                    col
                })
                .collect();
            let mut block = Array2::zeros((n, m));
            for (i, col) in cols.into_iter().enumerate() {
                block.column_mut(i).assign(&Array1::from(col));
            }
            block
        })
        .collect()
}

/// Row-wise log marginal densities of several variable subsets, sharing the leaf evaluation.
pub fn log_marginal_densities<T: Scalar>(
    model: &PreparedModel<T>,
    rows: ArrayView2<T>,
    subsets: &[&[usize]],
) -> Result<Vec<Array1<T>>> {
    let (n, d) = rows.dim();
    let subset_kinds = |subset: &[usize], len: usize| {
        let mut kinds = Array2::from_elem((len, d), LeafKind::Marginal);
        for &j in subset {
            kinds.column_mut(j).fill(LeafKind::Density);
        }
        kinds
    };
    let union: Vec<usize> = (0..d)
        .filter(|j| subsets.iter().any(|s| s.contains(j)))
        .collect();
    check_shapes(model, rows, subset_kinds(&union, n).view())?;
    let mut out = vec![Array1::zeros(n); subsets.len()];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let chunk = rows.slice(ndarray::s![start..end, ..]);
        let logs = leaf_logs(model, chunk, subset_kinds(&union, end - start).view());
        for (s, subset) in subsets.iter().enumerate() {
            let kinds = subset_kinds(subset, end - start);
            let tape = contract_leaves(model, &logs, kinds.view());
            out[s].slice_mut(ndarray::s![start..end]).assign(&tape.log_value);
        }
        start = end;
    }
    Ok(out)
}

/// Forward pass over a batch, recording what the reverse pass needs.
pub fn forward<T: Scalar>(
    model: &PreparedModel<T>,
    rows: ArrayView2<T>,
    kinds: ArrayView2<LeafKind>,
) -> GradientTape<T> {
    let logs = leaf_logs(model, rows, kinds);
    contract_leaves(model, &logs, kinds)
}

fn contract_leaves<T: Scalar>(
    model: &PreparedModel<T>,
    logs: &[Array2<T>],
    kinds: ArrayView2<LeafKind>,
) -> GradientTape<T> {
    let n = kinds.nrows();
    let m = model.m();
    let ht = model.ht();
    let shape = ht.shape();
    let mut acc = Array1::<T>::zeros(n);

    let mut leaves = Vec::with_capacity(model.d());
    for &var in ht.leaf_order() {
        let mut block = logs[var].clone();
        for (r, mut row) in block.axis_iter_mut(Axis(0)).enumerate() {
            if kinds[[r, var]] == LeafKind::Marginal {
                row.fill(T::one());
                continue;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            if mx.is_finite() {
                row.mapv_inplace(|v| (v - mx).exp());
                acc[r] += mx;
            } else {
                row.mapv_inplace(|v| v.exp());
            }
        }
        leaves.push(block);
    }

    let top = shape.depth() - 1;
    let mut nodes: Vec<Vec<NodeTape<T>>> = Vec::with_capacity(shape.depth());
    let mut root_value = Array1::zeros(n);
    for (level, groups) in shape.levels().iter().enumerate() {
        let mut this_level = Vec::with_capacity(groups.len());
        for (node, children) in groups.iter().enumerate() {
            let mut prod = Array2::<T>::ones((n, m));
            for c in children.clone() {
                let child = if level == 0 {
                    &leaves[c]
                } else {
                    &nodes[level - 1][c].out
                };
                prod *= child;
            }
            let prod_scale = row_rescale(&mut prod, &mut acc);
            if level == top {
                root_value = prod.dot(ht.root());
                this_level.push(NodeTape {
                    prod,
                    prod_scale,
                    out: Array2::zeros((0, 0)),
                    out_scale: Array1::zeros(0),
                });
            } else {
                let lam = ht.levels()[level].index_axis(Axis(0), node);
                let mut out = prod.dot(&lam.t());
                let out_scale = row_rescale(&mut out, &mut acc);
                this_level.push(NodeTape {
                    prod,
                    prod_scale,
                    out,
                    out_scale,
                });
            }
        }
        nodes.push(this_level);
    }
    let log_value = root_value
        .iter()
        .zip(acc.iter())
        .map(|(&v, &a)| v.ln() + a)
        .collect();
    GradientTape {
        leaves,
        nodes,
        root_value,
        log_value,
    }
}

/// Gradient with respect to every raw parameter of an [`MdmaModel`], in declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad<T> {
    pub nets: Vec<NetGrad<T>>,
    pub levels: Vec<Array3<T>>,
    pub root: Array1<T>,
}

impl<T: Scalar> ModelGrad<T> {
    pub fn zeros_like(model: &MdmaModel<T>) -> Self {
        ModelGrad {
            nets: model.phi_bank().iter().map(NetGrad::zeros_like).collect(),
            levels: model
                .ht()
                .raw_levels()
                .iter()
                .map(|a| Array3::zeros(a.raw_dim()))
                .collect(),
            root: Array1::zeros(model.m()),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&[T])) {
        for g in &self.nets {
            g.for_each(&mut f);
        }
        for a in &self.levels {
            f(a.as_slice().expect("standard layout"));
        }
        f(self.root.as_slice().expect("standard layout"));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for g in &mut self.nets {
            g.for_each_mut(&mut f);
        }
        for a in &mut self.levels {
            f(a.as_slice_mut().expect("standard layout"));
        }
        f(self.root.as_slice_mut().expect("standard layout"));
    }

    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.for_each(|s| out.extend_from_slice(s));
        out
    }
}

/// Reverse pass for upstream gradients `g_log` on the per-row log values. Returns gradients
/// with respect to the raw parameters of `model`.
pub fn backward<T: Scalar>(
    model: &MdmaModel<T>,
    prepared: &PreparedModel<T>,
    rows: ArrayView2<T>,
    kinds: ArrayView2<LeafKind>,
    tape: &GradientTape<T>,
    g_log: &Array1<T>,
) -> ModelGrad<T> {
    let n = rows.nrows();
    let m = model.m();
    let ht = prepared.ht();
    let shape = ht.shape();
    let top = shape.depth() - 1;

    let mut g_levels: Vec<Array3<T>> = ht
        .levels()
        .iter()
        .map(|a| Array3::zeros(a.raw_dim()))
        .collect();
    let mut g_root = Array1::<T>::zeros(m);

    // gradient on each node's rescaled output; the root's is a per-row scalar
    let g_root_value: Array1<T> = g_log
        .iter()
        .zip(tape.root_value.iter())
        .map(|(&g, &v)| if v > T::zero() { g / v } else { T::zero() })
        .collect();
    let mut g_out: Vec<Vec<Array2<T>>> = shape
        .levels()
        .iter()
        .map(|nodes| nodes.iter().map(|_| Array2::zeros((0, 0))).collect())
        .collect();
    let mut g_leaves: Vec<Array2<T>> = vec![Array2::zeros((n, m)); shape.d()];

    for level in (0..=top).rev() {
        for (node, children) in shape.levels()[level].iter().enumerate() {
            let nt = &tape.nodes[level][node];
            let mut g_prod = if level == top {
                g_root += &nt.prod.t().dot(&g_root_value);
                let col = g_root_value.view().insert_axis(Axis(1));
                let lam = ht.root().view().insert_axis(Axis(0));
                &col * &lam
            } else {
                let mut g_u = std::mem::replace(&mut g_out[level][node], Array2::zeros((0, 0)));
                for (mut row, &s) in g_u.axis_iter_mut(Axis(0)).zip(nt.out_scale.iter()) {
                    row.mapv_inplace(|v| v / s);
                }
                let mut gl = g_levels[level].index_axis_mut(Axis(0), node);
                gl += &g_u.t().dot(&nt.prod);
                let lam = ht.levels()[level].index_axis(Axis(0), node);
                g_u.dot(&lam)
            };
            for (mut row, &s) in g_prod.axis_iter_mut(Axis(0)).zip(nt.prod_scale.iter()) {
                row.mapv_inplace(|v| v / s);
            }
            let child_value = |c: usize| -> &Array2<T> {
                if level == 0 {
                    &tape.leaves[c]
                } else {
                    &tape.nodes[level - 1][c].out
                }
            };
            for c in children.clone() {
                let mut g = g_prod.clone();
                for other in children.clone().filter(|&o| o != c) {
                    g *= child_value(other);
                }
                if level == 0 {
                    g_leaves[c] = g;
                } else {
                    g_out[level - 1][c] = g;
                }
            }
        }
    }

    // gradient on log leaf values: d/d(log φ) = d/d(scaled leaf) * scaled leaf
    let mut g_log_leaf: Vec<Array2<T>> = vec![Array2::zeros((0, 0)); shape.d()];
    for (slot, &var) in ht.leaf_order().iter().enumerate() {
        let g = &g_leaves[slot] * &tape.leaves[slot];
        g_log_leaf[var] = g;
    }

    let nets: Vec<NetGrad<T>> = (0..model.d() * m)
        .into_par_iter()
        .map(|idx| {
            let j = idx / m;
            let i = idx % m;
            let raw = model.net(i, j);
            let eff = prepared.net(i, j);
            let mut grad = NetGrad::zeros_like(raw);
            for (kind, cdf) in [(LeafKind::Density, false), (LeafKind::Cdf, true)] {
                let (xs, ups): (Vec<T>, Vec<T>) = (0..n)
                    .filter(|&r| kinds[[r, j]] == kind)
                    .map(|r| (rows[[r, j]], g_log_leaf[j][[r, i]]))
                    .unzip();
                if !xs.is_empty() {
                    eff.log_values_backward(&xs, cdf, &ups, &mut grad);
                }
            }
            raw.raw_gradient(eff, &mut grad);
            grad
        })
        .collect();

    model.ht().raw_gradient(ht, &mut g_levels, &mut g_root);
    ModelGrad {
        nets,
        levels: g_levels,
        root: g_root,
    }
}
