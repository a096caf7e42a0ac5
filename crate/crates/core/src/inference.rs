//! Procedures built on exact marginals and conditionals: mutual information, a
//! conditional-independence test, anomaly scores, and the non-marginalizable nMDMA variant.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};

use crate::engine::log_marginal_densities;
use crate::error::{MdmaError, Result};
use crate::model::MdmaModel;
use crate::sampler;
use crate::scalar::{softplus, softplus_grad, Scalar};
use crate::stats::kendall_tau;
use crate::univariate::{NetGrad, UnivariateCdfNet};

fn check_subsets(d: usize, y: &[usize], z: &[usize]) -> Result<()> {
    if y.is_empty() || z.is_empty() {
        return Err(MdmaError::InvalidSubsets("subsets must be nonempty".into()));
    }
    let mut seen = vec![false; d];
    for &v in y.iter().chain(z) {
        if v >= d {
            return Err(MdmaError::InvalidSubsets(format!("index {v} out of range")));
        }
        if seen[v] {
            return Err(MdmaError::InvalidSubsets(format!("index {v} repeated or shared")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Monte-Carlo estimate of `I(Y; Z)` from the model's marginal densities at the given points.
pub fn estimate_mi<T: Scalar>(
    model: &MdmaModel<T>,
    data: ArrayView2<T>,
    y: &[usize],
    z: &[usize],
) -> Result<f64> {
    let (n, d) = data.dim();
    if d != model.d() {
        return Err(MdmaError::Shape(format!("data has {d} columns, model has {}", model.d())));
    }
    check_subsets(d, y, z)?;
    if n == 0 {
        return Err(MdmaError::InvalidConfig("no evaluation points".into()));
    }
    let prepared = model.prepare();
    let joint: Vec<usize> = y.iter().chain(z).copied().collect();
    let logs = log_marginal_densities(&prepared, data, &[&joint, y, z])?;
    let (lj, ly, lz) = (&logs[0], &logs[1], &logs[2]);
    let total: f64 = (0..n)
        .map(|r| lj[r].f64() - (ly[r].f64() + lz[r].f64()))
        .sum();
    Ok(total / n as f64)
}

/// [`estimate_mi`] evaluated at `n` points drawn from the model itself.
pub fn estimate_mi_sampled<T: Scalar, R: RngCore + ?Sized>(
    model: &MdmaModel<T>,
    n: usize,
    rng: &mut R,
    y: &[usize],
    z: &[usize],
) -> Result<f64> {
    check_subsets(model.d(), y, z)?;
    let points = sampler::sample(model, n, rng, T::c(sampler::DEFAULT_INV_TOL))?;
    estimate_mi(model, points.view(), y, z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiTestResult {
    /// Kendall's tau between the two conditional CDF transforms.
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    /// Rows `(F(x_i | x_cond), F(x_j | x_cond))` that survived conditioning.
    pub u1_u2: Array2<f64>,
    /// Rows discarded because the conditioning density underflowed.
    pub dropped: usize,
}

/// Largest fraction of rows that may be dropped for underflowing conditioning.
pub const MAX_DROPPED_FRACTION: f64 = 0.1;

/// Tests `X_i ⊥ X_j | X_cond` through independence of `F(x_i | x_cond)` and `F(x_j | x_cond)`.
pub fn ci_test<T: Scalar>(
    model: &MdmaModel<T>,
    data: ArrayView2<T>,
    i: usize,
    j: usize,
    cond: &[usize],
    alpha: f64,
) -> Result<CiTestResult> {
    let d = model.d();
    if data.ncols() != d {
        return Err(MdmaError::Shape(format!("data has {} columns, model has {d}", data.ncols())));
    }
    if i == j || i >= d || j >= d || cond.contains(&i) || cond.contains(&j) {
        return Err(MdmaError::InvalidSubsets(
            "i and j must be distinct and outside the conditioning set".into(),
        ));
    }
    if cond.iter().any(|&c| c >= d) {
        return Err(MdmaError::InvalidSubsets("conditioning index out of range".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MdmaError::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    let n = data.nrows();
    if n < 2 {
        return Err(MdmaError::InvalidConfig("at least two rows are required".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(MdmaError::NonFiniteInput);
    }
    let prepared = model.prepare();
    let u1 = prepared.conditional_cdf_batch(data, i, cond)?;
    let u2 = prepared.conditional_cdf_batch(data, j, cond)?;
    let pairs: Vec<[f64; 2]> = u1
        .iter()
        .zip(&u2)
        .filter_map(|(a, b)| Some([(*a)?.f64(), (*b)?.f64()]))
        .collect();
    let dropped = n - pairs.len();
    if dropped as f64 > MAX_DROPPED_FRACTION * n as f64 {
        return Err(MdmaError::UnstableConditioning { dropped, total: n });
    }
    let a: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p[1]).collect();
    let kt = kendall_tau(&a, &b);
    let u1_u2 = Array2::from_shape_vec((pairs.len(), 2), pairs.into_iter().flatten().collect())
        .expect("two columns");
    Ok(CiTestResult {
        statistic: kt.tau,
        p_value: kt.p_value,
        reject: kt.p_value < alpha,
        u1_u2,
        dropped,
    })
}

/// `-log f(x_observed)`; larger is more anomalous.
pub fn anomaly_score<T: Scalar>(model: &MdmaModel<T>, x: &[T], missing: &[bool]) -> Result<T> {
    Ok(-model.log_density(x, missing)?)
}

/// Row-wise anomaly scores.
pub fn anomaly_scores<T: Scalar>(
    model: &MdmaModel<T>,
    rows: ArrayView2<T>,
    missing: Option<ArrayView2<bool>>,
) -> Result<Array1<T>> {
    Ok(-model.prepare().log_density_batch(rows, missing)?)
}

/// Density `f(x) = Π_j φ̇_j(v_j)` with `v = x + T σ(x)`, `T` strictly upper triangular with
/// nonnegative entries and `σ(x) = x + a ⊙ tanh(x)`. The map has unit Jacobian determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct NmdmaModel<T> {
    d: usize,
    /// Unconstrained coupling; only the strict upper triangle is used.
    raw_t: Array2<T>,
    raw_gate: Vec<T>,
    base: Vec<UnivariateCdfNet<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmdmaGrad<T> {
    pub raw_t: Array2<T>,
    pub raw_gate: Vec<T>,
    pub base: Vec<NetGrad<T>>,
}

impl<T: Scalar> NmdmaModel<T> {
    pub fn new(raw_t: Array2<T>, raw_gate: Vec<T>, base: Vec<UnivariateCdfNet<T>>) -> Result<Self> {
        let d = base.len();
        if d == 0 || raw_t.dim() != (d, d) || raw_gate.len() != d {
            return Err(MdmaError::Shape(
                "nMDMA needs a d × d coupling, d gates and d base nets".into(),
            ));
        }
        Ok(NmdmaModel {
            d,
            raw_t,
            raw_gate,
            base,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn base(&self) -> &[UnivariateCdfNet<T>] {
        &self.base
    }

    pub fn raw_t_mut(&mut self) -> &mut Array2<T> {
        &mut self.raw_t
    }

    pub fn raw_gate_mut(&mut self) -> &mut [T] {
        &mut self.raw_gate
    }

    /// Effective coupling: `softplus(raw)` above the diagonal, zero elsewhere.
    pub fn coupling(&self) -> Array2<T> {
        Array2::from_shape_fn((self.d, self.d), |(i, j)| {
            if j > i {
                softplus(self.raw_t[[i, j]], T::one())
            } else {
                T::zero()
            }
        })
    }

    pub fn transform(&self, x: &[T]) -> Vec<T> {
        let t = self.coupling();
        let s: Vec<T> = (0..self.d)
            .map(|j| x[j] + self.raw_gate[j].tanh() * x[j].tanh())
            .collect();
        (0..self.d)
            .map(|i| x[i] + (i + 1..self.d).map(|j| t[[i, j]] * s[j]).sum::<T>())
            .collect()
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        if x.len() != self.d {
            return Err(MdmaError::Shape(format!("expected {} coordinates", self.d)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MdmaError::NonFiniteInput);
        }
        let v = self.transform(x);
        Ok((0..self.d)
            .map(|j| self.base[j].effective().log_density_unchecked(v[j]))
            .sum())
    }

    /// `log f(x)` and its gradient with respect to all raw parameters.
    pub fn log_density_and_grad(&self, x: &[T]) -> Result<(T, NmdmaGrad<T>)> {
        let value = self.log_density(x)?;
        let d = self.d;
        let t = self.coupling();
        let gates: Vec<T> = self.raw_gate.iter().map(|g| g.tanh()).collect();
        let s: Vec<T> = (0..d).map(|j| x[j] + gates[j] * x[j].tanh()).collect();
        let v = self.transform(x);
        let mut grad = NmdmaGrad {
            raw_t: Array2::zeros((d, d)),
            raw_gate: vec![T::zero(); d],
            base: self.base.iter().map(NetGrad::zeros_like).collect(),
        };
        let mut g_v = vec![T::zero(); d];
        for j in 0..d {
            let eff = self.base[j].effective();
            let mut tape = eff.tape();
            let (_, gx) = eff.log_density_backward(v[j], T::one(), &mut tape, &mut grad.base[j]);
            self.base[j].raw_gradient(&eff, &mut grad.base[j]);
            g_v[j] = gx;
        }
        for i in 0..d {
            for j in i + 1..d {
                grad.raw_t[[i, j]] = g_v[i] * s[j] * softplus_grad(self.raw_t[[i, j]], T::one());
            }
        }
        for j in 0..d {
            let g_s: T = (0..j).map(|i| g_v[i] * t[[i, j]]).sum();
            grad.raw_gate[j] = g_s * x[j].tanh() * (T::one() - gates[j] * gates[j]);
        }
        Ok((value, grad))
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out: Vec<T> = self.raw_t.iter().copied().collect();
        out.extend(&self.raw_gate);
        for net in &self.base {
            net.for_each_param(|s| out.extend_from_slice(s));
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.params_flat().len() {
            return Err(MdmaError::Shape("parameter count mismatch".into()));
        }
        let dd = self.d * self.d;
        self.raw_t
            .iter_mut()
            .zip(&values[..dd])
            .for_each(|(p, &v)| *p = v);
        self.raw_gate.copy_from_slice(&values[dd..dd + self.d]);
        let mut at = dd + self.d;
        for net in &mut self.base {
            net.for_each_param_mut(|s| {
                s.copy_from_slice(&values[at..at + s.len()]);
                at += s.len();
            });
        }
        Ok(())
    }
}

impl<T: Scalar> NmdmaGrad<T> {
    /// Same order as [`NmdmaModel::params_flat`].
    pub fn flat(&self) -> Vec<T> {
        let mut out: Vec<T> = self.raw_t.iter().copied().collect();
        out.extend(&self.raw_gate);
        for g in &self.base {
            g.for_each(|s| out.extend_from_slice(s));
        }
        out
    }
}

/// Random nMDMA with the same per-net initialization as the MDMA bank and `T ≈ 0`.
pub fn init_nmdma<T: Scalar, R: Rng + ?Sized>(
    d: usize,
    depth: usize,
    width: usize,
    rng: &mut R,
) -> Result<NmdmaModel<T>> {
    let base = (0..d)
        .map(|_| UnivariateCdfNet::init(depth, width, rng))
        .collect::<Result<Vec<_>>>()?;
    NmdmaModel::new(Array2::from_elem((d, d), T::c(-5.0)), vec![T::zero(); d], base)
}
