//! The joint model and its query interface.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};

use crate::engine::{self, LeafKind};
use crate::error::{MdmaError, Result};
use crate::ht::{EffectiveHt, HtTensor};
use crate::scalar::Scalar;
use crate::univariate::{EffectiveNet, UnivariateCdfNet};

/// Denominators below this are treated as conditioning on a null event.
pub const CONDITIONING_FLOOR: f64 = 1e-300;

/// A bank of `m × d` univariate CDF nets joined by a hierarchical Tucker tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MdmaModel<T> {
    d: usize,
    m: usize,
    /// Variable-major: net `(i, j)` lives at `j * m + i`.
    phi_bank: Vec<UnivariateCdfNet<T>>,
    ht: HtTensor<T>,
}

impl<T: Scalar> MdmaModel<T> {
    pub fn new(phi_bank: Vec<UnivariateCdfNet<T>>, ht: HtTensor<T>) -> Result<Self> {
        let d = ht.d();
        let m = ht.m();
        if phi_bank.len() != d * m {
            return Err(MdmaError::Shape(format!(
                "phi bank has {} nets, expected m*d = {}",
                phi_bank.len(),
                d * m
            )));
        }
        if let Some(first) = phi_bank.first() {
            if phi_bank
                .iter()
                .any(|n| n.depth() != first.depth() || n.width() != first.width())
            {
                return Err(MdmaError::Shape(
                    "all univariate nets must share depth and width".into(),
                ));
            }
        }
        Ok(MdmaModel { d, m, phi_bank, ht })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn net_depth(&self) -> usize {
        self.phi_bank[0].depth()
    }

    pub fn net_width(&self) -> usize {
        self.phi_bank[0].width()
    }

    /// Net `φ_{i,j}` for component `i` of variable `j`.
    pub fn net(&self, i: usize, j: usize) -> &UnivariateCdfNet<T> {
        &self.phi_bank[j * self.m + i]
    }

    pub fn net_mut(&mut self, i: usize, j: usize) -> &mut UnivariateCdfNet<T> {
        &mut self.phi_bank[j * self.m + i]
    }

    pub fn phi_bank(&self) -> &[UnivariateCdfNet<T>] {
        &self.phi_bank
    }

    pub fn ht(&self) -> &HtTensor<T> {
        &self.ht
    }

    pub fn ht_mut(&mut self) -> &mut HtTensor<T> {
        &mut self.ht
    }

    pub fn param_count(&self) -> usize {
        self.phi_bank.iter().map(|n| n.param_count()).sum::<usize>() + self.ht.param_count()
    }

    /// Raw parameter slices in declared order: the phi bank (variable-major), then the
    /// tensor levels bottom-up, then the root vector.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for net in &mut self.phi_bank {
            net.for_each_param_mut(&mut f);
        }
        self.ht.for_each_param_mut(&mut f);
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&[T])) {
        for net in &self.phi_bank {
            net.for_each_param(&mut f);
        }
        self.ht.for_each_param(&mut f);
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(|s| out.extend_from_slice(s));
        out
    }

    pub fn set_params_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(MdmaError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        self.for_each_param_mut(|s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    /// Constrained view for repeated evaluation.
    pub fn prepare(&self) -> PreparedModel<T> {
        PreparedModel {
            d: self.d,
            m: self.m,
            nets: self.phi_bank.iter().map(|n| n.effective()).collect(),
            ht: self.ht.effective(),
        }
    }

    pub fn ht_contract(&self, factors: &[Vec<T>]) -> Result<T> {
        self.ht.effective().contract(factors)
    }

    pub fn evaluate(&self, query: &QuerySpec<T>) -> Result<T> {
        self.prepare().evaluate(query)
    }

    pub fn log_density(&self, x: &[T], missing: &[bool]) -> Result<T> {
        self.prepare().log_density(x, missing)
    }
}

/// Per-variable role in a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryTag<T> {
    /// Contributes `φ_{i,j}(x)`.
    CdfAt(T),
    /// Contributes `φ̇_{i,j}(x)`.
    DensityAt(T),
    /// Contributes the all-ones vector.
    Marginalize,
    /// Conditioning variable: `φ̇_{i,j}(x)` in both numerator and denominator.
    ConditionDensityAt(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec<T> {
    pub tags: Vec<QueryTag<T>>,
}

impl<T: Scalar> QuerySpec<T> {
    pub fn new(tags: Vec<QueryTag<T>>) -> Self {
        QuerySpec { tags }
    }

    pub fn is_conditional(&self) -> bool {
        self.tags
            .iter()
            .any(|t| matches!(t, QueryTag::ConditionDensityAt(_)))
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.tags.len() != d {
            return Err(MdmaError::InvalidQuery(format!(
                "query has {} tags, model has {d} variables",
                self.tags.len()
            )));
        }
        for t in &self.tags {
            let x = match *t {
                QueryTag::CdfAt(x) | QueryTag::DensityAt(x) | QueryTag::ConditionDensityAt(x) => x,
                QueryTag::Marginalize => continue,
            };
            if !x.is_finite() {
                return Err(MdmaError::NonFiniteInput);
            }
        }
        if self.is_conditional()
            && !self
                .tags
                .iter()
                .any(|t| matches!(t, QueryTag::CdfAt(_) | QueryTag::DensityAt(_)))
        {
            return Err(MdmaError::InvalidQuery(
                "a conditional query needs at least one query variable".into(),
            ));
        }
        Ok(())
    }
}

/// Parses `c:<x>`, `d:<x>`, `m`, `given:<x>`.
impl<T: Scalar + FromStr> FromStr for QueryTag<T> {
    type Err = MdmaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "m" {
            return Ok(QueryTag::Marginalize);
        }
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| MdmaError::InvalidQuery(format!("malformed tag `{s}`")))?;
        let x: T = value
            .trim()
            .parse()
            .map_err(|_| MdmaError::InvalidQuery(format!("bad number in tag `{s}`")))?;
        match kind.trim() {
            "c" => Ok(QueryTag::CdfAt(x)),
            "d" => Ok(QueryTag::DensityAt(x)),
            "given" => Ok(QueryTag::ConditionDensityAt(x)),
            other => Err(MdmaError::InvalidQuery(format!("unknown tag kind `{other}`"))),
        }
    }
}

impl<T: Scalar + FromStr> FromStr for QuerySpec<T> {
    type Err = MdmaError;

    fn from_str(s: &str) -> Result<Self> {
        let tags = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<QueryTag<T>>>>()?;
        Ok(QuerySpec { tags })
    }
}

impl<T: Scalar> fmt::Display for QueryTag<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryTag::CdfAt(x) => write!(f, "c:{x}"),
            QueryTag::DensityAt(x) => write!(f, "d:{x}"),
            QueryTag::Marginalize => write!(f, "m"),
            QueryTag::ConditionDensityAt(x) => write!(f, "given:{x}"),
        }
    }
}

/// A model with all constraints applied; immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct PreparedModel<T> {
    d: usize,
    m: usize,
    nets: Vec<EffectiveNet<T>>,
    ht: EffectiveHt<T>,
}

impl<T: Scalar> PreparedModel<T> {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn net(&self, i: usize, j: usize) -> &EffectiveNet<T> {
        &self.nets[j * self.m + i]
    }

    pub fn ht(&self) -> &EffectiveHt<T> {
        &self.ht
    }

    /// `(φ_{i,j}(x))_i`.
    pub fn cdf_vector(&self, j: usize, x: T) -> Vec<T> {
        (0..self.m).map(|i| self.net(i, j).cdf_unchecked(x)).collect()
    }

    /// `(φ̇_{i,j}(x))_i`.
    pub fn density_vector(&self, j: usize, x: T) -> Vec<T> {
        (0..self.m)
            .map(|i| self.net(i, j).density_unchecked(x))
            .collect()
    }

    fn factor(&self, j: usize, tag: &QueryTag<T>) -> Vec<T> {
        match *tag {
            QueryTag::CdfAt(x) => self.cdf_vector(j, x),
            QueryTag::DensityAt(x) | QueryTag::ConditionDensityAt(x) => self.density_vector(j, x),
            QueryTag::Marginalize => vec![T::one(); self.m],
        }
    }

    /// Joint, marginal or conditional CDF/density, as selected by the per-variable tags.
    ///
    /// Plain contraction without rescaling: products of many small densities can underflow,
    /// use [`PreparedModel::log_density`] for likelihoods.
    pub fn evaluate(&self, query: &QuerySpec<T>) -> Result<T> {
        query.validate(self.d)?;
        let factors: Vec<Vec<T>> = query
            .tags
            .iter()
            .enumerate()
            .map(|(j, t)| self.factor(j, t))
            .collect();
        let numerator = self.ht.contract(&factors)?;
        if !query.is_conditional() {
            return Ok(numerator);
        }
        let factors: Vec<Vec<T>> = query
            .tags
            .iter()
            .zip(factors)
            .map(|(t, f)| match t {
                QueryTag::CdfAt(_) | QueryTag::DensityAt(_) => vec![T::one(); self.m],
                _ => f,
            })
            .collect();
        let denominator = self.ht.contract(&factors)?;
        if !(denominator.f64() >= CONDITIONING_FLOOR) {
            return Err(MdmaError::ZeroDensityCondition);
        }
        Ok(numerator / denominator)
    }

    /// Log density of the observed coordinates, marginalizing those flagged `missing`.
    pub fn log_density(&self, x: &[T], missing: &[bool]) -> Result<T> {
        if x.len() != self.d || missing.len() != self.d {
            return Err(MdmaError::Shape(format!(
                "expected {} coordinates and mask entries",
                self.d
            )));
        }
        let rows = Array2::from_shape_vec((1, self.d), x.to_vec()).expect("shape");
        let mask = Array2::from_shape_vec((1, self.d), missing.to_vec()).expect("shape");
        Ok(self.log_density_batch(rows.view(), Some(mask.view()))?[0])
    }

    /// Row-wise log densities, marginalizing masked entries (`true` = missing).
    pub fn log_density_batch(
        &self,
        rows: ArrayView2<T>,
        missing: Option<ArrayView2<bool>>,
    ) -> Result<Array1<T>> {
        let kinds = density_kinds(rows, missing)?;
        engine::log_contract(self, rows, kinds.view())
    }

    /// Row-wise log contractions for explicit leaf kinds.
    pub fn log_contract_batch(
        &self,
        rows: ArrayView2<T>,
        kinds: ArrayView2<LeafKind>,
    ) -> Result<Array1<T>> {
        engine::log_contract(self, rows, kinds)
    }

    /// Conditional CDF `F(x_target | x_cond)` per row, computed in log space. Rows whose
    /// conditioning density falls below [`CONDITIONING_FLOOR`] yield `None`.
    pub fn conditional_cdf_batch(
        &self,
        rows: ArrayView2<T>,
        target: usize,
        cond: &[usize],
    ) -> Result<Vec<Option<T>>> {
        if target >= self.d || cond.iter().any(|&c| c >= self.d || c == target) {
            return Err(MdmaError::InvalidQuery(
                "conditional CDF indices out of range or overlapping".into(),
            ));
        }
        let n = rows.nrows();
        let mut num_kinds = Array2::from_elem((n, self.d), LeafKind::Marginal);
        let mut den_kinds = Array2::from_elem((n, self.d), LeafKind::Marginal);
        for r in 0..n {
            num_kinds[[r, target]] = LeafKind::Cdf;
            for &c in cond {
                num_kinds[[r, c]] = LeafKind::Density;
                den_kinds[[r, c]] = LeafKind::Density;
            }
        }
        let num = engine::log_contract(self, rows, num_kinds.view())?;
        let den = engine::log_contract(self, rows, den_kinds.view())?;
        let floor = CONDITIONING_FLOOR.ln();
        Ok(num
            .iter()
            .zip(den.iter())
            .map(|(&a, &b)| {
                if b.is_finite() && b.f64() >= floor && a.is_finite() {
                    Some((a - b).exp().min(T::one()).max(T::zero()))
                } else if b.is_finite() && b.f64() >= floor {
                    // numerator underflowed to zero
                    Some(T::zero())
                } else {
                    None
                }
            })
            .collect())
    }
}

pub(crate) fn density_kinds<T: Scalar>(
    rows: ArrayView2<T>,
    missing: Option<ArrayView2<bool>>,
) -> Result<Array2<LeafKind>> {
    let (n, d) = rows.dim();
    if let Some(mask) = missing {
        if mask.dim() != (n, d) {
            return Err(MdmaError::Shape("mask shape differs from data".into()));
        }
    }
    let mut kinds = Array2::from_elem((n, d), LeafKind::Density);
    for r in 0..n {
        let mut observed = 0;
        for j in 0..d {
            let hidden = missing.map(|mk| mk[[r, j]]).unwrap_or(false);
            if hidden {
                kinds[[r, j]] = LeafKind::Marginal;
            } else {
                if !rows[[r, j]].is_finite() {
                    return Err(MdmaError::NonFiniteInput);
                }
                observed += 1;
            }
        }
        if observed == 0 {
            return Err(MdmaError::EmptyObservation);
        }
    }
    Ok(kinds)
}
