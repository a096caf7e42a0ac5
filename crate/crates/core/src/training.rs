//! Maximum (marginal) likelihood training.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::engine::{self, ModelGrad};
use crate::error::{MdmaError, Result};
use crate::ht::HtTensor;
use crate::model::{density_kinds, MdmaModel};
use crate::scalar::Scalar;
use crate::univariate::UnivariateCdfNet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Trailing fraction of the shuffled data held out for model selection.
    pub validation_fraction: f64,
    /// Rescale the gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
    /// Marginalize masked entries. When off, every entry must be observed.
    pub use_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 500,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
            clip_norm: None,
            use_mask: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(MdmaError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MdmaError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(MdmaError::InvalidConfig(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh model: weights `~ N(0, 1/fan_in)`, gates `~ N(0, 1)`, zero biases, near-identity
/// internal mixing (`λ̃ = m·δ`), and a root `~ N(0, 0.3/m)`.
pub fn init_model<T: Scalar>(
    d: usize,
    m: usize,
    depth: usize,
    width: usize,
    pool_size: usize,
    seed: u64,
) -> Result<MdmaModel<T>> {
    if d == 0 || m == 0 {
        return Err(MdmaError::InvalidConfig("d and m must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = Vec::with_capacity(d * m);
    for _ in 0..d * m {
        bank.push(UnivariateCdfNet::init(depth, width, &mut rng)?);
    }
    let mut ht = HtTensor::zeros(d, m, pool_size)?;
    let diag = T::c(m as f64);
    for level in ht.raw_levels_mut() {
        for mut node in level.outer_iter_mut() {
            for i in 0..m {
                node[[i, i]] = diag;
            }
        }
    }
    let root_dist = Normal::new(0.0, (0.3 / m as f64).sqrt()).expect("positive variance");
    for v in ht.raw_root_mut().iter_mut() {
        *v = T::c(root_dist.sample(&mut rng));
    }
    MdmaModel::new(bank, ht)
}

/// Mean negative log (marginal) likelihood of a batch and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    model: &MdmaModel<T>,
    rows: ArrayView2<T>,
    missing: Option<ArrayView2<bool>>,
) -> Result<(T, ModelGrad<T>)> {
    let n = rows.nrows();
    if n == 0 {
        return Err(MdmaError::InvalidConfig("empty batch".into()));
    }
    if rows.ncols() != model.d() {
        return Err(MdmaError::Shape(format!(
            "batch has {} columns, model has {}",
            rows.ncols(),
            model.d()
        )));
    }
    let kinds = density_kinds(rows, missing)?;
    let prepared = model.prepare();
    let tape = engine::forward(&prepared, rows, kinds.view());
    if let Some(row) = tape.log_value.iter().position(|v| !v.is_finite()) {
        return Err(MdmaError::NonFiniteLoss { row });
    }
    let nll = -tape.log_value.iter().copied().sum::<T>() / T::c(n as f64);
    let g_log = ndarray::Array1::from_elem(n, -T::one() / T::c(n as f64));
    let grad = engine::backward(model, &prepared, rows, kinds.view(), &tape, &g_log);
    Ok((nll, grad))
}

/// Adam with bias correction over a model's flattened raw parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step<T: Scalar>(&mut self, model: &mut MdmaModel<T>, grad: &ModelGrad<T>) {
        let g: Vec<f64> = grad.flat().into_iter().map(Scalar::f64).collect();
        let mut params: Vec<f64> = model.params_flat().into_iter().map(Scalar::f64).collect();
        self.update(&mut params, &g);
        let back: Vec<T> = params.into_iter().map(T::c).collect();
        model.set_params_flat(&back).expect("same parameter count");
    }

    /// One update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.first.len() != params.len() {
            self.first = vec![0.0; params.len()];
            self.second = vec![0.0; params.len()];
            self.step = 0;
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn clip<T: Scalar>(grad: &mut ModelGrad<T>, max_norm: f64) {
    let mut sq = 0.0;
    grad.for_each(|s| sq += s.iter().map(|v| v.f64() * v.f64()).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = T::c(max_norm / norm);
        grad.for_each_mut(|s| s.iter_mut().for_each(|v| *v *= f));
    }
}

/// Greedy correlation-based leaf order.
///
/// At every level the most correlated pair of not-yet-grouped blocks is merged first (ties by
/// lowest index), until the level is partitioned into groups of `pool_size`; block-to-block
/// correlation is the mean absolute correlation between their members. A group that contains
/// an undersized subtree is kept last so the result is consistent with the consecutive-block
/// tree layout.
pub fn adaptive_coupling(
    rows: ArrayView2<f64>,
    missing: Option<ArrayView2<bool>>,
    pool_size: usize,
) -> Result<Vec<usize>> {
    if pool_size < 2 {
        return Err(MdmaError::InvalidConfig("pool size must be at least 2".into()));
    }
    let complete: Vec<usize> = (0..rows.nrows())
        .filter(|&r| missing.map(|m| m.row(r).iter().all(|&x| !x)).unwrap_or(true))
        .collect();
    if complete.len() < 2 {
        return Err(MdmaError::InsufficientCouplingData);
    }
    let data = rows.select(Axis(0), &complete);
    let corr = abs_correlation(data.view());
    let d = corr.nrows();

    let mut groups: Vec<Vec<usize>> = (0..d).map(|j| vec![j]).collect();
    let mut tail: Option<usize> = None;
    while groups.len() > 1 {
        let g = groups.len();
        let block = |a: &[usize], b: &[usize]| -> f64 {
            let mut s = 0.0;
            for &u in a {
                for &v in b {
                    s += corr[[u, v]];
                }
            }
            s / (a.len() * b.len()) as f64
        };
        let parents = g.div_ceil(pool_size);
        let last_size = g - (parents - 1) * pool_size;
        let mut free: Vec<usize> = (0..g).filter(|&i| Some(i) != tail).collect();
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(parents);
        for _ in 0..parents - 1 {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for (x, &a) in free.iter().enumerate() {
                for &b in &free[x + 1..] {
                    let c = block(&groups[a], &groups[b]);
                    if c > best.0 {
                        best = (c, a, b);
                    }
                }
            }
            let mut members: Vec<usize> = Vec::new();
            let mut cluster = vec![best.1, best.2];
            free.retain(|&i| i != best.1 && i != best.2);
            members.extend(&groups[best.1]);
            members.extend(&groups[best.2]);
            while cluster.len() < pool_size {
                let mut pick = (f64::NEG_INFINITY, usize::MAX);
                for &a in &free {
                    let c = block(&members, &groups[a]);
                    if c > pick.0 {
                        pick = (c, a);
                    }
                }
                cluster.push(pick.1);
                free.retain(|&i| i != pick.1);
                members.extend(&groups[pick.1]);
            }
            next.push(members);
        }
        let mut last: Vec<usize> = free.iter().flat_map(|&i| groups[i].clone()).collect();
        if let Some(t) = tail {
            last.extend(&groups[t]);
        }
        // the trailing group must stay last while it holds an undersized subtree
        tail = (last_size < pool_size || tail.is_some()).then_some(next.len());
        next.push(last);
        groups = next;
    }
    Ok(groups.pop().expect("one group remains"))
}

fn abs_correlation(data: ArrayView2<f64>) -> Array2<f64> {
    let n = data.nrows() as f64;
    let d = data.ncols();
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n;
    Array2::from_shape_fn((d, d), |(i, j)| {
        let denom = (cov[[i, i]] * cov[[j, j]]).sqrt();
        if denom > 0.0 && denom.is_finite() {
            (cov[[i, j]] / denom).abs()
        } else {
            0.0
        }
    })
}

/// Summary of one epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub validation_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitStatus {
    Completed,
    /// Training stopped because the loss became non-finite.
    Diverged { epoch: usize, row: usize },
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    /// Best-validation snapshot (or the final model without a validation split).
    pub model: MdmaModel<T>,
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
    pub status: FitStatus,
}

fn to_t<T: Scalar>(a: ArrayView2<f64>) -> Array2<T> {
    a.mapv(T::c)
}

/// Mean negative log (marginal) likelihood over a dataset.
pub fn mean_nll<T: Scalar>(model: &MdmaModel<T>, data: &Dataset, use_mask: bool) -> Result<f64> {
    let values = to_t::<T>(data.values());
    let mask = if use_mask { Some(data.missing()) } else { None };
    let ll = model.prepare().log_density_batch(values.view(), mask)?;
    Ok(-ll.iter().map(|v| v.f64()).sum::<f64>() / data.n() as f64)
}

/// Minibatch Adam on the mean negative log (marginal) likelihood.
pub fn fit<T: Scalar>(
    model: MdmaModel<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    if dataset.n() == 0 {
        return Err(MdmaError::InvalidConfig("empty dataset".into()));
    }
    if dataset.d() != model.d() {
        return Err(MdmaError::Shape(format!(
            "dataset has {} columns, model has {}",
            dataset.d(),
            model.d()
        )));
    }
    if !config.use_mask && dataset.has_missing() {
        return Err(MdmaError::InvalidConfig(
            "dataset has missing entries but masking is disabled".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, valid) = dataset.split(config.validation_fraction, &mut rng);
    let valid = (valid.n() > 0).then_some(valid);
    let train_values = to_t::<T>(train.values());

    let mut model = model;
    let mut adam = Adam::from_config(config);
    let mut trace = vec![EpochStats {
        epoch: 0,
        train_nll: mean_nll(&model, &train, config.use_mask)?,
        validation_nll: valid
            .as_ref()
            .map(|v| mean_nll(&model, v, config.use_mask))
            .transpose()?,
    }];
    let mut best = (trace[0].validation_nll.unwrap_or(f64::INFINITY), 0, model.clone());

    let mut order: Vec<usize> = (0..train.n()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let rows = train_values.select(Axis(0), chunk);
            let mask = config
                .use_mask
                .then(|| train.missing().select(Axis(0), chunk));
            let (nll, mut grad) = match loss_and_grad(&model, rows.view(), mask.as_ref().map(|m| m.view())) {
                Ok(v) => v,
                Err(MdmaError::NonFiniteLoss { row }) => {
                    return Ok(FitOutcome {
                        model: best.2,
                        trace,
                        best_epoch: best.1,
                        status: FitStatus::Diverged {
                            epoch,
                            row: chunk[row],
                        },
                    });
                }
                Err(e) => return Err(e),
            };
            if let Some(max) = config.clip_norm {
                clip(&mut grad, max);
            }
            adam.step(&mut model, &grad);
            total += nll.f64() * chunk.len() as f64;
        }
        let train_nll = total / train.n() as f64;
        let validation_nll = valid
            .as_ref()
            .map(|v| mean_nll(&model, v, config.use_mask))
            .transpose()?;
        trace.push(EpochStats {
            epoch,
            train_nll,
            validation_nll,
        });
        if !train_nll.is_finite() || validation_nll.is_some_and(|v| !v.is_finite()) {
            return Ok(FitOutcome {
                model: best.2,
                trace,
                best_epoch: best.1,
                status: FitStatus::Diverged { epoch, row: 0 },
            });
        }
        match validation_nll {
            Some(v) if v < best.0 => best = (v, epoch, model.clone()),
            None => best = (f64::INFINITY, epoch, model.clone()),
            _ => {}
        }
    }
    Ok(FitOutcome {
        model: best.2,
        trace,
        best_epoch: best.1,
        status: FitStatus::Completed,
    })
}
