//! Monotone univariate CDF networks.
//!
//! A net maps `x` through `sigmoid ∘ L_l ∘ σ_{l-1} ∘ L_{l-1} ∘ … ∘ σ_0 ∘ L_0`, where each
//! `L_i(h) = W_i h + b_i` has elementwise positive weights `W_i = softplus(W̃_i, 10)` and each
//! gate is `σ_i(h) = h + a_i ⊙ tanh(h)` with `a_i = tanh(ã_i)`. Positive weights and gates with
//! slope `1 + a (1 - tanh²) > 0` make the composition strictly increasing, so the output is a
//! valid CDF on the real line.
//!
//! The density is carried alongside the value in forward mode (the "tangent" `dh/dx` of every
//! layer), which makes `log φ̇(x)` available in closed form and lets reverse mode differentiate
//! it with respect to both the parameters and `x`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{MdmaError, Result};
use crate::scalar::{log_sigmoid, sigmoid, softplus, softplus_grad, Scalar};

/// Widths up to this use stack buffers in the hot evaluation paths.
const STACK_WIDTH: usize = 16;

/// Rows per block in batched evaluation.
const BLOCK: usize = 32;



/// Sharpness of the softplus applied to the raw weights.
pub const WEIGHT_BETA: f64 = 10.0;

/// One affine layer plus (for hidden layers) its gate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// Unconstrained weights, row-major `n_out × n_in`.
    pub raw_weights: Vec<T>,
    pub biases: Vec<T>,
    /// Unconstrained gates, length `n_out` for hidden layers and empty for the output layer.
    pub raw_gates: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(n_in: usize, n_out: usize, gated: bool) -> Self {
        Layer {
            n_in,
            n_out,
            raw_weights: vec![T::zero(); n_in * n_out],
            biases: vec![T::zero(); n_out],
            raw_gates: if gated {
                vec![T::zero(); n_out]
            } else {
                Vec::new()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateCdfNet<T> {
    depth: usize,
    width: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> UnivariateCdfNet<T> {
    /// All-zero raw parameters for a net with `depth` hidden layers of `width` units.
    pub fn zeros(depth: usize, width: usize) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(MdmaError::InvalidConfig(
                "univariate net depth and width must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(depth + 1);
        for i in 0..=depth {
            let n_in = if i == 0 { 1 } else { width };
            let n_out = if i == depth { 1 } else { width };
            layers.push(Layer::zeros(n_in, n_out, i < depth));
        }
        Ok(UnivariateCdfNet {
            depth,
            width,
            layers,
        })
    }

    /// Builds a net from explicit layers, checking the shape invariants.
    pub fn from_layers(depth: usize, width: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let template = Self::zeros(depth, width)?;
        if layers.len() != template.layers.len() {
            return Err(MdmaError::Shape(format!(
                "expected {} layers, got {}",
                template.layers.len(),
                layers.len()
            )));
        }
        for (i, (got, want)) in layers.iter().zip(&template.layers).enumerate() {
            if got.n_in != want.n_in
                || got.n_out != want.n_out
                || got.raw_weights.len() != want.raw_weights.len()
                || got.biases.len() != want.biases.len()
                || got.raw_gates.len() != want.raw_gates.len()
            {
                return Err(MdmaError::Shape(format!("layer {i} has the wrong shape")));
            }
        }
        Ok(UnivariateCdfNet {
            depth,
            width,
            layers,
        })
    }

    /// Weights `~ N(0, 1/fan_in)`, gates `~ N(0, 1)`, biases zero.
    pub fn init<R: Rng + ?Sized>(depth: usize, width: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(depth, width)?;
        for layer in &mut net.layers {
            let std = (1.0 / layer.n_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.raw_weights {
                *w = T::c(normal.sample(rng));
            }
            for a in &mut layer.raw_gates {
                let v: f64 = StandardNormal.sample(rng);
                *a = T::c(v);
            }
        }
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.raw_weights.len() + l.biases.len() + l.raw_gates.len())
            .sum()
    }

    /// Visits raw parameter slices in declared order: per layer weights, biases, gates.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for layer in &mut self.layers {
            f(&mut layer.raw_weights);
            f(&mut layer.biases);
            f(&mut layer.raw_gates);
        }
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&[T])) {
        for layer in &self.layers {
            f(&layer.raw_weights);
            f(&layer.biases);
            f(&layer.raw_gates);
        }
    }

    /// Applies the positivity and gate constraints once, for repeated evaluation.
    pub fn effective(&self) -> EffectiveNet<T> {
        let beta = T::c(WEIGHT_BETA);
        let layers = self
            .layers
            .iter()
            .map(|l| EffectiveLayer {
                n_in: l.n_in,
                n_out: l.n_out,
                w: l.raw_weights.iter().map(|&w| softplus(w, beta)).collect(),
                b: l.biases.clone(),
                a: l.raw_gates.iter().map(|&a| a.tanh()).collect(),
            })
            .collect();
        EffectiveNet {
            width: self.width,
            layers,
        }
    }

    /// `φ(x)`.
    pub fn phi_forward(&self, x: T) -> Result<T> {
        self.effective().cdf(x)
    }

    /// `φ̇(x) = dφ/dx`.
    pub fn phi_density(&self, x: T) -> Result<T> {
        self.effective().density(x)
    }

    /// Solves `φ(x) = u` by bracketing and bisection.
    pub fn phi_inverse(&self, u: T, tol: T) -> Result<T> {
        self.effective().inverse(u, tol)
    }

    /// Converts gradients with respect to effective parameters (as produced by
    /// [`EffectiveNet::backward`]) into gradients with respect to the raw parameters.
    pub fn raw_gradient(&self, eff: &EffectiveNet<T>, grad: &mut NetGrad<T>) {
        let beta = T::c(WEIGHT_BETA);
        for ((layer, el), gl) in self.layers.iter().zip(&eff.layers).zip(&mut grad.layers) {
            for (g, &w) in gl.w.iter_mut().zip(&layer.raw_weights) {
                *g *= softplus_grad(w, beta);
            }
            for (g, &a) in gl.a.iter_mut().zip(&el.a) {
                *g *= T::one() - a * a;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveLayer<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub a: Vec<T>,
}

/// A net with constraints already applied. Cheap to evaluate; immutable.
#[derive(Debug, Clone)]
pub struct EffectiveNet<T> {
    width: usize,
    layers: Vec<EffectiveLayer<T>>,
}

/// Gradient buffers shaped like a net's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad<T> {
    pub layers: Vec<LayerGrad<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub a: Vec<T>,
}

impl<T: Scalar> NetGrad<T> {
    pub fn zeros_like(net: &UnivariateCdfNet<T>) -> Self {
        NetGrad {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![T::zero(); l.raw_weights.len()],
                    b: vec![T::zero(); l.biases.len()],
                    a: vec![T::zero(); l.raw_gates.len()],
                })
                .collect(),
        }
    }

    /// Same order as [`UnivariateCdfNet::for_each_param`].
    pub fn for_each(&self, mut f: impl FnMut(&[T])) {
        for l in &self.layers {
            f(&l.w);
            f(&l.b);
            f(&l.a);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for l in &mut self.layers {
            f(&mut l.w);
            f(&mut l.b);
            f(&mut l.a);
        }
    }
}

/// Saved activations of one forward pass, reused across rows.
#[derive(Debug, Clone)]
pub struct NetTape<T> {
    h_in: Vec<Vec<T>>,
    t_in: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    tpre: Vec<Vec<T>>,
    th: Vec<Vec<T>>,
    g_h: Vec<T>,
    g_t: Vec<T>,
    g_pre: Vec<T>,
    g_tpre: Vec<T>,
}

impl<T: Scalar> EffectiveNet<T> {
    pub fn tape(&self) -> NetTape<T> {
        let mk = |f: &dyn Fn(&EffectiveLayer<T>) -> usize| -> Vec<Vec<T>> {
            self.layers.iter().map(|l| vec![T::zero(); f(l)]).collect()
        };
        let w = self.width.max(1);
        NetTape {
            h_in: mk(&|l| l.n_in),
            t_in: mk(&|l| l.n_in),
            pre: mk(&|l| l.n_out),
            tpre: mk(&|l| l.n_out),
            th: mk(&|l| l.n_out),
            g_h: vec![T::zero(); w],
            g_t: vec![T::zero(); w],
            g_pre: vec![T::zero(); w],
            g_tpre: vec![T::zero(); w],
        }
    }

    /// Output-layer pre-activation `z`, without the tangent.
    #[inline]
    fn logit(&self, x: T) -> T {
        let mut buf = [T::zero(); STACK_WIDTH];
        let mut next = [T::zero(); STACK_WIDTH];
        if self.width > STACK_WIDTH {
            return self.logit_alloc(x);
        }
        buf[0] = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            for o in 0..l.n_out {
                let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                let mut s = l.b[o];
                for (w, h) in row.iter().zip(&buf[..l.n_in]) {
                    s += *w * *h;
                }
                next[o] = if i < last { s + l.a[o] * s.tanh_fast() } else { s };
            }
            buf[..l.n_out].copy_from_slice(&next[..l.n_out]);
        }
        buf[0]
    }

    fn logit_alloc(&self, x: T) -> T {
        let mut h = vec![x];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = (0..l.n_out)
                .map(|o| {
                    let s = l.b[o]
                        + l.w[o * l.n_in..(o + 1) * l.n_in]
                            .iter()
                            .zip(&h)
                            .fold(T::zero(), |acc, (w, v)| acc + *w * *v);
                    if i < last {
                        s + l.a[o] * s.tanh_fast()
                    } else {
                        s
                    }
                })
                .collect();
        }
        h[0]
    }

    /// Output-layer `(z, dz/dx)`.
    #[inline]
    pub fn logit_and_slope(&self, x: T) -> (T, T) {
        if self.width > STACK_WIDTH {
            let mut tape = self.tape();
            return self.forward_tape(x, &mut tape);
        }
        let mut h = [T::zero(); STACK_WIDTH];
        let mut t = [T::zero(); STACK_WIDTH];
        let mut nh = [T::zero(); STACK_WIDTH];
        let mut nt = [T::zero(); STACK_WIDTH];
        h[0] = x;
        t[0] = T::one();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            for o in 0..l.n_out {
                let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                let mut s = l.b[o];
                let mut ts = T::zero();
                for k in 0..l.n_in {
                    s += row[k] * h[k];
                    ts += row[k] * t[k];
                }
                if i < last {
                    let th = s.tanh_fast();
                    let a = l.a[o];
                    nh[o] = s + a * th;
                    nt[o] = ts * (T::one() + a * (T::one() - th * th));
                } else {
                    nh[o] = s;
                    nt[o] = ts;
                }
            }
            h[..l.n_out].copy_from_slice(&nh[..l.n_out]);
            t[..l.n_out].copy_from_slice(&nt[..l.n_out]);
        }
        (h[0], t[0])
    }

    /// `ln φ̇` (or `ln φ` when `cdf` is set) for many inputs at once. Rows are processed in
    /// blocks so the affine parts vectorize.
    pub fn log_values_into(&self, xs: &[T], cdf: bool, out: &mut [T]) {
        assert_eq!(xs.len(), out.len());
        if self.width > STACK_WIDTH {
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = if cdf {
                    self.log_cdf_unchecked(x)
                } else {
                    self.log_density_unchecked(x)
                };
            }
            return;
        }
        let last = self.layers.len() - 1;
        let mut h = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut t = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut nh = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut nt = [[T::zero(); BLOCK]; STACK_WIDTH];
        for (xb, ob) in xs.chunks(BLOCK).zip(out.chunks_mut(BLOCK)) {
            let nb = xb.len();
            h[0][..nb].copy_from_slice(xb);
            t[0][..nb].fill(T::one());
            for (i, l) in self.layers.iter().enumerate() {
                for o in 0..l.n_out {
                    let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                    let (ho, to) = (&mut nh[o], &mut nt[o]);
                    ho[..nb].fill(l.b[o]);
                    to[..nb].fill(T::zero());
                    for (k, &w) in row.iter().enumerate() {
                        for r in 0..nb {
                            ho[r] += w * h[k][r];
                        }
                        if !cdf {
                            for r in 0..nb {
                                to[r] += w * t[k][r];
                            }
                        }
                    }
                    if i < last {
                        let a = l.a[o];
                        for r in 0..nb {
                            let th = ho[r].tanh_fast();
                            ho[r] += a * th;
                            to[r] *= T::one() + a * (T::one() - th * th);
                        }
                    }
                }
                for o in 0..l.n_out {
                    h[o][..nb].copy_from_slice(&nh[o][..nb]);
                    t[o][..nb].copy_from_slice(&nt[o][..nb]);
                }
            }
            for r in 0..nb {
                let z = h[0][r];
                ob[r] = if cdf {
                    log_sigmoid(z)
                } else {
                    // ln σ(z) + ln σ(-z) = -|z| - 2 ln(1 + e^{-|z|})
                    let a = z.abs();
                    -a - T::c(2.0) * (-a).exp().ln_1p() + t[0][r].ln()
                };
            }
        }
    }

    /// Batched reverse pass: accumulates into `grad` the effective-parameter gradient of
    /// `Σ_r upstream[r] · ln φ̇(xs[r])` (or `ln φ` when `cdf` is set).
    pub fn log_values_backward(&self, xs: &[T], cdf: bool, upstream: &[T], grad: &mut NetGrad<T>) {
        assert_eq!(xs.len(), upstream.len());
        if self.width > STACK_WIDTH {
            let mut tape = self.tape();
            for (&x, &up) in xs.iter().zip(upstream) {
                if cdf {
                    self.log_cdf_backward(x, up, &mut tape, grad);
                } else {
                    self.log_density_backward(x, up, &mut tape, grad);
                }
            }
            return;
        }
        let nl = self.layers.len();
        let last = nl - 1;
        let at = |i: usize, u: usize| (i * STACK_WIDTH + u) * BLOCK;
        let size = nl * STACK_WIDTH * BLOCK;
        let mut h_in = vec![T::zero(); size + STACK_WIDTH * BLOCK];
        let mut t_in = vec![T::zero(); size + STACK_WIDTH * BLOCK];
        let mut tpre = vec![T::zero(); size];
        let mut th = vec![T::zero(); size];
        let mut g_h = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut g_t = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut g_pre = [[T::zero(); BLOCK]; STACK_WIDTH];
        let mut g_tpre = [[T::zero(); BLOCK]; STACK_WIDTH];
        for (xb, ub) in xs.chunks(BLOCK).zip(upstream.chunks(BLOCK)) {
            let nb = xb.len();
            h_in[..nb].copy_from_slice(xb);
            t_in[..nb].fill(T::one());
            for (i, l) in self.layers.iter().enumerate() {
                for o in 0..l.n_out {
                    let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                    let mut s = [l.b[o]; BLOCK];
                    let mut ts = [T::zero(); BLOCK];
                    for (k, &w) in row.iter().enumerate() {
                        let (hk, tk) = (&h_in[at(i, k)..], &t_in[at(i, k)..]);
                        for r in 0..nb {
                            s[r] += w * hk[r];
                            ts[r] += w * tk[r];
                        }
                    }
                    let base = at(i, o);
                    tpre[base..base + nb].copy_from_slice(&ts[..nb]);
                    let next = at(i + 1, o);
                    if i < last {
                        let a = l.a[o];
                        for r in 0..nb {
                            let t = s[r].tanh_fast();
                            th[base + r] = t;
                            h_in[next + r] = s[r] + a * t;
                            t_in[next + r] = ts[r] * (T::one() + a * (T::one() - t * t));
                        }
                    } else {
                        h_in[next..next + nb].copy_from_slice(&s[..nb]);
                        t_in[next..next + nb].copy_from_slice(&ts[..nb]);
                    }
                }
            }
            let out = at(nl, 0);
            for r in 0..nb {
                let z = h_in[out + r];
                let sg = sigmoid(z);
                if cdf {
                    g_h[0][r] = ub[r] * (T::one() - sg);
                    g_t[0][r] = T::zero();
                } else {
                    g_h[0][r] = ub[r] * (T::one() - sg - sg);
                    g_t[0][r] = ub[r] / t_in[out + r];
                }
            }
            for i in (0..nl).rev() {
                let l = &self.layers[i];
                let gl = &mut grad.layers[i];
                for o in 0..l.n_out {
                    let base = at(i, o);
                    if i < last {
                        let a = l.a[o];
                        let mut ga = T::zero();
                        for r in 0..nb {
                            let t = th[base + r];
                            let sech2 = T::one() - t * t;
                            let slope = T::one() + a * sech2;
                            let tp = tpre[base + r];
                            g_pre[o][r] = g_h[o][r] * slope - g_t[o][r] * tp * a * T::c(2.0) * t * sech2;
                            g_tpre[o][r] = g_t[o][r] * slope;
                            ga += g_h[o][r] * t + g_t[o][r] * tp * sech2;
                        }
                        gl.a[o] += ga;
                    } else {
                        g_pre[o][..nb].copy_from_slice(&g_h[o][..nb]);
                        g_tpre[o][..nb].copy_from_slice(&g_t[o][..nb]);
                    }
                    gl.b[o] += g_pre[o][..nb].iter().copied().sum::<T>();
                }
                for k in 0..l.n_in {
                    let (hk, tk) = (&h_in[at(i, k)..], &t_in[at(i, k)..]);
                    let mut gh = [T::zero(); BLOCK];
                    let mut gt = [T::zero(); BLOCK];
                    for o in 0..l.n_out {
                        let idx = o * l.n_in + k;
                        let w = l.w[idx];
                        let mut gw = T::zero();
                        for r in 0..nb {
                            gw += g_pre[o][r] * hk[r] + g_tpre[o][r] * tk[r];
                            gh[r] += w * g_pre[o][r];
                            gt[r] += w * g_tpre[o][r];
                        }
                        gl.w[idx] += gw;
                    }
                    g_h[k] = gh;
                    g_t[k] = gt;
                }
            }
        }
    }

    pub fn cdf(&self, x: T) -> Result<T> {
        if !x.is_finite() {
            return Err(MdmaError::NonFiniteInput);
        }
        Ok(sigmoid(self.logit(x)))
    }

    pub fn density(&self, x: T) -> Result<T> {
        if !x.is_finite() {
            return Err(MdmaError::NonFiniteInput);
        }
        let (z, tz) = self.logit_and_slope(x);
        let s = sigmoid(z);
        Ok(s * (T::one() - s) * tz)
    }

    /// `ln φ(x)`; finite input assumed.
    #[inline]
    pub fn log_cdf_unchecked(&self, x: T) -> T {
        log_sigmoid(self.logit(x))
    }

    /// `ln φ̇(x)`; finite input assumed.
    #[inline]
    pub fn log_density_unchecked(&self, x: T) -> T {
        let (z, tz) = self.logit_and_slope(x);
        log_sigmoid(z) + log_sigmoid(-z) + tz.ln()
    }

    /// `φ(x)`; finite input assumed.
    #[inline]
    pub fn cdf_unchecked(&self, x: T) -> T {
        sigmoid(self.logit(x))
    }

    /// `φ̇(x)`; finite input assumed.
    #[inline]
    pub fn density_unchecked(&self, x: T) -> T {
        let (z, tz) = self.logit_and_slope(x);
        let s = sigmoid(z);
        s * (T::one() - s) * tz
    }

    /// Forward pass recording activations. Returns `(z, dz/dx)`.
    pub fn forward_tape(&self, x: T, tape: &mut NetTape<T>) -> (T, T) {
        tape.h_in[0][0] = x;
        tape.t_in[0][0] = T::one();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            for o in 0..l.n_out {
                let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                let mut s = l.b[o];
                let mut ts = T::zero();
                for k in 0..l.n_in {
                    s += row[k] * tape.h_in[i][k];
                    ts += row[k] * tape.t_in[i][k];
                }
                tape.pre[i][o] = s;
                tape.tpre[i][o] = ts;
                if i < last {
                    let th = s.tanh_fast();
                    let a = l.a[o];
                    tape.th[i][o] = th;
                    tape.h_in[i + 1][o] = s + a * th;
                    tape.t_in[i + 1][o] = ts * (T::one() + a * (T::one() - th * th));
                }
            }
        }
        (tape.pre[last][0], tape.tpre[last][0])
    }

    /// Reverse pass for upstream gradients on `(z, dz/dx)`. Accumulates gradients with
    /// respect to the effective parameters into `grad` and returns the gradient on `x`.
    pub fn backward(&self, tape: &mut NetTape<T>, g_z: T, g_tz: T, grad: &mut NetGrad<T>) -> T {
        let last = self.layers.len() - 1;
        let NetTape {
            h_in,
            t_in,
            pre: _,
            tpre,
            th,
            g_h,
            g_t,
            g_pre,
            g_tpre,
        } = tape;
        g_h[0] = g_z;
        g_t[0] = g_tz;
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            let gl = &mut grad.layers[i];
            for o in 0..l.n_out {
                if i < last {
                    let a = l.a[o];
                    let th_o = th[i][o];
                    let sech2 = T::one() - th_o * th_o;
                    let slope = T::one() + a * sech2;
                    let tp = tpre[i][o];
                    g_pre[o] = g_h[o] * slope - g_t[o] * tp * a * T::c(2.0) * th_o * sech2;
                    g_tpre[o] = g_t[o] * slope;
                    gl.a[o] += g_h[o] * th_o + g_t[o] * tp * sech2;
                } else {
                    g_pre[o] = g_h[o];
                    g_tpre[o] = g_t[o];
                }
            }
            for k in 0..l.n_in {
                let mut gh = T::zero();
                let mut gt = T::zero();
                for o in 0..l.n_out {
                    let idx = o * l.n_in + k;
                    gl.w[idx] += g_pre[o] * h_in[i][k] + g_tpre[o] * t_in[i][k];
                    gh += l.w[idx] * g_pre[o];
                    gt += l.w[idx] * g_tpre[o];
                }
                g_h[k] = gh;
                g_t[k] = gt;
            }
            for o in 0..l.n_out {
                gl.b[o] += g_pre[o];
            }
        }
        g_h[0]
    }

    /// Backpropagates a gradient on `ln φ̇(x)`; returns `(ln φ̇(x), d ln φ̇/dx)`.
    pub fn log_density_backward(
        &self,
        x: T,
        upstream: T,
        tape: &mut NetTape<T>,
        grad: &mut NetGrad<T>,
    ) -> (T, T) {
        let (z, tz) = self.forward_tape(x, tape);
        let s = sigmoid(z);
        let value = log_sigmoid(z) + log_sigmoid(-z) + tz.ln();
        let g_z = upstream * (T::one() - s - s);
        let g_tz = upstream / tz;
        let g_x = self.backward(tape, g_z, g_tz, grad);
        (value, g_x)
    }

    /// Backpropagates a gradient on `ln φ(x)`; returns `ln φ(x)`.
    pub fn log_cdf_backward(
        &self,
        x: T,
        upstream: T,
        tape: &mut NetTape<T>,
        grad: &mut NetGrad<T>,
    ) -> T {
        let (z, _) = self.forward_tape(x, tape);
        let s = sigmoid(z);
        self.backward(tape, upstream * (T::one() - s), T::zero(), grad);
        log_sigmoid(z)
    }

    /// Solves `φ(x) = u`: the bracket `[-1, 1]` is doubled until it straddles `u`, then
    /// bisected until both `|φ(x) - u| <= tol` and the bracket is narrower than `tol`.
    pub fn inverse(&self, u: T, tol: T) -> Result<T> {
        self.inverse_by(u, tol, |x| self.cdf_unchecked(x))
    }

    /// Bisection on an arbitrary nondecreasing function with range `(0, 1)`.
    pub fn inverse_by(&self, u: T, tol: T, f: impl Fn(T) -> T) -> Result<T> {
        invert_monotone(u, tol, f)
    }
}

/// Inverts a nondecreasing map `f: ℝ → (0, 1)` at level `u` by bracketing and bisection.
pub fn invert_monotone<T: Scalar>(u: T, tol: T, f: impl Fn(T) -> T) -> Result<T> {
    if !u.is_finite() || !tol.is_finite() {
        return Err(MdmaError::NonFiniteInput);
    }
    if u <= T::zero() || u >= T::one() || tol <= T::zero() {
        return Err(MdmaError::InvalidQuery(
            "inversion requires 0 < u < 1 and tol > 0".into(),
        ));
    }
    let limit = T::c(2f64.powi(60));
    let mut lo = -T::one();
    let mut hi = T::one();
    while f(lo) > u {
        lo = lo + lo;
        if lo.abs() > limit {
            return Err(MdmaError::InversionBracketOverflow);
        }
    }
    while f(hi) < u {
        hi = hi + hi;
        if hi.abs() > limit {
            return Err(MdmaError::InversionBracketOverflow);
        }
    }
    let half = T::c(0.5);
    let mut mid = half * (lo + hi);
    for _ in 0..400 {
        mid = half * (lo + hi);
        let fm = f(mid);
        if (fm - u).abs() <= tol && hi - lo <= tol {
            return Ok(mid);
        }
        if fm < u {
            lo = mid;
        } else {
            hi = mid;
        }
        // bracket exhausted at floating-point resolution
        let next = half * (lo + hi);
        if next <= lo || next >= hi {
            break;
        }
    }
    Ok(mid)
}
