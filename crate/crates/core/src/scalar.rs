//! Floating-point abstraction shared by every model component.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type usable by the models: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// `tanh` accurate to a few ulps, written without calls or branches so batched loops
    /// vectorize.
    fn tanh_fast(self) -> Self;
}

macro_rules! tanh_fast_impl {
    ($t:ty, $bits:ty, $mant:expr, $bias:expr) => {
        #[inline]
        fn tanh_fast(self) -> $t {
            const LN2_HI: $t = 6.931_471_803_691_238_2e-1;
            const LN2_LO: $t = 1.908_214_929_270_587_7e-10;
            // tanh(|x|) = e / (e + 2) with e = expm1(2|x|); 2|x| is capped where tanh = 1
            let y = 2.0 * self.abs();
            let y = if y > 40.0 { 40.0 } else { y };
            let k = (y * std::f64::consts::LOG2_E as $t + 0.5) as i32;
            let kf = k as $t;
            let r = (y - kf * LN2_HI) - kf * LN2_LO;
            let mut p: $t = 1.0 / 6_227_020_800.0;
            for c in [
                1.0 / 479_001_600.0,
                1.0 / 39_916_800.0,
                1.0 / 3_628_800.0,
                1.0 / 362_880.0,
                1.0 / 40_320.0,
                1.0 / 5_040.0,
                1.0 / 720.0,
                1.0 / 120.0,
                1.0 / 24.0,
                1.0 / 6.0,
                0.5,
                1.0,
            ] {
                p = p * r + c;
            }
            let em1_r = p * r;
            let scale = <$t>::from_bits(((k + $bias) as $bits) << $mant);
            let e = scale * em1_r + (scale - 1.0);
            (e / (e + 2.0)).copysign(self)
        }
    };
}

impl Scalar for f32 {
    tanh_fast_impl!(f32, u32, 23, 127);
}

impl Scalar for f64 {
    tanh_fast_impl!(f64, u64, 52, 1023);
}

/// `softplus(x, beta) = ln(1 + exp(beta * x)) / beta`, evaluated without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T, beta: T) -> T {
    let z = beta * x;
    if z > T::c(30.0) {
        x
    } else if z < T::c(-30.0) {
        z.exp() / beta
    } else {
        z.exp().ln_1p() / beta
    }
}

/// Derivative of [`softplus`] with respect to `x`.
#[inline]
pub fn softplus_grad<T: Scalar>(x: T, beta: T) -> T {
    sigmoid(beta * x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse<T: Scalar>(y: T, beta: T) -> T {
    let z = beta * y;
    if z > T::c(30.0) {
        y
    } else {
        // ln(exp(z) - 1) / beta
        z.exp_m1().ln() / beta
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(sigmoid(z))` without cancellation for large `|z|`.
#[inline]
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    -softplus(-z, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        let mut x = -25.0_f64;
        while x < 25.0 {
            let (a, b) = (x.tanh_fast(), x.tanh());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1e-300), "{x}: {a} vs {b}");
            x += 0.0137;
        }
        for x in [1e-300, 1e-20, 1e-8, 0.34657, 0.3466, 1e3, f64::INFINITY] {
            assert!((x.tanh_fast() - x.tanh()).abs() <= 4.0 * f64::EPSILON * x.tanh());
            assert_eq!((-x).tanh_fast(), -x.tanh_fast());
        }
        assert!(f64::NAN.tanh_fast().is_nan());
        let y = 0.7_f32;
        assert!((y.tanh_fast() - y.tanh()).abs() <= 4.0 * f32::EPSILON);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1e6_f64, 10.0), 1e6);
        assert!(softplus(-1e6_f64, 10.0) >= 0.0);
        assert!((softplus(0.0_f64, 10.0) - 2f64.ln() / 10.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-3, 0.1, 1.0, 5.0, 100.0] {
            let x = softplus_inverse(y, 10.0_f64);
            assert!((softplus(x, 10.0) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn log_sigmoid_tails() {
        assert!((log_sigmoid(-800.0_f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0_f64).abs() < 1e-300);
        assert!((log_sigmoid(0.0_f32) + 2f32.ln()).abs() < 1e-6);
    }
}
