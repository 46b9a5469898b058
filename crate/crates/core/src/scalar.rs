//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar the toolkit is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + rustdct::DctNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc<T: Real>(x: T) -> T {
    if x == T::zero() {
        T::one()
    } else {
        let px = T::PI() * x;
        px.sin() / px
    }
}

/// Sine integral `Si(x) = ∫_0^x sin(t)/t dt`.
///
/// Power series below |x| = 16, asymptotic auxiliary functions above.
/// Absolute accuracy is better than 1e-8 in f64.
pub fn sine_integral<T: Real>(x: T) -> T {
    let ax = x.abs();
    let sign = if x < T::zero() { -T::one() } else { T::one() };
    let v = if ax <= T::lit(16.0) {
        // sum_k (-1)^k x^(2k+1) / ((2k+1) (2k+1)!)
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut k = 0usize;
        loop {
            let kk = T::from_usize_lossy(k);
            let two = T::lit(2.0);
            let n2 = two * kk + two;
            let n3 = two * kk + T::lit(3.0);
            // term_k = (-1)^k x^(2k+1)/(2k+1)! ; contribution term_k / (2k+1)
            term = -term * x2 / (n2 * n3);
            let contrib = term / n3;
            sum = sum + contrib;
            k += 1;
            if contrib.abs() < T::epsilon() * T::lit(1e-3) || k > 200 {
                break;
            }
        }
        sum
    } else {
        // Si(x) = pi/2 - f(x) cos x - g(x) sin x
        let inv = T::one() / ax;
        let inv2 = inv * inv;
        let mut f = T::zero();
        let mut g = T::zero();
        let mut tf = inv;
        let mut tg = inv2;
        for k in 0..12usize {
            f = f + tf;
            g = g + tg;
            let a = T::from_usize_lossy(2 * k + 1);
            let b = T::from_usize_lossy(2 * k + 2);
            let c = T::from_usize_lossy(2 * k + 3);
            let tf_next = -tf * a * b * inv2;
            let tg_next = -tg * b * c * inv2;
            if tf_next.abs() > tf.abs() {
                break;
            }
            tf = tf_next;
            tg = tg_next;
        }
        T::FRAC_PI_2() - f * ax.cos() - g * ax.sin()
    };
    sign * v
}
