//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }

    /// `ln(2π)`.
    #[inline]
    fn ln_2pi() -> Self {
        Self::lit((2.0 * std::f64::consts::PI).ln())
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Max-subtraction logsumexp over a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    log_sum_exp_iter(values.iter().copied())
}

/// Same as [`log_sum_exp`] for any re-iterable source.
pub fn log_sum_exp_iter<T: Real, I>(values: I) -> T
where
    I: Iterator<Item = T> + Clone,
{
    let max = values.clone().fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let sum: T = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-density of a standard normal vector.
#[inline]
pub fn std_normal_logpdf<T: Real>(z: &[T]) -> T {
    let half = T::lit(0.5);
    let sq: T = z.iter().map(|&v| v * v).sum();
    -half * T::from_usize(z.len()).unwrap() * T::ln_2pi() - half * sq
}
