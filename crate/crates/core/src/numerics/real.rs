//! Scalar abstraction so reference computations can run in `f64` or in
//! double-double (about 106 significant bits).

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + fmt::Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn relu(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl DoubleDouble {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn mul_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self::new(self.hi * s, self.lo * s)
    }
}

impl From<f64> for DoubleDouble {
    fn from(v: f64) -> Self {
        Self::new(v, 0.0)
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self::new(hi, lo)
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.hi, -self.lo)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self::new(hi, lo)
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self - o * Self::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Self::from(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self::new(hi, lo) + Self::from(q3)
    }
}

impl Real for DoubleDouble {
    fn from_f64(v: f64) -> Self {
        Self::from(v)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::from(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Self::from(k)).mul_pow2(-5);
        // Taylor series on |r| < 2^-5 converges to full precision in ~16 terms.
        let mut term = Self::one();
        let mut sum = Self::one();
        for n in 1..=30 {
            term = term * r / Self::from(n as f64);
            sum += term;
            if term.hi.abs() < 1e-36 * sum.hi.abs() {
                break;
            }
        }
        for _ in 0..5 {
            sum = sum * sum;
        }
        sum.mul_pow2(k as i32)
    }

    fn ln(self) -> Self {
        if self.hi.is_nan() || self.hi <= 0.0 {
            return Self::from(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        // Newton on exp(y) = x; each step doubles the correct digits.
        let mut y = Self::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::one();
        }
        y
    }

    fn tanh(self) -> Self {
        if self.hi == 0.0 {
            return self;
        }
        let a = if self.hi < 0.0 { -self } else { self };
        let t = (a.mul_pow2(1)).exp();
        let small = a.hi < 0.25;
        let num = if small {
            expm1_small(a.mul_pow2(1))
        } else {
            t - Self::one()
        };
        let out = num / (t + Self::one());
        if self.hi < 0.0 {
            -out
        } else {
            out
        }
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from(self.hi.sqrt());
        }
        let q = self.hi.sqrt();
        let (p, e) = two_prod(q, q);
        let r = self - Self::new(p, e);
        Self::from(q) + Self::from(r.hi / (2.0 * q))
    }
}

/// `exp(x) - 1` without cancellation for small `x`.
fn expm1_small(x: DoubleDouble) -> DoubleDouble {
    let mut term = x;
    let mut sum = x;
    for n in 2..=40 {
        term = term * x / DoubleDouble::from(n as f64);
        sum += term;
        if term.hi.abs() < 1e-36 * sum.hi.abs() {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(v: f64) -> DoubleDouble {
        DoubleDouble::from(v)
    }

    #[test]
    fn arithmetic_keeps_low_word() {
        let x = dd(1.0) + dd(1e-20);
        assert_eq!(x.hi(), 1.0);
        assert_eq!(x.lo(), 1e-20);
        let y = x - dd(1.0);
        assert_eq!(y.to_f64(), 1e-20);
        let third = dd(1.0) / dd(3.0);
        let back = third * dd(3.0) - dd(1.0);
        assert!(back.to_f64().abs() < 1e-31);
    }

    #[test]
    fn transcendental_identities() {
        for &v in &[-3.7, -0.5, -1e-3, 1e-7, 0.3, 1.0, 2.5, 12.0] {
            let x = dd(v);
            let roundtrip = x.exp().ln() - x;
            assert!(
                roundtrip.to_f64().abs() < 1e-30 * v.abs().max(1.0).powi(2),
                "ln(exp({v})) off by {:e}",
                roundtrip.to_f64()
            );
            let s = x.tanh();
            assert!((s.to_f64() - v.tanh()).abs() <= 2.0 * f64::EPSILON * v.tanh().abs().max(1e-300));
            // tanh(2x) = 2 tanh(x) / (1 + tanh(x)^2)
            let lhs = (x * dd(2.0)).tanh();
            let rhs = dd(2.0) * s / (dd(1.0) + s * s);
            assert!((lhs - rhs).to_f64().abs() < 1e-30, "tanh doubling at {v}");
        }
        let two = dd(2.0);
        let r = two.sqrt();
        assert!((r * r - two).to_f64().abs() < 1e-31);
        assert!((dd(1.0).exp().to_f64() - std::f64::consts::E).abs() <= f64::EPSILON);
        let e = dd(1.0).exp();
        let reference = DoubleDouble::new(std::f64::consts::E, 1.445_646_891_729_250_2e-16);
        assert!(
            (e - reference).to_f64().abs() < 1e-29,
            "e off by {:e}",
            (e - reference).to_f64()
        );
    }

    #[test]
    fn f64_instance_matches_std() {
        assert_eq!(<f64 as Real>::tanh(0.5), 0.5f64.tanh());
        assert_eq!(<f64 as Real>::relu(-2.0), 0.0);
        assert_eq!(<f64 as Real>::max(1.0, 3.0), 3.0);
    }
}
