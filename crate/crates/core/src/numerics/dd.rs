//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! ~106 significant bits) and the scalar trait the forward kernels are
//! written against.
//!
//! Only used to evaluate objectives for finite differences, where the
//! rounding jitter of plain `f64` swamps small gradients.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type a forward kernel can run on.
pub(crate) trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn c(x: f64) -> Self;
    fn hi(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::c(0.0)
    }

    fn max(self, o: Self) -> Self {
        if o > self {
            o
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn hi(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn max(self, o: Self) -> Self {
        f64::max(self, o)
    }
}

pub(crate) fn sum<R: Real>(xs: impl IntoIterator<Item = R>) -> R {
    xs.into_iter().fold(R::zero(), |a, b| a + b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
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
    // Dekker's split; `mul_add` lowers to a software fma on baseline x86-64
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a; // 2^27 + 1
    let hi = t - (t - a);
    (hi, a - hi)
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    #[inline]
    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::new(p, e + self.lo * b)
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, o: Dd) -> Dd {
        // "sloppy" addition: absolute error ~2^-106 of the larger operand,
        // which is what finite differences need, at half the cost
        let (s, e) = two_sum(self.hi, o.hi);
        Dd::new(s, e + (self.lo + o.lo))
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::new(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() {
            return Dd { hi: q1, lo: 0.0 };
        }
        let r = self - o.mul_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o.mul_f64(q2);
        let q3 = r.hi / o.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd { hi: q3, lo: 0.0 }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&o.lo),
            ord => Some(ord),
        }
    }
}

/// `1/i` in double-double for i in 0..=11 (entries 0 and 1 unused).
fn inverse_integers() -> &'static [Dd; 12] {
    static INV: std::sync::OnceLock<[Dd; 12]> = std::sync::OnceLock::new();
    INV.get_or_init(|| std::array::from_fn(|i| Dd::c(1.0) / Dd::c(i.max(1) as f64)))
}

impl Real for Dd {
    #[inline]
    fn c(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    fn hi(self) -> f64 {
        self.hi
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::c(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::zero();
        }
        // x = k ln2 + r, then exp(r) via expm1 on r / 2^10 and ten squarings
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.mul_f64(k)).scale_pow2(-10);
        let mut term = r;
        let mut s = r;
        for inv in &inverse_integers()[2..=9] {
            term = term * r * *inv;
            s = s + term;
        }
        for _ in 0..10 {
            s = s.mul_f64(2.0) + s * s;
        }
        (s + Dd::c(1.0)).scale_pow2(k as i32)
    }

    fn ln(self) -> Self {
        if !(self.hi > 0.0) {
            return Dd::c(f64::ln(self.hi));
        }
        // one Newton step on exp(y) = x doubles the f64 starting accuracy
        let y = Dd::c(self.hi.ln());
        y + self * (-y).exp() - Dd::c(1.0)
    }

    fn tanh(self) -> Self {
        if self.hi.abs() > 20.0 {
            return Dd::c(self.hi.signum());
        }
        let e = (self + self).exp();
        (e - Dd::c(1.0)) / (e + Dd::c(1.0))
    }

    fn sqrt(self) -> Self {
        if !(self.hi > 0.0) {
            return Dd::c(self.hi.sqrt());
        }
        let a = self.hi.sqrt();
        let (p, e) = two_prod(a, a);
        let r = ((self.hi - p) - e + self.lo) / (2.0 * a);
        Dd::new(a, r)
    }
}
