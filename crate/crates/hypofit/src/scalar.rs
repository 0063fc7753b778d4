//! Forward-mode automatic differentiation on a generic scalar.
//!
//! Everything numerical in this crate (drift evaluators, covariance
//! expansions, the contrast itself) is written once, generically over a
//! [`Scalar`]. Instantiated at `f64` it computes plain values; instantiated
//! at [`Dual<M>`] it simultaneously carries derivatives with respect to up
//! to `M` parameters, so gradients fall out of the same code path that
//! produces values.
//!
//! A dual number is `a + Σ_k ε_k a'_k` with `ε_j ε_k = 0`; arithmetic on the
//! `re` part is ordinary `f64` arithmetic, and the partials follow the chain
//! rule. With `M = 4` (enough for every built-in model, which have at most
//! four parameters) a dual is five machine words on the stack.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number-like type the numerical kernels are generic over.
///
/// `value()` exposes the underlying `f64` for branching (comparisons,
/// positivity checks); the branch outcome is treated as locally constant,
/// which is the usual forward-AD convention.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// Lift a constant. Constants carry no derivative.
    fn c(v: f64) -> Self;
    /// The plain value, discarding any derivative information.
    fn value(self) -> f64;
    /// Multiply by a constant (cheaper than `self * Self::c(k)` for duals).
    fn scale(self, k: f64) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    /// Integer power by repeated squaring on the value, chain rule on top.
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::c(0.0)
    }
    fn one() -> Self {
        Self::c(1.0)
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    /// `true` when the value part is finite (partials are not inspected).
    fn is_finite_value(self) -> bool {
        self.value().is_finite()
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self
    }
    #[inline(always)]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Dual number with `M` independent derivative lanes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const M: usize> {
    pub re: f64,
    pub dx: [f64; M],
}

/// Four derivative lanes: enough for every built-in model's parameter vector.
pub type Dual4 = Dual<4>;

impl<const M: usize> Dual<M> {
    /// The `i`-th independent variable: value `v`, unit derivative in lane `i`.
    #[inline]
    pub fn var(v: f64, i: usize) -> Self {
        let mut dx = [0.0; M];
        dx[i] = 1.0;
        Dual { re: v, dx }
    }

    /// Lift a parameter vector so lane `k` differentiates with respect to
    /// `theta[k]`. Lanes beyond `theta.len()` stay unused.
    pub fn seed(theta: &[f64]) -> Vec<Self> {
        assert!(theta.len() <= M, "more parameters than derivative lanes");
        theta.iter().enumerate().map(|(i, &v)| Self::var(v, i)).collect()
    }
}

impl<const M: usize> Add for Dual<M> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] += rhs.dx[k];
        }
        Dual { re: self.re + rhs.re, dx }
    }
}

impl<const M: usize> Sub for Dual<M> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] -= rhs.dx[k];
        }
        Dual { re: self.re - rhs.re, dx }
    }
}

impl<const M: usize> Mul for Dual<M> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        let mut dx = [0.0; M];
        for k in 0..M {
            dx[k] = self.dx[k] * rhs.re + self.re * rhs.dx[k];
        }
        Dual { re: self.re * rhs.re, dx }
    }
}

impl<const M: usize> Div for Dual<M> {
    type Output = Self;
    #[inline(always)]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut dx = [0.0; M];
        for k in 0..M {
            dx[k] = (self.dx[k] - re * rhs.dx[k]) * inv;
        }
        Dual { re, dx }
    }
}

impl<const M: usize> Neg for Dual<M> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] = -dx[k];
        }
        Dual { re: -self.re, dx }
    }
}

impl<const M: usize> AddAssign for Dual<M> {
    #[inline(always)]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<const M: usize> SubAssign for Dual<M> {
    #[inline(always)]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<const M: usize> MulAssign for Dual<M> {
    #[inline(always)]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const M: usize> Scalar for Dual<M> {
    #[inline(always)]
    fn c(v: f64) -> Self {
        Dual { re: v, dx: [0.0; M] }
    }

    #[inline(always)]
    fn value(self) -> f64 {
        self.re
    }

    #[inline(always)]
    fn scale(self, k: f64) -> Self {
        let mut dx = self.dx;
        for j in 0..M {
            dx[j] *= k;
        }
        Dual { re: self.re * k, dx }
    }

    #[inline]
    fn ln(self) -> Self {
        let inv = 1.0 / self.re;
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] *= inv;
        }
        Dual { re: self.re.ln(), dx }
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] *= e;
        }
        Dual { re: e, dx }
    }

    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        let half = 0.5 / s;
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] *= half;
        }
        Dual { re: s, dx }
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        let g = (n as f64) * self.re.powi(n - 1);
        let mut dx = self.dx;
        for k in 0..M {
            dx[k] *= g;
        }
        Dual { re: self.re.powi(n), dx }
    }
}

/// Compensated (Kahan) accumulator, generic over the scalar so dual partials
/// receive the same compensation as the value lane.
///
/// Long contrast sums run over up to n ≈ 2.5·10⁵ per-step terms; naive
/// summation loses digits that the order-comparison tests actually resolve.
#[derive(Clone, Copy, Debug)]
pub struct KahanSum<S: Scalar> {
    sum: S,
    carry: S,
}

impl<S: Scalar> Default for KahanSum<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> KahanSum<S> {
    pub fn new() -> Self {
        KahanSum { sum: S::zero(), carry: S::zero() }
    }

    #[inline(always)]
    pub fn add(&mut self, term: S) {
        let y = term - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn total(&self) -> S {
        self.sum
    }
}
