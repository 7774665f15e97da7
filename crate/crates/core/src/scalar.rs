//! Scalar types that user fields are evaluated on.
//!
//! A field is written once, generically over [`Scalar`], and can then be
//! evaluated on plain floats or on nested dual numbers. Nesting `k` duals
//! yields exact mixed derivatives up to order `k` along `k` seeded
//! directions, which is all the constraint algorithm needs.
//!
//! The nesting is bounded: every concrete scalar names its successor in the
//! tower through [`Scalar::Up`], and the top of each tower is its own
//! successor. Seeding at the top panics, so callers check
//! [`Scalar::DEPTH`] against [`MAX_DEPTH`] before recursing.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra as na;
use num_traits::{One, Zero};

use crate::autodiff::DynField;

/// Base floating point type: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + na::RealField
    + Copy
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Arithmetic and the fixed set of elementary functions.
///
/// Comparison is deliberately absent: fields must not branch on values.
pub trait ScalarOps:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    type Real: Real;

    fn from_real(r: Self::Real) -> Self;
    fn from_f64(r: f64) -> Self;
    /// Primal value.
    fn re(&self) -> Self::Real;
    fn scale(self, k: Self::Real) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: Self::Real) -> Self;

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn square(self) -> Self {
        self * self
    }
}

/// A member of a differentiation tower.
pub trait Scalar: ScalarOps {
    /// The dual number over `Self`, or `Self` at the top of the tower.
    type Up: Scalar<Real = Self::Real>;
    /// Number of nested dual layers.
    const DEPTH: usize;

    /// `re + eps·ε` in the successor type.
    fn make_up(re: Self, eps: Self) -> Self::Up;
    /// Inverse of [`Scalar::make_up`].
    fn split_up(u: Self::Up) -> (Self, Self);
    /// Evaluates a type-erased field on this scalar type.
    fn call(f: &dyn DynField, x: &[Self]) -> Self;
}

/// Deepest nesting available in the `f64` tower.
pub const MAX_DEPTH: usize = 7;

/// Deepest nesting available in the `f32` tower.
pub const MAX_DEPTH_F32: usize = 2;

macro_rules! float_ops {
    ($t:ty) => {
        impl ScalarOps for $t {
            type Real = $t;

            #[inline]
            fn from_real(r: $t) -> Self {
                r
            }
            #[inline]
            fn from_f64(r: f64) -> Self {
                r as $t
            }
            #[inline]
            fn re(&self) -> $t {
                *self
            }
            #[inline]
            fn scale(self, k: $t) -> Self {
                self * k
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn powf(self, e: $t) -> Self {
                <$t>::powf(self, e)
            }
        }
    };
}

float_ops!(f32);
float_ops!(f64);

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: ScalarOps> Dual<S> {
    #[inline]
    pub fn new(re: S, eps: S) -> Self {
        Self { re, eps }
    }

    #[inline]
    pub fn constant(re: S) -> Self {
        Self { re, eps: S::zero() }
    }

    #[inline]
    pub fn variable(re: S) -> Self {
        Self { re, eps: S::one() }
    }

    #[inline]
    fn chain(self, f: S, df: S) -> Self {
        Self { re: f, eps: self.eps * df }
    }
}

impl<S: ScalarOps> Zero for Dual<S> {
    #[inline]
    fn zero() -> Self {
        Self::constant(S::zero())
    }
    #[inline]
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<S: ScalarOps> One for Dual<S> {
    #[inline]
    fn one() -> Self {
        Self::constant(S::one())
    }
}

impl<S: ScalarOps> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl<S: ScalarOps> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl<S: ScalarOps> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self { re: self.re * o.re, eps: self.re * o.eps + self.eps * o.re }
    }
}

impl<S: ScalarOps> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let re = self.re / o.re;
        Self { re, eps: (self.eps - re * o.eps) / o.re }
    }
}

impl<S: ScalarOps> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { re: -self.re, eps: -self.eps }
    }
}

impl<S: ScalarOps> AddAssign for Dual<S> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: ScalarOps> SubAssign for Dual<S> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<S: ScalarOps> MulAssign for Dual<S> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<S: ScalarOps> Sum for Dual<S> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<S: ScalarOps> ScalarOps for Dual<S> {
    type Real = S::Real;

    #[inline]
    fn from_real(r: S::Real) -> Self {
        Self::constant(S::from_real(r))
    }
    #[inline]
    fn from_f64(r: f64) -> Self {
        Self::constant(S::from_f64(r))
    }
    #[inline]
    fn re(&self) -> S::Real {
        self.re.re()
    }
    #[inline]
    fn scale(self, k: S::Real) -> Self {
        Self { re: self.re.scale(k), eps: self.eps.scale(k) }
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, S::one() - t * t)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        let half = <S::Real as num_traits::Float>::recip(S::Real::one() + S::Real::one());
        self.chain(s, s.recip().scale(half))
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        match n {
            0 => Self::one(),
            1 => self,
            2 => self * self,
            _ => {
                let k = <S::Real as num_traits::FromPrimitive>::from_i32(n).unwrap_or_else(S::Real::zero);
                self.chain(self.re.powi(n), self.re.powi(n - 1).scale(k))
            }
        }
    }
    #[inline]
    fn powf(self, e: S::Real) -> Self {
        self.chain(self.re.powf(e), self.re.powf(e - S::Real::one()).scale(e))
    }
}

// Tower links. `call` routes a type-erased field to the method for the
// concrete scalar type.
macro_rules! tower {
    ($($t:ty => $up:ty, $depth:expr, $method:ident;)*) => {
        $(
            impl Scalar for $t {
                type Up = $up;
                const DEPTH: usize = $depth;

                #[inline]
                fn make_up(re: Self, eps: Self) -> $up {
                    Dual { re, eps }
                }
                #[inline]
                fn split_up(u: $up) -> (Self, Self) {
                    (u.re, u.eps)
                }
                #[inline]
                fn call(f: &dyn DynField, x: &[Self]) -> Self {
                    f.$method(x)
                }
            }
        )*
    };
}

macro_rules! tower_top {
    ($t:ty, $depth:expr, $method:ident) => {
        impl Scalar for $t {
            type Up = $t;
            const DEPTH: usize = $depth;

            fn make_up(_re: Self, _eps: Self) -> $t {
                panic!("differentiation depth exceeded (maximum nesting {})", $depth)
            }
            fn split_up(_u: $t) -> (Self, Self) {
                panic!("differentiation depth exceeded (maximum nesting {})", $depth)
            }
            #[inline]
            fn call(f: &dyn DynField, x: &[Self]) -> Self {
                f.$method(x)
            }
        }
    };
}

/// `f64` tower: `D1 = Dual<f64>`, `D2 = Dual<D1>`, ...
pub type D1 = Dual<f64>;
pub type D2 = Dual<D1>;
pub type D3 = Dual<D2>;
pub type D4 = Dual<D3>;
pub type D5 = Dual<D4>;
pub type D6 = Dual<D5>;
pub type D7 = Dual<D6>;

tower! {
    f64 => D1, 0, eval_d0;
    D1 => D2, 1, eval_d1;
    D2 => D3, 2, eval_d2;
    D3 => D4, 3, eval_d3;
    D4 => D5, 4, eval_d4;
    D5 => D6, 5, eval_d5;
    D6 => D7, 6, eval_d6;
}
tower_top!(D7, 7, eval_d7);

/// `f32` tower, shallow: enough for gradients and Hessians.
pub type F1 = Dual<f32>;
pub type F2 = Dual<F1>;

tower! {
    f32 => F1, 0, eval_f0;
    F1 => F2, 1, eval_f1;
}
tower_top!(F2, 2, eval_f2);

/// Seeds `x + ε·dir` one level up the tower.
#[inline]
pub fn seed<S: Scalar>(x: &[S], dir: &[S]) -> Vec<S::Up> {
    debug_assert_eq!(x.len(), dir.len());
    x.iter().zip(dir).map(|(&a, &d)| S::make_up(a, d)).collect()
}

/// Lifts values one level up the tower as constants.
#[inline]
pub fn lift<S: Scalar>(x: &[S]) -> Vec<S::Up> {
    x.iter().map(|&a| S::make_up(a, S::zero())).collect()
}

/// Unit direction `e_i` of length `m`.
pub fn unit<S: ScalarOps>(m: usize, i: usize) -> Vec<S> {
    let mut e = vec![S::zero(); m];
    e[i] = S::one();
    e
}

/// Converts plain values into any scalar of the tower.
pub fn constants<S: ScalarOps>(x: &[f64]) -> Vec<S> {
    x.iter().map(|&a| S::from_f64(a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = D1::variable(3.0);
        let y = x * x * x;
        assert_eq!(y.re, 27.0);
        assert_eq!(y.eps, 27.0);
    }

    #[test]
    fn nested_second_derivative() {
        // d²/dx² of x³ at 2 is 12
        let x = D2::new(D1::new(2.0, 1.0), D1::new(1.0, 0.0));
        let y = x.powi(3);
        assert_eq!(y.eps.eps, 12.0);
        assert_eq!(y.re.eps, 12.0);
        assert_eq!(y.eps.re, 12.0);
    }

    #[test]
    fn elementary_derivatives() {
        let x = D1::variable(0.3);
        assert!((x.exp().eps - 0.3f64.exp()).abs() < 1e-15);
        assert!((x.ln().eps - 1.0 / 0.3).abs() < 1e-14);
        assert!((x.sin().eps - 0.3f64.cos()).abs() < 1e-15);
        assert!((x.cos().eps + 0.3f64.sin()).abs() < 1e-15);
        let t = 0.3f64.tanh();
        assert!((x.tanh().eps - (1.0 - t * t)).abs() < 1e-15);
        assert!((x.sqrt().eps - 0.5 / 0.3f64.sqrt()).abs() < 1e-15);
        assert!((x.powf(2.5).eps - 2.5 * 0.3f64.powf(1.5)).abs() < 1e-15);
        assert!((x.powi(-2).eps + 2.0 / 0.027).abs() < 1e-11);
        assert!(((x / (x + D1::one())).eps - 1.0 / 1.69).abs() < 1e-15);
    }

    #[test]
    fn ln_outside_domain_is_not_finite() {
        let x = D1::variable(-1.0);
        assert!(!x.ln().re.is_finite());
    }

    #[test]
    #[should_panic(expected = "depth exceeded")]
    fn top_of_tower_refuses_to_seed() {
        let _ = <D7 as Scalar>::make_up(D7::zero(), D7::one());
    }

    #[test]
    fn f32_tower_links() {
        let x = F1::variable(2.0f32);
        assert_eq!(x.powi(2).eps, 4.0);
        assert_eq!(<F1 as Scalar>::DEPTH, 1);
    }
}
