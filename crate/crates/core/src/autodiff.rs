//! Exact first and second derivatives of scalar fields by forward-mode
//! differentiation on nested dual numbers.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lift, seed, unit, Real, Scalar, ScalarOps, D1, D2, D3, D4, D5, D6, D7, F1, F2};

/// A smooth scalar function of `arity` arguments, written once for every
/// scalar type.
///
/// Implementations may only use arithmetic and the elementary functions of
/// [`ScalarOps`]; derivatives are then exact.
pub trait Field: Send + Sync {
    fn arity(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

/// Object-safe face of [`Field`], one method per concrete scalar type.
///
/// Implemented for every [`Field`]; user code never implements it.
pub trait DynField: Send + Sync {
    fn arity(&self) -> usize;
    fn eval_d0(&self, x: &[f64]) -> f64;
    fn eval_d1(&self, x: &[D1]) -> D1;
    fn eval_d2(&self, x: &[D2]) -> D2;
    fn eval_d3(&self, x: &[D3]) -> D3;
    fn eval_d4(&self, x: &[D4]) -> D4;
    fn eval_d5(&self, x: &[D5]) -> D5;
    fn eval_d6(&self, x: &[D6]) -> D6;
    fn eval_d7(&self, x: &[D7]) -> D7;
    fn eval_f0(&self, x: &[f32]) -> f32;
    fn eval_f1(&self, x: &[F1]) -> F1;
    fn eval_f2(&self, x: &[F2]) -> F2;
}

impl<F: Field> DynField for F {
    fn arity(&self) -> usize {
        Field::arity(self)
    }
    fn eval_d0(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
    fn eval_d1(&self, x: &[D1]) -> D1 {
        self.eval(x)
    }
    fn eval_d2(&self, x: &[D2]) -> D2 {
        self.eval(x)
    }
    fn eval_d3(&self, x: &[D3]) -> D3 {
        self.eval(x)
    }
    fn eval_d4(&self, x: &[D4]) -> D4 {
        self.eval(x)
    }
    fn eval_d5(&self, x: &[D5]) -> D5 {
        self.eval(x)
    }
    fn eval_d6(&self, x: &[D6]) -> D6 {
        self.eval(x)
    }
    fn eval_d7(&self, x: &[D7]) -> D7 {
        self.eval(x)
    }
    fn eval_f0(&self, x: &[f32]) -> f32 {
        self.eval(x)
    }
    fn eval_f1(&self, x: &[F1]) -> F1 {
        self.eval(x)
    }
    fn eval_f2(&self, x: &[F2]) -> F2 {
        self.eval(x)
    }
}

/// Shared, type-erased smooth field.
#[derive(Clone)]
pub struct SmoothScalarField(Arc<dyn DynField>);

impl SmoothScalarField {
    pub fn new<F: Field + 'static>(f: F) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for SmoothScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SmoothScalarField(arity {})", self.0.arity())
    }
}

impl Field for SmoothScalarField {
    fn arity(&self) -> usize {
        self.0.arity()
    }
    #[inline]
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        S::call(self.0.as_ref(), x)
    }
}

/// Value, gradient and Hessian of a field at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2<R: Real> {
    pub value: R,
    pub gradient: DVector<R>,
    pub hessian: DMatrix<R>,
}

fn check_arity<F: Field + ?Sized>(f: &F, m: usize) -> Result<()> {
    if f.arity() != m {
        return Err(Error::Arity { expected: f.arity(), got: m });
    }
    Ok(())
}

fn finite<R: Real>(v: R, what: &'static str) -> Result<R> {
    if num_traits::Float::is_finite(v) {
        Ok(v)
    } else {
        Err(Error::Domain(what))
    }
}

/// Value of `f` at `x`, rejecting non-finite results.
pub fn value<F: Field + ?Sized, S: Scalar>(f: &F, x: &[S]) -> Result<S::Real> {
    check_arity(f, x.len())?;
    finite(f.eval(x).re(), "value")
}

/// Exact value, gradient and symmetric Hessian of `f` at `x`.
///
/// Each upper-triangle entry comes from one second-order nested dual pass and
/// is mirrored, so the Hessian is symmetric bit for bit.
pub fn jet2<F, S>(f: &F, x: &[S]) -> Result<Jet2<S>>
where
    F: Field + ?Sized,
    S: Real + Scalar + ScalarOps<Real = S>,
{
    let m = x.len();
    check_arity(f, m)?;
    let mut gradient = DVector::zeros(m);
    let mut hessian = DMatrix::zeros(m, m);
    let mut val = S::zero();
    for j in 0..m {
        let ej = unit::<S>(m, j);
        let inner = seed(x, &ej);
        for i in j..m {
            let outer_dir = lift(&unit::<S>(m, i));
            let y = f.eval(&seed::<S::Up>(&inner, &outer_dir));
            let (lo, hi) = <S::Up as Scalar>::split_up(y);
            let (v, gj) = S::split_up(lo);
            let (_, hij) = S::split_up(hi);
            if i == j {
                gradient[j] = finite(gj, "gradient")?;
                val = v;
            }
            let hij = finite(hij, "hessian")?;
            hessian[(i, j)] = hij;
            hessian[(j, i)] = hij;
        }
    }
    if m == 0 {
        val = f.eval(x);
    }
    Ok(Jet2 { value: finite(val, "value")?, gradient, hessian })
}

/// `∇f(x)·d` from a single dual pass.
pub fn directional_derivative<F: Field + ?Sized, S: Scalar>(f: &F, x: &[S], d: &[S]) -> Result<S::Real> {
    check_arity(f, x.len())?;
    if d.len() != x.len() {
        return Err(Error::Arity { expected: x.len(), got: d.len() });
    }
    if d.iter().any(|di| !num_traits::Float::is_finite(di.re())) {
        return Err(Error::Domain("direction"));
    }
    finite(dir_deriv(f, x, d).re(), "directional derivative")
}

/// Unchecked directional derivative, usable at every depth of the tower.
#[inline]
pub fn dir_deriv<F: Field + ?Sized, S: Scalar>(f: &F, x: &[S], d: &[S]) -> S {
    S::split_up(f.eval(&seed(x, d))).1
}

/// Unchecked second directional derivative `d₁ᵀ ∇²f d₂`.
#[inline]
pub fn dir_deriv2<F: Field + ?Sized, S: Scalar>(f: &F, x: &[S], d1: &[S], d2: &[S]) -> S {
    let inner = seed(x, d1);
    let outer = seed::<S::Up>(&inner, &lift(d2));
    let hi = <S::Up as Scalar>::split_up(f.eval(&outer)).1;
    S::split_up(hi).1
}

/// Gradient by one dual pass per coordinate.
pub fn gradient(f: &(impl Field + ?Sized), x: &[f64]) -> Result<DVector<f64>> {
    check_arity(f, x.len())?;
    let m = x.len();
    let mut g = DVector::zeros(m);
    for i in 0..m {
        g[i] = finite(dir_deriv(f, x, &unit(m, i)), "gradient")?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl Field for Square {
        fn arity(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[0] * x[0]
        }
    }

    struct Bilinear;
    impl Field for Bilinear {
        fn arity(&self) -> usize {
            2
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[0] * x[1]
        }
    }

    struct Linear;
    impl Field for Linear {
        fn arity(&self) -> usize {
            2
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[0] + S::from_f64(2.0) * x[1]
        }
    }

    struct Cube;
    impl Field for Cube {
        fn arity(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[0].powi(3)
        }
    }

    struct Log;
    impl Field for Log {
        fn arity(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[0].ln()
        }
    }

    #[test]
    fn square_jet() {
        let j = jet2(&Square, &[3.0]).unwrap();
        assert_eq!(j.value, 9.0);
        assert_eq!(j.gradient[0], 6.0);
        assert_eq!(j.hessian[(0, 0)], 2.0);
    }

    #[test]
    fn bilinear_jet() {
        let j = jet2(&Bilinear, &[2.0, 5.0]).unwrap();
        assert_eq!(j.value, 10.0);
        assert_eq!(j.gradient.as_slice(), &[5.0, 2.0]);
        assert_eq!(j.hessian, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn directional_examples() {
        assert_eq!(directional_derivative(&Linear, &[1.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(directional_derivative(&Cube, &[2.0], &[3.0]).unwrap(), 36.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(jet2(&Log, &[-1.0]), Err(Error::Domain(_))));
        assert!(matches!(directional_derivative(&Log, &[0.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(value(&Log, &[-2.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn arity_mismatch() {
        assert!(matches!(jet2(&Square, &[1.0, 2.0]), Err(Error::Arity { .. })));
        assert!(directional_derivative(&Square, &[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn type_erased_field_matches() {
        let f = SmoothScalarField::new(Bilinear);
        let a = jet2(&f, &[2.0, 5.0]).unwrap();
        let b = jet2(&Bilinear, &[2.0, 5.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(f.eval(&[2.0f32, 5.0]), 10.0f32);
    }

    #[test]
    fn f32_jet() {
        let j = jet2(&Square, &[3.0f32]).unwrap();
        assert_eq!(j.hessian[(0, 0)], 2.0f32);
    }

    #[test]
    fn second_directional_matches_hessian() {
        let j = jet2(&Bilinear, &[2.0, 5.0]).unwrap();
        let d1 = [0.3, -1.0];
        let d2 = [2.0, 0.5];
        let expect = (DVector::from_row_slice(&d1).transpose() * &j.hessian * DVector::from_row_slice(&d2))[0];
        let got: f64 = dir_deriv2(&Bilinear, &[2.0, 5.0], &d1, &d2);
        assert!((got - expect).abs() < 1e-15);
    }
}
