//! The unified (Skinner–Rusk) space in coordinates.
//!
//! Points of `W₀` carry `(t, q, v, p)`; the energy momentum is eliminated as
//! `p_energy = L − pᵢvⁱ`. This module provides the coupling function, the
//! forms `Θ₀` and `Ω₀`, the primary constraints cutting out `W₁`, and the
//! solution of `i(X₀)Ω₀ = 0`, `i(X₀)dt = 1` for the dynamical vector field.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::dir_deriv;
use crate::error::{Error, Result};
use crate::lagrangian::{euler_lagrange_rhs, legendre_restricted, velocity_hessian, LagrangianSystem};
use crate::linalg::SortedSvd;

/// Absolute tolerance on the primary constraints for a point to count as
/// lying on `W₁`.
pub const ON_W1_TOL: f64 = 1e-8;

/// A point `(t, q, v, p)` of `W₀`. Membership in `W₁` is not assumed.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedPoint {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub p: DVector<f64>,
}

impl UnifiedPoint {
    pub fn new(t: f64, q: &[f64], v: &[f64], p: &[f64]) -> Self {
        assert!(q.len() == v.len() && v.len() == p.len(), "q, v, p must have equal length");
        Self { t, q: DVector::from_row_slice(q), v: DVector::from_row_slice(v), p: DVector::from_row_slice(p) }
    }

    /// The point over `(t, q, v)` on the graph of the Legendre map.
    pub fn on_w1(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64]) -> Result<Self> {
        let p = legendre_restricted(sys, t, q, v)?;
        Ok(Self { t, q: DVector::from_row_slice(q), v: DVector::from_row_slice(v), p })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// Coordinates in the order `(t, q, v, p)`.
    pub fn coords(&self) -> Vec<f64> {
        let n = self.n();
        let mut x = Vec::with_capacity(3 * n + 1);
        x.push(self.t);
        x.extend(self.q.iter());
        x.extend(self.v.iter());
        x.extend(self.p.iter());
        x
    }

    pub fn from_coords(x: &[f64]) -> Self {
        assert!(!x.is_empty() && (x.len() - 1).is_multiple_of(3), "expected 3n+1 coordinates");
        let n = (x.len() - 1) / 3;
        Self::new(x[0], &x[1..1 + n], &x[1 + n..1 + 2 * n], &x[1 + 2 * n..])
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.coords().iter().all(|c| c.is_finite())
    }
}

/// A point `(t, q, v, p_energy, p)` of the extended space `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedPoint {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub p_energy: f64,
    pub p: DVector<f64>,
}

/// Embeds `W₀` into `W` with `p_energy = L − pᵢvⁱ`.
pub fn embed(sys: &LagrangianSystem, pt: &UnifiedPoint) -> Result<ExtendedPoint> {
    let l = sys.eval(pt.t, pt.q.as_slice(), pt.v.as_slice())?;
    Ok(ExtendedPoint { t: pt.t, q: pt.q.clone(), v: pt.v.clone(), p_energy: l - pt.p.dot(&pt.v), p: pt.p.clone() })
}

/// The coupling function `Ĉ = p_energy + pᵢvⁱ`.
pub fn coupling(pt: &ExtendedPoint) -> f64 {
    pt.p_energy + pt.p.dot(&pt.v)
}

/// `Ĉ − L`; zero exactly on `W₀`.
pub fn w0_residual(sys: &LagrangianSystem, pt: &ExtendedPoint) -> Result<f64> {
    Ok(coupling(pt) - sys.eval(pt.t, pt.q.as_slice(), pt.v.as_slice())?)
}

/// Coefficients of `Θ₀ = (L − pᵢvⁱ)dt + pᵢdqⁱ`: `(dt, dq)`.
pub fn theta0(sys: &LagrangianSystem, pt: &UnifiedPoint) -> Result<(f64, DVector<f64>)> {
    let l = sys.eval(pt.t, pt.q.as_slice(), pt.v.as_slice())?;
    Ok((l - pt.p.dot(&pt.v), pt.p.clone()))
}

/// Gradient of `L` in packed `(t, q, v)` order.
fn lagrangian_gradient(sys: &LagrangianSystem, pt: &UnifiedPoint) -> Result<DVector<f64>> {
    let x = sys.pack(pt.t, pt.q.as_slice(), pt.v.as_slice());
    let m = x.len();
    let g = DVector::from_iterator(
        m,
        (0..m).map(|k| {
            let mut d = vec![0.0; m];
            d[k] = 1.0;
            dir_deriv(sys.lagrangian(), &x, &d)
        }),
    );
    if g.iter().all(|c| c.is_finite()) {
        Ok(g)
    } else {
        Err(Error::Domain("gradient of L"))
    }
}

/// `M_ab = Ω₀(∂_a, ∂_b)` in the order `(t, q, v, p)`, for
/// `Ω₀ = dE∧dt − dpᵢ∧dqⁱ` with `E = pᵢvⁱ − L`.
pub fn omega0_matrix(sys: &LagrangianSystem, pt: &UnifiedPoint) -> Result<DMatrix<f64>> {
    let n = sys.n();
    let dl = lagrangian_gradient(sys, pt)?;
    let dim = 3 * n + 1;
    let mut de = DVector::zeros(dim);
    de[0] = -dl[0];
    for i in 0..n {
        de[1 + i] = -dl[1 + i];
        de[1 + n + i] = pt.p[i] - dl[1 + n + i];
        de[1 + 2 * n + i] = pt.v[i];
    }
    let mut m = DMatrix::zeros(dim, dim);
    for a in 1..dim {
        m[(a, 0)] = de[a];
        m[(0, a)] = -de[a];
    }
    for i in 0..n {
        let (qi, pi) = (1 + i, 1 + 2 * n + i);
        m[(pi, qi)] = -1.0;
        m[(qi, pi)] = 1.0;
    }
    Ok(m)
}

/// `φᵢ = pᵢ − ∂L/∂vⁱ`; the point lies on `W₁` iff all vanish.
pub fn primary_constraints(sys: &LagrangianSystem, pt: &UnifiedPoint) -> Result<DVector<f64>> {
    Ok(&pt.p - legendre_restricted(sys, pt.t, pt.q.as_slice(), pt.v.as_slice())?)
}

/// Components of `X₀ = ∂_t + Fⁱ∂_{qⁱ} + Gⁱ∂_{vⁱ} + Hᵢ∂_{pᵢ}` at a point.
///
/// The `G` components are determined only up to the kernel of the velocity
/// Hessian: every `G = g_particular + Σ λⱼ g_kernel[j]` solves the tangency
/// system as well as `g_particular` does.
#[derive(Clone, Debug)]
pub struct VectorFieldSolution {
    /// Always 1.
    pub f: f64,
    /// Holonomy: a copy of the point's `v`.
    pub big_f: DVector<f64>,
    /// Minimum-norm least-squares solution of `W·G = b`.
    pub g_particular: DVector<f64>,
    /// Orthonormal basis of `ker W`.
    pub g_kernel: Vec<DVector<f64>>,
    /// `Hᵢ = ∂L/∂qⁱ`.
    pub h: DVector<f64>,
    /// `|W·G_particular − b|`.
    pub consistency_defect: f64,
    /// The velocity Hessian `W`.
    pub velocity_hessian: DMatrix<f64>,
    /// The tangency right-hand side `b`.
    pub rhs: DVector<f64>,
}

impl VectorFieldSolution {
    /// `G` for free coefficients `λ`.
    pub fn g(&self, lambda: &[f64]) -> DVector<f64> {
        assert_eq!(lambda.len(), self.g_kernel.len(), "one coefficient per kernel direction");
        let mut g = self.g_particular.clone();
        for (l, k) in lambda.iter().zip(&self.g_kernel) {
            g.axpy(*l, k, 1.0);
        }
        g
    }

    /// The full vector `(1, F, G(λ), H)` in `(t, q, v, p)` order.
    pub fn direction(&self, lambda: &[f64]) -> Vec<f64> {
        self.direction_with_g(&self.g(lambda))
    }

    pub(crate) fn direction_with_g(&self, g: &DVector<f64>) -> Vec<f64> {
        let mut d = Vec::with_capacity(1 + 3 * self.big_f.len());
        d.push(self.f);
        d.extend(self.big_f.iter());
        d.extend(g.iter());
        d.extend(self.h.iter());
        d
    }

    pub fn kernel_dim(&self) -> usize {
        self.g_kernel.len()
    }
}

/// Solves for `X₀` without checking that the point lies on `W₁`.
pub(crate) fn vector_field_unchecked(
    sys: &LagrangianSystem,
    pt: &UnifiedPoint,
    rank_tol: f64,
) -> Result<VectorFieldSolution> {
    let (t, q, v) = (pt.t, pt.q.as_slice(), pt.v.as_slice());
    let w = velocity_hessian(sys, t, q, v)?;
    let b = euler_lagrange_rhs(sys, t, q, v)?;
    let x = sys.pack(t, q, v);
    let h = DVector::from_iterator(sys.n(), (0..sys.n()).map(|i| sys.dl_dq(&x, i)));
    if !h.iter().all(|c| c.is_finite()) {
        return Err(Error::Domain("∂L/∂q"));
    }
    let svd = SortedSvd::new(&w);
    let g_particular = svd.solve_min_norm(&b, rank_tol);
    let g_kernel = svd.kernel(rank_tol);
    let consistency_defect = (&w * &g_particular - &b).norm();
    Ok(VectorFieldSolution {
        f: 1.0,
        big_f: pt.v.clone(),
        g_particular,
        g_kernel,
        h,
        consistency_defect,
        velocity_hessian: w,
        rhs: b,
    })
}

/// Solves `i(X₀)Ω₀ = 0`, `i(X₀)dt = 1` at a point of `W₁`.
///
/// `f = 1`, `F = v` and `H = ∂L/∂q` come out directly; `G` solves the
/// tangency condition `X₀(pᵢ − ∂L/∂vⁱ) = 0`, i.e. `W·G = b`.
pub fn solve_vector_field(sys: &LagrangianSystem, pt: &UnifiedPoint, rank_tol: f64) -> Result<VectorFieldSolution> {
    let phi = primary_constraints(sys, pt)?;
    let r = phi.amax();
    if r > ON_W1_TOL {
        return Err(Error::NotOnW1(r));
    }
    vector_field_unchecked(sys, pt, rank_tol)
}

/// The `dt` coefficient of `i(X₀)Ω₀`:
/// `−Fⁱ∂L/∂qⁱ + Gⁱ(pᵢ − ∂L/∂vⁱ) + Hᵢvⁱ`.
pub fn eq_four_residual(
    sys: &LagrangianSystem,
    pt: &UnifiedPoint,
    sol: &VectorFieldSolution,
    g: &DVector<f64>,
) -> Result<f64> {
    let phi = primary_constraints(sys, pt)?;
    let x = sys.pack(pt.t, pt.q.as_slice(), pt.v.as_slice());
    let dlq = DVector::from_iterator(sys.n(), (0..sys.n()).map(|i| sys.dl_dq(&x, i)));
    Ok(-sol.big_f.dot(&dlq) + g.dot(&phi) + sol.h.dot(&pt.v))
}
