//! Non-autonomous Lagrangian systems on `ℝ × TQ` in coordinates `(t, q, v)`:
//! Legendre maps, velocity Hessian and regularity, the Euler–Lagrange
//! residual, and the Hamiltonian of a regular system.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::autodiff::{dir_deriv, dir_deriv2, value, Field, SmoothScalarField};
use crate::error::{Error, Result};
use crate::linalg::SortedSvd;
use crate::scalar::Scalar;

/// Relative rank tolerance for the velocity Hessian.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// A Lagrangian `L(t, q, v)` with `n` degrees of freedom.
///
/// The field takes `2n + 1` arguments in the order `(t, q¹..qⁿ, v¹..vⁿ)`.
#[derive(Clone, Debug)]
pub struct LagrangianSystem {
    n: usize,
    lagrangian: SmoothScalarField,
    name: String,
}

impl LagrangianSystem {
    pub fn new<F: Field + 'static>(name: impl Into<String>, n: usize, lagrangian: F) -> Result<Self> {
        Self::from_field(name, n, SmoothScalarField::new(lagrangian))
    }

    pub fn from_field(name: impl Into<String>, n: usize, lagrangian: SmoothScalarField) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("a system needs at least one degree of freedom".into()));
        }
        if lagrangian.arity() != 2 * n + 1 {
            return Err(Error::Arity { expected: 2 * n + 1, got: lagrangian.arity() });
        }
        Ok(Self { n, lagrangian, name: name.into() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lagrangian(&self) -> &SmoothScalarField {
        &self.lagrangian
    }

    /// `L(t, q, v)`.
    pub fn eval(&self, t: f64, q: &[f64], v: &[f64]) -> Result<f64> {
        value(&self.lagrangian, &self.pack(t, q, v))
    }

    /// Packs `(t, q, v)` into one argument vector.
    pub fn pack<S: Copy>(&self, t: S, q: &[S], v: &[S]) -> Vec<S> {
        assert_eq!(q.len(), self.n, "q has wrong length");
        assert_eq!(v.len(), self.n, "v has wrong length");
        let mut x = Vec::with_capacity(2 * self.n + 1);
        x.push(t);
        x.extend_from_slice(q);
        x.extend_from_slice(v);
        x
    }

    /// Index of `vⁱ` in the packed vector.
    #[inline]
    pub(crate) fn v_index(&self, i: usize) -> usize {
        1 + self.n + i
    }

    /// Index of `qⁱ` in the packed vector.
    #[inline]
    pub(crate) fn q_index(&self, i: usize) -> usize {
        1 + i
    }

    /// `∂L/∂vⁱ` at any depth of the scalar tower.
    #[inline]
    pub(crate) fn dl_dv<S: Scalar>(&self, x: &[S], i: usize) -> S {
        let mut d = vec![S::zero(); x.len()];
        d[self.v_index(i)] = S::one();
        dir_deriv(&self.lagrangian, x, &d)
    }

    /// `∂L/∂qⁱ` at any depth of the scalar tower.
    #[inline]
    pub(crate) fn dl_dq<S: Scalar>(&self, x: &[S], i: usize) -> S {
        let mut d = vec![S::zero(); x.len()];
        d[self.q_index(i)] = S::one();
        dir_deriv(&self.lagrangian, x, &d)
    }

    /// Directional derivative of `L` along a packed direction.
    #[inline]
    pub(crate) fn dl<S: Scalar>(&self, x: &[S], dir: &[S]) -> S {
        dir_deriv(&self.lagrangian, x, dir)
    }

    /// Right-hand side `b` of the velocity equations `W·a = b`:
    /// `bⱼ = ∂L/∂qʲ − ∂²L/∂t∂vʲ − Σᵢ ∂²L/∂qⁱ∂vʲ vⁱ`.
    pub(crate) fn el_rhs_generic<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let n = self.n;
        let mut flow = vec![S::zero(); x.len()];
        flow[0] = S::one();
        for i in 0..n {
            flow[self.q_index(i)] = x[self.v_index(i)];
        }
        (0..n)
            .map(|j| {
                let mut e = vec![S::zero(); x.len()];
                e[self.v_index(j)] = S::one();
                self.dl_dq(x, j) - dir_deriv2(&self.lagrangian, x, &e, &flow)
            })
            .collect()
    }
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(what))
    }
}

/// Restricted Legendre map `pᵢ = ∂L/∂vⁱ`.
pub fn legendre_restricted(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64]) -> Result<DVector<f64>> {
    let x = sys.pack(t, q, v);
    let p = DVector::from_iterator(sys.n(), (0..sys.n()).map(|i| sys.dl_dv(&x, i)));
    check_finite(&p, "momenta")?;
    Ok(p)
}

/// Extended Legendre map: `(L − vⁱ∂L/∂vⁱ, ∂L/∂v)`.
pub fn legendre_extended(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64]) -> Result<(f64, DVector<f64>)> {
    let p = legendre_restricted(sys, t, q, v)?;
    let l = sys.eval(t, q, v)?;
    let pv: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((l - pv, p))
}

/// `∂²L/∂vⁱ∂vʲ`, symmetric by construction.
pub fn velocity_hessian(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
    let n = sys.n();
    let x = sys.pack(t, q, v);
    let m = x.len();
    let e = |i: usize| {
        let mut d = vec![0.0; m];
        d[sys.v_index(i)] = 1.0;
        d
    };
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let ej = e(j);
        for i in j..n {
            let h = dir_deriv2(sys.lagrangian(), &x, &ej, &e(i));
            if !h.is_finite() {
                return Err(Error::Domain("velocity Hessian"));
            }
            w[(i, j)] = h;
            w[(j, i)] = h;
        }
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regularity {
    Regular,
    Singular,
}

/// Pointwise rank analysis of the velocity Hessian.
#[derive(Clone, Debug)]
pub struct RegularityReport {
    pub classification: Regularity,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Orthonormal, sign-normalized; empty when regular.
    pub kernel_basis: Vec<DVector<f64>>,
    pub tolerance_used: f64,
}

impl RegularityReport {
    pub fn from_hessian(w: &DMatrix<f64>, rank_tol: f64) -> Self {
        let svd = SortedSvd::new(w);
        let kernel_basis = svd.kernel(rank_tol);
        let classification = if kernel_basis.is_empty() { Regularity::Regular } else { Regularity::Singular };
        Self {
            classification,
            singular_values: svd.singular_values.iter().copied().collect(),
            kernel_basis,
            tolerance_used: rank_tol,
        }
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel_basis.len()
    }
}

/// Classifies the Lagrangian at a point: singular iff some singular value of
/// the velocity Hessian falls below `rank_tol·σ_max`.
pub fn regularity(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64], rank_tol: f64) -> Result<RegularityReport> {
    if rank_tol <= 0.0 {
        return Err(Error::InvalidParameter("rank_tol must be positive".into()));
    }
    let w = velocity_hessian(sys, t, q, v)?;
    Ok(RegularityReport::from_hessian(&w, rank_tol))
}

/// `b` in `W·a = b`; see [`euler_lagrange_residual`].
pub fn euler_lagrange_rhs(sys: &LagrangianSystem, t: f64, q: &[f64], v: &[f64]) -> Result<DVector<f64>> {
    let x = sys.pack(t, q, v);
    let b = DVector::from_vec(sys.el_rhs_generic(&x));
    check_finite(&b, "Euler-Lagrange right-hand side")?;
    Ok(b)
}

/// `rᵢ = Σⱼ ∂²L/∂vʲ∂vⁱ aʲ + Σⱼ ∂²L/∂qʲ∂vⁱ vʲ + ∂²L/∂t∂vⁱ − ∂L/∂qⁱ`.
pub fn euler_lagrange_residual(
    sys: &LagrangianSystem,
    t: f64,
    q: &[f64],
    v: &[f64],
    a: &[f64],
) -> Result<DVector<f64>> {
    let n = sys.n();
    let x = sys.pack(t, q, v);
    let m = x.len();
    let mut flow = vec![0.0; m];
    flow[0] = 1.0;
    for i in 0..n {
        flow[sys.q_index(i)] = v[i];
        flow[sys.v_index(i)] = a[i];
    }
    let r = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let mut e = vec![0.0; m];
            e[sys.v_index(i)] = 1.0;
            dir_deriv2(sys.lagrangian(), &x, &e, &flow) - sys.dl_dq(&x, i)
        }),
    );
    check_finite(&r, "Euler-Lagrange residual")?;
    Ok(r)
}

/// Newton settings for inverting the Legendre map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50 }
    }
}

/// Relative singular-value floor below which the Newton Jacobian counts as
/// singular.
const JACOBIAN_RANK_TOL: f64 = 1e-12;

/// Solves `∂L/∂v(t, q, v) = p` for `v` by damped Newton from `v_guess`.
pub fn legendre_invert(
    sys: &LagrangianSystem,
    t: f64,
    q: &[f64],
    p: &[f64],
    v_guess: &[f64],
    opts: NewtonOptions,
) -> Result<DVector<f64>> {
    let p = DVector::from_row_slice(p);
    let residual =
        |v: &DVector<f64>| -> Result<DVector<f64>> { Ok(legendre_restricted(sys, t, q, v.as_slice())? - &p) };
    let mut v = DVector::from_row_slice(v_guess);
    let mut f = residual(&v)?;
    let mut fnorm = f.amax();
    for _ in 0..opts.max_iter {
        if fnorm <= opts.tol {
            return Ok(v);
        }
        let w = velocity_hessian(sys, t, q, v.as_slice())?;
        let svd = SortedSvd::new(&w);
        let smax = svd.max_singular_value();
        let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        if smax == 0.0 || smin < JACOBIAN_RANK_TOL * smax {
            return Err(Error::SingularJacobian(smin));
        }
        let step = -svd.solve_min_norm(&f, JACOBIAN_RANK_TOL);
        let mut alpha = 1.0;
        loop {
            let trial = &v + &step * alpha;
            let ft = residual(&trial)?;
            let tn = ft.amax();
            if tn < fnorm || alpha < 1e-10 {
                v = trial;
                f = ft;
                fnorm = tn;
                break;
            }
            alpha *= 0.5;
        }
    }
    if fnorm <= opts.tol {
        Ok(v)
    } else {
        Err(Error::NoConvergence { iterations: opts.max_iter, residual: fnorm })
    }
}

/// `H = pᵢvⁱ − L` at `v = FL⁻¹(t, q, p)`.
pub fn hamiltonian(
    sys: &LagrangianSystem,
    t: f64,
    q: &[f64],
    p: &[f64],
    v_guess: &[f64],
    opts: NewtonOptions,
) -> Result<f64> {
    let v = legendre_invert(sys, t, q, p, v_guess, opts)?;
    let l = sys.eval(t, q, v.as_slice())?;
    Ok(p.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() - l)
}

/// Hamiltonian and its first derivatives for a regular system.
#[derive(Clone, Debug)]
pub struct HamiltonianJet {
    pub value: f64,
    pub dt: f64,
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
    /// The velocity `FL⁻¹(t, q, p)` the jet was taken at.
    pub velocity: DVector<f64>,
}

/// `H` and `∂H/∂(t, q, p)`, differentiating through the inverse Legendre map
/// by the implicit function theorem with exact second derivatives of `L`.
pub fn hamiltonian_jet(
    sys: &LagrangianSystem,
    t: f64,
    q: &[f64],
    p: &[f64],
    v_guess: &[f64],
    opts: NewtonOptions,
) -> Result<HamiltonianJet> {
    let n = sys.n();
    let v = legendre_invert(sys, t, q, p, v_guess, opts)?;
    let x = sys.pack(t, q, v.as_slice());
    let m = x.len();
    let l = value(sys.lagrangian(), &x)?;
    let pv: f64 = p.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let e = |k: usize| {
        let mut d = vec![0.0; m];
        d[k] = 1.0;
        d
    };
    // Legendre defect, zero up to the Newton tolerance.
    let phi = DVector::from_iterator(n, (0..n).map(|i| p[i] - sys.dl_dv(&x, i)));
    let w = velocity_hessian(sys, t, q, v.as_slice())?;
    let winv_t_phi = SortedSvd::new(&w).solve_min_norm(&phi, JACOBIAN_RANK_TOL);
    // Mixed second derivatives ∂²L/∂vⁱ∂y for y in (t, q).
    let mixed = |k: usize| -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|i| dir_deriv2(sys.lagrangian(), &x, &e(sys.v_index(i)), &e(k))))
    };
    let dl = |k: usize| dir_deriv(sys.lagrangian(), &x, &e(k));
    let dt = -dl(0) - winv_t_phi.dot(&mixed(0));
    let dq = DVector::from_iterator(n, (0..n).map(|i| -dl(sys.q_index(i)) - winv_t_phi.dot(&mixed(sys.q_index(i)))));
    let dp = &v + &winv_t_phi;
    Ok(HamiltonianJet { value: pv - l, dt, dq, dp, velocity: v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;

    struct Kinetic;
    impl Field for Kinetic {
        fn arity(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[2] * x[2] * S::from_f64(0.5)
        }
    }

    struct Oscillator;
    impl Field for Oscillator {
        fn arity(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            (x[2] * x[2] - x[1] * x[1]) * S::from_f64(0.5)
        }
    }

    struct Massive(f64);
    impl Field for Massive {
        fn arity(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[2] * x[2] * S::from_f64(0.5 * self.0)
        }
    }

    /// `½(v¹)²` with `n = 2`.
    struct HalfKinetic;
    impl Field for HalfKinetic {
        fn arity(&self) -> usize {
            5
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x[3] * x[3] * S::from_f64(0.5)
        }
    }

    fn free() -> LagrangianSystem {
        LagrangianSystem::new("free", 1, Kinetic).unwrap()
    }

    fn osc() -> LagrangianSystem {
        LagrangianSystem::new("osc", 1, Oscillator).unwrap()
    }

    #[test]
    fn arity_is_checked() {
        assert!(matches!(LagrangianSystem::new("bad", 2, Kinetic), Err(Error::Arity { .. })));
    }

    #[test]
    fn legendre_examples() {
        let p = legendre_restricted(&free(), 0.0, &[0.0], &[3.0]).unwrap();
        assert_eq!(p[0], 3.0);
        let (pe, p) = legendre_extended(&free(), 0.0, &[0.0], &[3.0]).unwrap();
        assert_eq!((pe, p[0]), (-4.5, 3.0));
        let (pe, p) = legendre_extended(&osc(), 0.0, &[1.0], &[0.0]).unwrap();
        assert_eq!((pe, p[0]), (-0.5, 0.0));
    }

    #[test]
    fn regularity_examples() {
        let r = regularity(&free(), 0.0, &[0.0], &[1.0], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.classification, Regularity::Regular);
        assert!(r.kernel_basis.is_empty());

        let toy = LagrangianSystem::new("toy", 2, HalfKinetic).unwrap();
        let r = regularity(&toy, 0.0, &[0.0, 0.0], &[1.0, 2.0], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.classification, Regularity::Singular);
        assert_eq!(r.kernel_basis.len(), 1);
        assert!((r.kernel_basis[0][0]).abs() < 1e-15);
        assert!((r.kernel_basis[0][1] - 1.0).abs() < 1e-15);
        assert!(regularity(&toy, 0.0, &[0.0, 0.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn euler_lagrange_examples() {
        let r = euler_lagrange_residual(&free(), 0.0, &[0.3], &[1.0], &[0.0]).unwrap();
        assert_eq!(r[0], 0.0);
        let r = euler_lagrange_residual(&osc(), 0.0, &[1.0], &[0.0], &[-1.0]).unwrap();
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn inversion_examples() {
        let opts = NewtonOptions::default();
        let v = legendre_invert(&free(), 0.0, &[0.0], &[3.0], &[0.0], opts).unwrap();
        assert!((v[0] - 3.0).abs() < 1e-12);
        let heavy = LagrangianSystem::new("m2", 1, Massive(2.0)).unwrap();
        let v = legendre_invert(&heavy, 0.0, &[0.0], &[3.0], &[0.0], opts).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);

        let toy = LagrangianSystem::new("toy", 2, HalfKinetic).unwrap();
        assert!(matches!(
            legendre_invert(&toy, 0.0, &[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], opts),
            Err(Error::SingularJacobian(_))
        ));
        assert!(matches!(
            legendre_invert(&free(), 0.0, &[0.0], &[3.0], &[0.0], NewtonOptions { tol: 1e-12, max_iter: 0 }),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn hamiltonian_examples() {
        let opts = NewtonOptions::default();
        assert!((hamiltonian(&free(), 0.0, &[0.0], &[3.0], &[0.0], opts).unwrap() - 4.5).abs() < 1e-12);
        assert!((hamiltonian(&osc(), 0.0, &[1.0], &[0.0], &[0.0], opts).unwrap() - 0.5).abs() < 1e-12);
        let jet = hamiltonian_jet(&osc(), 0.0, &[1.0], &[2.0], &[0.0], opts).unwrap();
        assert!((jet.dp[0] - 2.0).abs() < 1e-12);
        assert!((jet.dq[0] - 1.0).abs() < 1e-12);
        assert_eq!(jet.dt, 0.0);
    }
}
