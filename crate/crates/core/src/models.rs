//! Bundled systems: free particle, harmonic oscillator, a singular toy and the
//! semidiscrete nonlinear wave chain with its closed-form constraints.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dir_deriv, dir_deriv2, Field, SmoothScalarField};
use crate::constraints::{ConstraintFunction, Provenance};
use crate::error::{Error, Result};
use crate::lagrangian::{euler_lagrange_rhs, velocity_hessian, LagrangianSystem, DEFAULT_RANK_TOL};
use crate::linalg::SortedSvd;
use crate::scalar::Scalar;

/// Names accepted by [`builtin`].
pub const BUILTIN_MODELS: [&str; 5] = ["free_particle", "harmonic", "singular_toy", "contradiction_toy", "wave"];

/// Names accepted by [`sigma_named`].
pub const SIGMA_NAMES: [&str; 3] = ["linear", "quartic", "modulated_quartic"];

/// Names accepted by [`potential_named`].
pub const POTENTIAL_NAMES: [&str; 3] = ["zero", "sine_gordon_g", "quadratic"];

fn coeff(c: &[f64], i: usize, default: f64) -> f64 {
    c.get(i).copied().unwrap_or(default)
}

struct Sigma {
    /// Coefficients of `u_x²/2` and `u_x⁴/4`.
    a: f64,
    b: f64,
    /// `σ ← (1 + eps·sin(freq·t))·σ`.
    eps: f64,
    freq: f64,
}

impl Field for Sigma {
    fn arity(&self) -> usize {
        2
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let ux2 = x[1] * x[1];
        let base = S::from_f64(0.5 * self.a) * ux2 + S::from_f64(0.25 * self.b) * ux2 * ux2;
        if self.eps == 0.0 {
            base
        } else {
            (S::one() + S::from_f64(self.eps) * (S::from_f64(self.freq) * x[0]).sin()) * base
        }
    }
}

/// Stored energy density `σ(t, u_x)` from the named registry:
///
/// * `linear`: `c·u_x²/2`, coefficients `[c]`, default `[1]`;
/// * `quartic`: `a·u_x²/2 + b·u_x⁴/4`, default `[1, 1]`;
/// * `modulated_quartic`: `(1 + ε·sin(ν·t))·quartic`, coefficients
///   `[a, b, ε, ν]`, default `[1, 1, 0.5, 2]`.
pub fn sigma_named(name: &str, c: &[f64]) -> Result<SmoothScalarField> {
    let s = match name {
        "linear" => Sigma { a: coeff(c, 0, 1.0), b: 0.0, eps: 0.0, freq: 0.0 },
        "quartic" => Sigma { a: coeff(c, 0, 1.0), b: coeff(c, 1, 1.0), eps: 0.0, freq: 0.0 },
        "modulated_quartic" => {
            Sigma { a: coeff(c, 0, 1.0), b: coeff(c, 1, 1.0), eps: coeff(c, 2, 0.5), freq: coeff(c, 3, 2.0) }
        }
        _ => return Err(Error::InvalidParameter(format!("unknown sigma {name:?}; expected one of {SIGMA_NAMES:?}"))),
    };
    Ok(SmoothScalarField::new(s))
}

enum Potential {
    Zero,
    SineGordon(f64),
    Quadratic(f64),
}

impl Field for Potential {
    fn arity(&self) -> usize {
        2
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        match *self {
            Potential::Zero => S::zero(),
            Potential::SineGordon(m) => S::from_f64(m) * (S::one() - x[1].cos()),
            Potential::Quadratic(m) => S::from_f64(0.5 * m) * x[1] * x[1],
        }
    }
}

/// On-site potential `g(t, u)` from the named registry:
///
/// * `zero`;
/// * `sine_gordon_g`: `m·(1 − cos u)`, default `[1]`;
/// * `quadratic`: `m·u²/2`, default `[1]`.
pub fn potential_named(name: &str, c: &[f64]) -> Result<SmoothScalarField> {
    let g = match name {
        "zero" => Potential::Zero,
        "sine_gordon_g" => Potential::SineGordon(coeff(c, 0, 1.0)),
        "quadratic" => Potential::Quadratic(coeff(c, 0, 1.0)),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "unknown potential {name:?}; expected one of {POTENTIAL_NAMES:?}"
            )))
        }
    };
    Ok(SmoothScalarField::new(g))
}

/// Grid and constitutive data of the semidiscrete wave model.
#[derive(Clone, Debug)]
pub struct WaveModelParams {
    /// Number of grid intervals `N`; there are `N + 1` nodes.
    pub intervals: usize,
    /// Spatial period `K`.
    pub period: f64,
    /// `σ(t, u_x)`.
    pub sigma: SmoothScalarField,
    /// `g(t, u)`.
    pub g_pot: SmoothScalarField,
    /// Adds the link from node `N` back to node `0`.
    pub closed_chain: bool,
}

impl WaveModelParams {
    pub fn new(intervals: usize, period: f64, sigma: SmoothScalarField, g_pot: SmoothScalarField) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::InvalidParameter("the wave model needs N ≥ 2".into()));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidParameter("the period K must be positive".into()));
        }
        if sigma.arity() != 2 || g_pot.arity() != 2 {
            return Err(Error::InvalidParameter("σ and g take (t, u)".into()));
        }
        Ok(Self { intervals, period, sigma, g_pot, closed_chain: false })
    }

    /// Quartic `σ` with the given potential, `K = 1`.
    pub fn quartic(intervals: usize, g_name: &str) -> Result<Self> {
        Self::new(intervals, 1.0, sigma_named("quartic", &[])?, potential_named(g_name, &[])?)
    }

    /// Grid spacing `h = K/N`.
    pub fn h(&self) -> f64 {
        self.period / self.intervals as f64
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    fn links(&self) -> Vec<(usize, usize)> {
        let mut l: Vec<_> = (0..self.intervals).map(|i| (i, i + 1)).collect();
        if self.closed_chain {
            l.push((self.intervals, 0));
        }
        l
    }

    /// Smallest `|∂²σ/∂u_x²|` over a grid of the
    /// box `t ∈ [t0, t1]`, `u_x ∈ [−r, r]`.
    pub fn min_sigma_curvature(&self, t: (f64, f64), r: f64) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..=8 {
            for j in 0..=16 {
                let tt = t.0 + (t.1 - t.0) * i as f64 / 8.0;
                let ux = -r + 2.0 * r * j as f64 / 16.0;
                let c: f64 = dir_deriv2(&self.sigma, &[tt, ux], &[0.0, 1.0], &[0.0, 1.0]);
                m = m.min(c.abs());
            }
        }
        m
    }
}

struct WaveLagrangian {
    nodes: usize,
    h: f64,
    links: Vec<(usize, usize)>,
    sigma: SmoothScalarField,
    g_pot: SmoothScalarField,
}

impl Field for WaveLagrangian {
    fn arity(&self) -> usize {
        2 * self.nodes + 1
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let m = self.nodes;
        let t = x[0];
        let (q, v) = (&x[1..1 + m], &x[1 + m..1 + 2 * m]);
        let half = S::from_f64(0.5);
        let h = S::from_f64(self.h);
        let mut acc = S::zero();
        for &(a, b) in &self.links {
            let vm = (v[a] + v[b]) * half;
            let w = (q[b] - q[a]) / h;
            let qm = (q[b] + q[a]) * half;
            acc += half * vm * vm - self.sigma.eval(&[t, w]) - self.g_pot.eval(&[t, qm]);
        }
        acc
    }
}

/// `L = Σ [½(v^{i+1/2})² − σ(t, wⁱ) − g(t, q^{i+1/2})]` over the grid links,
/// with `wⁱ = (qⁱ⁺¹ − qⁱ)/h` and `Q^{i+1/2} = (Qⁱ + Qⁱ⁺¹)/2`.
pub fn semidiscrete_wave(params: &WaveModelParams) -> LagrangianSystem {
    let f = WaveLagrangian {
        nodes: params.nodes(),
        h: params.h(),
        links: params.links(),
        sigma: params.sigma.clone(),
        g_pot: params.g_pot.clone(),
    };
    let name = format!("wave(N={})", params.intervals);
    LagrangianSystem::new(name, params.nodes(), f).expect("arity is consistent by construction")
}

#[derive(Clone, Copy)]
enum RefKind {
    Primary(usize),
    Secondary,
    Tertiary,
}

struct WaveReference {
    nodes: usize,
    h: f64,
    links: Vec<(usize, usize)>,
    sigma: SmoothScalarField,
    kind: RefKind,
}

impl Field for WaveReference {
    fn arity(&self) -> usize {
        3 * self.nodes + 1
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let m = self.nodes;
        let t = x[0];
        let (q, v, p) = (&x[1..1 + m], &x[1 + m..1 + 2 * m], &x[1 + 2 * m..1 + 3 * m]);
        let h = S::from_f64(self.h);
        let quarter = S::from_f64(0.25);
        let (e_t, e_u) = ([S::one(), S::zero()], [S::zero(), S::one()]);
        match self.kind {
            RefKind::Primary(i) => {
                let mut dl = S::zero();
                for &(a, b) in &self.links {
                    if a == i || b == i {
                        dl += quarter * (v[a] + v[b]);
                    }
                }
                p[i] - dl
            }
            RefKind::Secondary => {
                let mut acc = S::zero();
                for i in 0..self.nodes - 1 {
                    let w = (q[i + 1] - q[i]) / h;
                    let s = dir_deriv(&self.sigma, &[t, w], &e_u);
                    acc += if i % 2 == 0 { s } else { -s };
                }
                acc
            }
            RefKind::Tertiary => {
                let mut acc = S::zero();
                for i in 0..self.nodes - 1 {
                    let pt = [t, (q[i + 1] - q[i]) / h];
                    let s_xt = dir_deriv2(&self.sigma, &pt, &e_u, &e_t);
                    let s_xx = dir_deriv2(&self.sigma, &pt, &e_u, &e_u);
                    let term = s_xt + (v[i + 1] - v[i]) / h * s_xx;
                    acc += if i % 2 == 0 { term } else { -term };
                }
                acc
            }
        }
    }
}

/// Closed-form constraints of the open wave chain: the `N + 1` primaries
/// `pᵢ − ∂L/∂vⁱ`, then
///
/// `φ² = Σ(−1)ⁱ ∂σ/∂u_x(t, wⁱ)` and
/// `φ³ = Σ(−1)ⁱ [∂²σ/∂u_x∂t(t, wⁱ) + ((vⁱ⁺¹ − vⁱ)/h)·∂²σ/∂u_x²(t, wⁱ)]`.
///
/// The secondary and tertiary sums always run over the open chain.
pub fn wave_reference_constraints(params: &WaveModelParams) -> Vec<ConstraintFunction> {
    let m = params.nodes();
    let mk = |kind: RefKind| {
        SmoothScalarField::new(WaveReference {
            nodes: m,
            h: params.h(),
            links: params.links(),
            sigma: params.sigma.clone(),
            kind,
        })
    };
    let mut out: Vec<ConstraintFunction> = (0..m)
        .map(|i| ConstraintFunction {
            id: i,
            level: 1,
            provenance: Provenance::Analytic(format!("p{i} - dL/dv{i}")),
            evaluator: mk(RefKind::Primary(i)),
        })
        .collect();
    out.push(ConstraintFunction {
        id: m,
        level: 2,
        provenance: Provenance::Analytic("sum (-1)^i dsigma/du_x".into()),
        evaluator: mk(RefKind::Secondary),
    });
    out.push(ConstraintFunction {
        id: m + 1,
        level: 3,
        provenance: Provenance::Analytic("sum (-1)^i [sigma_xt + (v^{i+1}-v^i)/h sigma_xx]".into()),
        evaluator: mk(RefKind::Tertiary),
    });
    out
}

struct Harmonic {
    n: usize,
    omega: f64,
    amplitude: f64,
    frequency: f64,
}

impl Field for Harmonic {
    fn arity(&self) -> usize {
        2 * self.n + 1
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let n = self.n;
        let half = S::from_f64(0.5);
        let kinetic: S = x[1 + n..1 + 2 * n].iter().map(|&v| half * v * v).sum();
        if self.omega == 0.0 && self.amplitude == 0.0 {
            return kinetic;
        }
        let w = if self.amplitude == 0.0 {
            S::from_f64(self.omega)
        } else {
            S::from_f64(self.omega) + S::from_f64(self.amplitude) * (S::from_f64(self.frequency) * x[0]).sin()
        };
        let pot: S = x[1..1 + n].iter().map(|&q| half * q * q).sum();
        kinetic - w * w * pot
    }
}

struct SingularToy;

impl Field for SingularToy {
    fn arity(&self) -> usize {
        5
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        S::from_f64(0.5) * x[3] * x[3]
    }
}

struct ContradictionToy(f64);

impl Field for ContradictionToy {
    fn arity(&self) -> usize {
        5
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        S::from_f64(0.5) * x[3] * x[3] + S::from_f64(self.0) * x[2]
    }
}

/// Parameters for [`builtin`]; each model reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Degrees of freedom of `free_particle` and `harmonic`.
    pub dof: usize,
    /// `ω(t) = omega + omega_amplitude·sin(omega_frequency·t)`.
    pub omega: f64,
    pub omega_amplitude: f64,
    pub omega_frequency: f64,
    /// Wave grid intervals `N`.
    pub intervals: usize,
    /// Wave period `K`.
    pub period: f64,
    pub sigma: String,
    pub sigma_coeffs: Vec<f64>,
    pub g: String,
    pub g_coeffs: Vec<f64>,
    pub closed_chain: bool,
    /// Coefficient `f` of `contradiction_toy`.
    pub force: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dof: 1,
            omega: 1.0,
            omega_amplitude: 0.0,
            omega_frequency: 1.0,
            intervals: 4,
            period: 1.0,
            sigma: "quartic".into(),
            sigma_coeffs: Vec::new(),
            g: "zero".into(),
            g_coeffs: Vec::new(),
            closed_chain: false,
            force: 1.0,
        }
    }
}

impl ModelParams {
    pub fn wave(&self) -> Result<WaveModelParams> {
        let mut w = WaveModelParams::new(
            self.intervals,
            self.period,
            sigma_named(&self.sigma, &self.sigma_coeffs)?,
            potential_named(&self.g, &self.g_coeffs)?,
        )?;
        w.closed_chain = self.closed_chain;
        Ok(w)
    }
}

/// Looks up a bundled model by name.
///
/// * `free_particle`: `L = ½Σv²`;
/// * `harmonic`: `L = ½Σv² − ½ω(t)²Σq²`;
/// * `singular_toy`: `L = ½(v¹)²` with `n = 2`;
/// * `contradiction_toy`: `L = ½(v¹)² + f·q²`, whose secondary constraint
///   `f = 0` has no zero set unless `f = 0`;
/// * `wave`: [`semidiscrete_wave`].
pub fn builtin(name: &str, params: &ModelParams) -> Result<LagrangianSystem> {
    let dof = || {
        if params.dof == 0 {
            Err(Error::InvalidParameter("dof must be positive".into()))
        } else {
            Ok(params.dof)
        }
    };
    match name {
        "free_particle" => {
            LagrangianSystem::new(name, dof()?, Harmonic { n: params.dof, omega: 0.0, amplitude: 0.0, frequency: 0.0 })
        }
        "harmonic" => LagrangianSystem::new(
            name,
            dof()?,
            Harmonic {
                n: params.dof,
                omega: params.omega,
                amplitude: params.omega_amplitude,
                frequency: params.omega_frequency,
            },
        ),
        "singular_toy" => LagrangianSystem::new(name, 2, SingularToy),
        "contradiction_toy" => LagrangianSystem::new(name, 2, ContradictionToy(params.force)),
        "wave" => Ok(semidiscrete_wave(&params.wave()?)),
        _ => Err(Error::UnknownModel(name.to_string())),
    }
}

/// Positions and velocities on a uniform time grid.
#[derive(Clone, Debug)]
pub struct ElTrajectory {
    pub t: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

/// Times `t0, t0 + step, …` ending exactly at `t_end`; the last interval is
/// shortened when `step` does not divide the span.
pub fn time_grid(t0: f64, step: f64, t_end: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter("step must be positive".into()));
    }
    if !(t_end >= t0) {
        return Err(Error::InvalidParameter("t_end must not precede the initial time".into()));
    }
    let span = t_end - t0;
    let full = (span / step * (1.0 + 1e-12)).floor() as usize;
    let mut ts: Vec<f64> = (0..=full).map(|k| t0 + k as f64 * step).collect();
    let last = *ts.last().unwrap();
    if t_end - last > 1e-9 * step {
        ts.push(t_end);
    } else {
        *ts.last_mut().unwrap() = t_end;
    }
    Ok(ts)
}

fn accel(sys: &LagrangianSystem, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let w = velocity_hessian(sys, t, q.as_slice(), v.as_slice())?;
    if SortedSvd::new(&w).rank(DEFAULT_RANK_TOL) < sys.n() {
        return Err(Error::SingularHessian);
    }
    let b = euler_lagrange_rhs(sys, t, q.as_slice(), v.as_slice())?;
    w.lu().solve(&b).ok_or(Error::SingularHessian)
}

/// Classical RK4 on `q̇ = v`, `v̇ = W⁻¹·b` for a regular Lagrangian.
pub fn direct_el_oracle(
    sys: &LagrangianSystem,
    t0: f64,
    q0: &[f64],
    v0: &[f64],
    step: f64,
    t_end: f64,
) -> Result<ElTrajectory> {
    let n = sys.n();
    if q0.len() != n || v0.len() != n {
        return Err(Error::Arity { expected: n, got: q0.len().min(v0.len()) });
    }
    let ts = time_grid(t0, step, t_end)?;
    let mut q = DVector::from_column_slice(q0);
    let mut v = DVector::from_column_slice(v0);
    let mut out = ElTrajectory { t: vec![ts[0]], q: vec![q.clone()], v: vec![v.clone()] };
    for win in ts.windows(2) {
        let (t, dt) = (win[0], win[1] - win[0]);
        let k1q = v.clone();
        let k1v = accel(sys, t, &q, &v)?;
        let q2 = &q + &k1q * (dt / 2.0);
        let v2 = &v + &k1v * (dt / 2.0);
        let k2v = accel(sys, t + dt / 2.0, &q2, &v2)?;
        let k2q = v2;
        let q3 = &q + &k2q * (dt / 2.0);
        let v3 = &v + &k2v * (dt / 2.0);
        let k3v = accel(sys, t + dt / 2.0, &q3, &v3)?;
        let k3q = v3;
        let q4 = &q + &k3q * dt;
        let v4 = &v + &k3v * dt;
        let k4v = accel(sys, t + dt, &q4, &v4)?;
        let k4q = v4;
        q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
        out.t.push(win[1]);
        out.q.push(q.clone());
        out.v.push(v.clone());
    }
    Ok(out)
}
