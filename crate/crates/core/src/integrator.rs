//! Fixed-step integration of `X₀` on the final constraint set.

use std::io::{self, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    project, project_reachable, resolve_vector_field, ConstraintChain, GaugeRule, ProjectionVars, ON_MANIFOLD_TOL,
};
use crate::error::{Error, Result};
use crate::lagrangian::{euler_lagrange_residual, LagrangianSystem};
use crate::models::time_grid;
use crate::unified::UnifiedPoint;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Rk4,
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Projection {
    Off,
    Newton { tol: f64, max_iter: usize },
}

impl Default for Projection {
    fn default() -> Self {
        Projection::Newton { tol: 1e-12, max_iter: 20 }
    }
}

#[derive(Clone, Debug)]
pub struct IntegratorOptions {
    pub step: f64,
    pub scheme: Scheme,
    pub projection: Projection,
    pub t_end: f64,
    pub gauge: GaugeRule,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            scheme: Scheme::Rk4,
            projection: Projection::default(),
            t_end: 1.0,
            gauge: GaugeRule::Reject,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        if !self.t_end.is_finite() {
            return Err(Error::InvalidParameter("t_end must be finite".into()));
        }
        if let Projection::Newton { tol, max_iter } = self.projection {
            if !(tol > 0.0) || max_iter == 0 {
                return Err(Error::InvalidParameter("projection needs tol > 0 and max_iter ≥ 1".into()));
            }
        }
        Ok(())
    }
}

/// Stored states with per-point diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub points: Vec<UnifiedPoint>,
    /// `max |φ|` over the chain.
    pub constraint_residual: Vec<f64>,
    /// `|W·G − b|` with the resolved `G`.
    pub el_residual: Vec<f64>,
    /// `E = pᵢvⁱ − L`.
    pub energy: Vec<f64>,
    /// The resolved acceleration `G` at each point.
    pub acceleration: Vec<DVector<f64>>,
    pub projected: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<&UnifiedPoint> {
        self.points.last()
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.constraint_residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_el_residual(&self) -> f64 {
        self.el_residual.iter().copied().fold(0.0, f64::max)
    }

    /// `max |E(t) − E(t₀)|`.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy.first().copied().unwrap_or(0.0);
        self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }

    pub fn csv_header(n: usize) -> String {
        let mut cols = vec!["t".to_string()];
        for prefix in ["q", "v", "p"] {
            cols.extend((0..n).map(|i| format!("{prefix}{i}")));
        }
        cols.extend(["constraint_residual", "el_residual", "energy"].map(String::from));
        cols.join(",")
    }

    /// One row per stored point, numbers with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.points.first().map(UnifiedPoint::n).unwrap_or(0);
        writeln!(w, "{}", Self::csv_header(n))?;
        for (k, pt) in self.points.iter().enumerate() {
            let mut row = String::new();
            let nums = std::iter::once(pt.t)
                .chain(pt.q.iter().copied())
                .chain(pt.v.iter().copied())
                .chain(pt.p.iter().copied())
                .chain([self.constraint_residual[k], self.el_residual[k], self.energy[k]]);
            for (i, x) in nums.enumerate() {
                if i > 0 {
                    row.push(',');
                }
                row.push_str(&format!("{x:.16e}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Newton minimum-norm correction in `(v, p)` onto the chain's zero set.
pub fn project_onto_chain(
    chain: &ConstraintChain,
    pt: &UnifiedPoint,
    tol: f64,
    max_iter: usize,
) -> Result<UnifiedPoint> {
    project(chain, pt, ProjectionVars::VelocityMomentum, tol, max_iter).map(|(p, _)| p)
}

fn projection_failed(e: Error, t: f64) -> Error {
    match e {
        Error::NoConvergence { iterations, residual } => Error::ProjectionFailed(format!(
            "Newton projection at t = {t} stalled after {iterations} iterations with residual {residual:.3e}"
        )),
        other => other,
    }
}

/// Compensated accumulation of `x += dx`.
fn kahan_add(x: &mut [f64], comp: &mut [f64], dx: &[f64]) {
    for ((xi, ci), di) in x.iter_mut().zip(comp.iter_mut()).zip(dx) {
        let y = di - *ci;
        let s = *xi + y;
        *ci = (s - *xi) - y;
        *xi = s;
    }
}

/// Integrates `X₀` from `pt0` to `opts.t_end`, resolving `λ` from the chain
/// at every stage.
pub fn integrate(
    sys: &LagrangianSystem,
    chain: &ConstraintChain,
    pt0: &UnifiedPoint,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    if chain.system().n() != sys.n() || pt0.n() != sys.n() {
        return Err(Error::Arity { expected: sys.n(), got: pt0.n() });
    }
    let grid = time_grid(pt0.t, opts.step, opts.t_end)?;
    let (tol, max_iter) = match opts.projection {
        Projection::Newton { tol, max_iter } => (tol, max_iter),
        Projection::Off => (1e-12, 20),
    };
    let start = project_onto_chain(chain, pt0, tol, max_iter).map_err(|e| projection_failed(e, pt0.t))?;

    let field = |x: &[f64]| -> Result<(Vec<f64>, DVector<f64>)> {
        let r = resolve_vector_field(chain, &UnifiedPoint::from_coords(x), &opts.gauge)?;
        Ok((r.direction, r.g))
    };

    let mut traj = Trajectory { projected: matches!(opts.projection, Projection::Newton { .. }), ..Default::default() };
    let mut x = start.coords();
    let mut comp = vec![0.0; x.len()];
    let record = |traj: &mut Trajectory, x: &[f64], g: DVector<f64>| -> Result<()> {
        let pt = UnifiedPoint::from_coords(x);
        let el = euler_lagrange_residual(sys, pt.t, pt.q.as_slice(), pt.v.as_slice(), g.as_slice())?;
        let l = sys.eval(pt.t, pt.q.as_slice(), pt.v.as_slice())?;
        traj.constraint_residual.push(chain.max_residual(&pt)?);
        traj.el_residual.push(el.norm());
        traj.energy.push(pt.p.dot(&pt.v) - l);
        traj.acceleration.push(g);
        traj.points.push(pt);
        Ok(())
    };

    let (mut k1, g0) = field(&x)?;
    record(&mut traj, &x, g0)?;
    for win in grid.windows(2) {
        let dt = win[1] - win[0];
        let incr: Vec<f64> = match opts.scheme {
            Scheme::Euler => k1.iter().map(|k| dt * k).collect(),
            Scheme::Rk4 => {
                let stage = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
                let (k2, _) = field(&stage(&k1, dt / 2.0))?;
                let (k3, _) = field(&stage(&k2, dt / 2.0))?;
                let (k4, _) = field(&stage(&k3, dt))?;
                (0..x.len()).map(|i| dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
            }
        };
        kahan_add(&mut x, &mut comp, &incr);
        x[0] = win[1];
        comp[0] = 0.0;
        if let Projection::Newton { tol, max_iter } = opts.projection {
            let pt = UnifiedPoint::from_coords(&x);
            let projected = project_reachable(chain, &pt, ProjectionVars::VelocityMomentum, tol, max_iter)
                .map_err(|e| projection_failed(e, win[1]))?;
            if projected.unreachable > ON_MANIFOLD_TOL {
                return Err(Error::ProjectionFailed(format!(
                    "residual {:.3e} at t = {} lies in constraints that do not depend on (v, p); reduce the step",
                    projected.unreachable, win[1]
                )));
            }
            let y = projected.point.coords();
            for i in 0..x.len() {
                if y[i] != x[i] {
                    comp[i] = 0.0;
                }
            }
            x = y;
        }
        let (k, g) = field(&x)?;
        record(&mut traj, &x, g)?;
        k1 = k;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{run_constraint_algorithm, sample_points, ChainOptions, SampleBox};
    use crate::models::{builtin, ModelParams};

    fn chain(sys: &LagrangianSystem) -> ConstraintChain {
        let s = sample_points(sys, &SampleBox::default(), 4, 3).unwrap();
        run_constraint_algorithm(sys, &s, ChainOptions::default()).unwrap()
    }

    #[test]
    fn free_particle_moves_linearly() {
        let sys = builtin("free_particle", &ModelParams::default()).unwrap();
        let c = chain(&sys);
        let pt = UnifiedPoint::on_w1(&sys, 0.0, &[0.0], &[3.0]).unwrap();
        let opts = IntegratorOptions { step: 1e-2, t_end: 1.0, projection: Projection::Off, ..Default::default() };
        let tr = integrate(&sys, &c, &pt, &opts).unwrap();
        assert_eq!(tr.len(), 101);
        let last = tr.last().unwrap();
        assert_eq!(last.t, 1.0);
        assert!((last.q[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn euler_is_first_order() {
        let sys = builtin("harmonic", &ModelParams::default()).unwrap();
        let c = chain(&sys);
        let pt = UnifiedPoint::on_w1(&sys, 0.0, &[1.0], &[0.0]).unwrap();
        let err = |h: f64| {
            let opts = IntegratorOptions {
                step: h,
                t_end: 1.0,
                scheme: Scheme::Euler,
                projection: Projection::Off,
                ..Default::default()
            };
            let tr = integrate(&sys, &c, &pt, &opts).unwrap();
            (tr.last().unwrap().q[0] - 1f64.cos()).abs()
        };
        let r = err(2e-3) / err(1e-3);
        assert!((1.8..2.2).contains(&r), "{r}");
    }

    #[test]
    fn csv_layout() {
        let sys = builtin("harmonic", &ModelParams { dof: 2, ..Default::default() }).unwrap();
        let c = chain(&sys);
        let pt = UnifiedPoint::on_w1(&sys, 0.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        let opts = IntegratorOptions { step: 0.5, t_end: 1.0, ..Default::default() };
        let tr = integrate(&sys, &c, &pt, &opts).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,q0,q1,v0,v1,p0,p1,constraint_residual,el_residual,energy");
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[1], 1.0);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn rejects_bad_options() {
        let sys = builtin("harmonic", &ModelParams::default()).unwrap();
        let c = chain(&sys);
        let pt = UnifiedPoint::on_w1(&sys, 0.0, &[1.0], &[0.0]).unwrap();
        let opts = IntegratorOptions { step: -1.0, ..Default::default() };
        assert!(integrate(&sys, &c, &pt, &opts).is_err());
    }
}
