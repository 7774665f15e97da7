//! Invariant suite behind `srusk verify`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use srusk::autodiff::jet2;
use srusk::constraints::{sample_points, tangency_system};
use srusk::integrator::{integrate, IntegratorOptions};
use srusk::lagrangian::{legendre_invert, regularity, NewtonOptions, Regularity};
use srusk::linalg::{subspace_angle, SortedSvd};
use srusk::models::direct_el_oracle;
use srusk::unified::{eq_four_residual, omega0_matrix, solve_vector_field, theta0};
use srusk::{ConstraintChain, Field, GaugeRule, LagrangianSystem, Termination, UnifiedPoint};

use crate::commands::{chain, initial_point, system, Run, EXIT_OK, EXIT_VERIFY};
use crate::config::RunConfig;

/// Points per pointwise check.
const POINTS: usize = 8;
/// Length of the short integration runs.
const SPAN: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: impl Into<String>) -> Check {
    Check { name, status: if pass { Status::Pass } else { Status::Fail }, detail: detail.into() }
}

fn skip(name: &'static str, detail: impl Into<String>) -> Check {
    Check { name, status: Status::Skip, detail: detail.into() }
}

fn errored(name: &'static str, e: impl std::fmt::Display) -> Check {
    check(name, false, format!("error: {e}"))
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        }),
    )
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let m = x.len();
    DMatrix::from_fn(m, m, |i, j| {
        let at = |si: f64, sj: f64| {
            let mut y = x.to_vec();
            y[i] += si * h;
            y[j] += sj * h;
            f(&y)
        };
        (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
    })
}

fn ad_checks(sys: &LagrangianSystem, pts: &[UnifiedPoint]) -> Vec<Check> {
    let field = sys.lagrangian();
    let f = |y: &[f64]| -> f64 { field.eval(y) };
    let (mut eg, mut eh) = (0.0f64, 0.0f64);
    let mut symmetric = true;
    for pt in pts {
        let x = sys.pack(pt.t, pt.q.as_slice(), pt.v.as_slice());
        let j = match jet2(field, &x) {
            Ok(j) => j,
            Err(e) => {
                return vec![errored("ad-gradient", &e), errored("ad-hessian", &e), errored("hessian-symmetry", e)]
            }
        };
        let g = fd_gradient(&f, &x, 1e-6);
        let h = fd_hessian(&f, &x, 1e-4);
        eg = eg.max((&j.gradient - g).norm() / j.gradient.norm().max(1.0));
        eh = eh.max((&j.hessian - h).norm() / j.hessian.norm().max(1.0));
        symmetric &= j.hessian == j.hessian.transpose();
    }
    vec![
        check("ad-gradient", eg < 1e-6, format!("max relative error vs central differences {eg:.2e}")),
        check("ad-hessian", eh < 1e-6, format!("max relative error vs central differences {eh:.2e}")),
        check("hessian-symmetry", symmetric, "bitwise symmetric at every point".to_string()),
    ]
}

fn omega_checks(sys: &LagrangianSystem, pts: &[UnifiedPoint]) -> Vec<Check> {
    let n = sys.n();
    let dim = 3 * n + 1;
    let theta = |x: &[f64]| -> srusk::Result<DVector<f64>> {
        let (dt, dq) = theta0(sys, &UnifiedPoint::from_coords(x))?;
        let mut th = DVector::zeros(dim);
        th[0] = dt;
        th.rows_mut(1, n).copy_from(&dq);
        Ok(th)
    };
    let mut antisym = true;
    let mut worst = 0.0f64;
    for pt in pts {
        let m = match omega0_matrix(sys, pt) {
            Ok(m) => m,
            Err(e) => return vec![errored("omega-antisymmetry", &e), errored("omega-exterior-derivative", e)],
        };
        antisym &= m == -m.transpose();
        let x = pt.coords();
        let h = 1e-5;
        let mut jac = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[a] += h;
            xm[a] -= h;
            match (theta(&xp), theta(&xm)) {
                (Ok(tp), Ok(tm)) => jac.set_column(a, &((tp - tm) / (2.0 * h))),
                (Err(e), _) | (_, Err(e)) => return vec![errored("omega-exterior-derivative", e)],
            }
        }
        // dΘ(∂_a, ∂_b) = ∂_aθ_b − ∂_bθ_a.
        let scale = m.amax().max(1.0);
        worst = worst.max((m + jac.transpose() - &jac).amax() / scale);
    }
    vec![
        check("omega-antisymmetry", antisym, "Ω₀ = −Ω₀ᵀ exactly".to_string()),
        check("omega-exterior-derivative", worst < 1e-6, format!("max |Ω₀ + dΘ₀| / max(1, |Ω₀|) {worst:.2e}")),
    ]
}

fn vector_field_checks(sys: &LagrangianSystem, pts: &[UnifiedPoint], rank_tol: f64) -> Vec<Check> {
    let mut bitwise = true;
    let mut worst = 0.0f64;
    for pt in pts {
        let sol = match solve_vector_field(sys, pt, rank_tol) {
            Ok(s) => s,
            Err(e) => return vec![errored("holonomy", &e), errored("dt-equation", e)],
        };
        bitwise &= sol.big_f.iter().zip(pt.v.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        match eq_four_residual(sys, pt, &sol, &sol.g_particular) {
            Ok(r) => worst = worst.max(r.abs()),
            Err(e) => return vec![errored("dt-equation", e)],
        }
    }
    vec![
        check("holonomy", bitwise, "F = v bitwise".to_string()),
        check("dt-equation", worst < 1e-10, format!("max residual {worst:.2e}")),
    ]
}

fn legendre_check(sys: &LagrangianSystem, pts: &[UnifiedPoint], regular: bool) -> Check {
    if !regular {
        return skip("legendre-round-trip", "singular Lagrangian");
    }
    let n = sys.n();
    let mut worst = 0.0f64;
    for pt in pts {
        match legendre_invert(sys, pt.t, pt.q.as_slice(), pt.p.as_slice(), &vec![0.0; n], NewtonOptions::default()) {
            Ok(v) => worst = worst.max((v - &pt.v).amax() / (1.0 + pt.v.amax())),
            Err(e) => return errored("legendre-round-trip", e),
        }
    }
    check("legendre-round-trip", worst < 1e-9, format!("max |FL⁻¹(FL(v)) − v| {worst:.2e}"))
}

/// Known kernel of the velocity Hessian for the bundled models.
fn expected_kernel(name: &str, n: usize) -> Option<Vec<DVector<f64>>> {
    match name {
        "free_particle" | "harmonic" => Some(Vec::new()),
        "singular_toy" => Some(vec![DVector::from_vec(vec![0.0, 1.0])]),
        "wave" => {
            Some(vec![DVector::from_iterator(n, (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })).normalize()])
        }
        _ => None,
    }
}

fn kernel_check(cfg: &RunConfig, sys: &LagrangianSystem, pts: &[UnifiedPoint]) -> Check {
    let Some(expected) = expected_kernel(&cfg.model.name, sys.n()) else {
        return skip("hessian-kernel", "no reference kernel for this model");
    };
    let mut worst = 0.0f64;
    for pt in pts {
        let reg = match regularity(sys, pt.t, pt.q.as_slice(), pt.v.as_slice(), cfg.analysis.rank_tol) {
            Ok(r) => r,
            Err(e) => return errored("hessian-kernel", e),
        };
        if reg.kernel_dim() != expected.len() {
            return check(
                "hessian-kernel",
                false,
                format!(
                    "detected kernel dimension {}, expected {} (rank tol {:e})",
                    reg.kernel_dim(),
                    expected.len(),
                    cfg.analysis.rank_tol
                ),
            );
        }
        if !expected.is_empty() {
            worst = worst.max(subspace_angle(&reg.kernel_basis, &expected));
        }
    }
    check("hessian-kernel", worst < 1e-10, format!("dimension {}, max angle to reference {worst:.1e}", expected.len()))
}

fn chain_checks(chain: &ConstraintChain, rank_tol: f64) -> Vec<Check> {
    let mut out = Vec::new();
    let settled = matches!(chain.termination, Some(Termination::AllDetermined | Termination::GaugeFreedom { .. }));
    let mut worst = 0.0f64;
    for pt in &chain.sample_points {
        match chain.max_residual(pt) {
            Ok(r) => worst = worst.max(r),
            Err(e) => return vec![errored("chain-residual", e)],
        }
    }
    let label = chain.termination.map(|t| t.label()).unwrap_or("none");
    out.push(check(
        "chain-residual",
        settled && worst < 1e-8,
        format!("levels {:?}, {label}, max residual at samples {worst:.2e}", chain.level_sizes()),
    ));
    let mut closure = 0.0f64;
    for pt in &chain.sample_points {
        match tangency_system(chain, pt, rank_tol) {
            Ok(ts) => {
                let lambda = SortedSvd::new(&ts.b).solve_min_norm(&(-&ts.a), rank_tol);
                let scale = ts.a.amax().max(ts.b.amax()).max(1.0);
                closure = closure.max((&ts.a + &ts.b * lambda).amax() / scale);
            }
            Err(e) => {
                out.push(errored("tangency-closure", e));
                return out;
            }
        }
    }
    out.push(check(
        "tangency-closure",
        settled && closure < 1e-8,
        format!("max |A + Bλ| / max(1, |A|, |B|) {closure:.2e}"),
    ));
    out
}

fn trajectory_checks(cfg: &RunConfig, sys: &LagrangianSystem, chain: &ConstraintChain, regular: bool) -> Vec<Check> {
    let pt0 = match initial_point(cfg, sys, chain) {
        Ok(p) => p,
        Err(f) => return vec![check("trajectory-constraints", false, f.message)],
    };
    let gauge = match chain.termination {
        Some(Termination::GaugeFreedom { .. }) => GaugeRule::Zero,
        _ => GaugeRule::Reject,
    };
    let opts = IntegratorOptions { t_end: pt0.t + SPAN, gauge, ..cfg.integrator_options() };
    let tr = match integrate(sys, chain, &pt0, &opts) {
        Ok(tr) => tr,
        Err(e) => return vec![errored("trajectory-constraints", e)],
    };
    let (cr, er) = (tr.max_constraint_residual(), tr.max_el_residual());
    let mut out = vec![check(
        "trajectory-constraints",
        cr < 1e-6 && er < 1e-6,
        format!("max constraint residual {cr:.2e}, max EL residual {er:.2e}"),
    )];
    if !regular {
        out.push(skip("oracle-equivalence", "singular Lagrangian"));
        return out;
    }
    let oracle = match direct_el_oracle(sys, pt0.t, pt0.q.as_slice(), pt0.v.as_slice(), opts.step, opts.t_end) {
        Ok(o) => o,
        Err(e) => {
            out.push(errored("oracle-equivalence", e));
            return out;
        }
    };
    let mut dev = 0.0f64;
    for (k, pt) in tr.points.iter().enumerate() {
        dev = dev.max((&pt.q - &oracle.q[k]).amax()).max((&pt.v - &oracle.v[k]).amax());
    }
    out.push(check("oracle-equivalence", dev < 1e-8, format!("max |Δ(q, v)| vs direct Euler-Lagrange {dev:.2e}")));
    out
}

pub fn run_checks(cfg: &RunConfig) -> Run<Vec<Check>> {
    let sys = system(cfg)?;
    let pts = sample_points(&sys, &cfg.analysis.sample_box, POINTS, cfg.seed)?;
    let regular = pts.iter().all(|pt| {
        regularity(&sys, pt.t, pt.q.as_slice(), pt.v.as_slice(), srusk::lagrangian::DEFAULT_RANK_TOL)
            .map(|r| r.classification == Regularity::Regular)
            .unwrap_or(false)
    });
    let mut checks = ad_checks(&sys, &pts);
    checks.extend(omega_checks(&sys, &pts));
    checks.extend(vector_field_checks(&sys, &pts, cfg.analysis.rank_tol));
    checks.push(legendre_check(&sys, &pts, regular));
    checks.push(kernel_check(cfg, &sys, &pts));
    match chain(cfg, &sys) {
        Ok(c) => {
            checks.extend(chain_checks(&c, cfg.analysis.rank_tol));
            checks.extend(trajectory_checks(cfg, &sys, &c, regular));
        }
        Err(f) => checks.push(check("chain-residual", false, f.message)),
    }
    Ok(checks)
}

pub fn verify(cfg: &RunConfig, out: &mut String) -> Run<u8> {
    let checks = run_checks(cfg)?;
    let _ = writeln!(out, "{:<28} {:<6} detail", "check", "status");
    for c in &checks {
        let status = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "skip",
        };
        let _ = writeln!(out, "{:<28} {:<6} {}", c.name, status, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| c.status == Status::Fail).map(|c| c.name).collect();
    let count = |s: Status| checks.iter().filter(|c| c.status == s).count();
    let _ = writeln!(out, "{} passed, {} failed, {} skipped", count(Status::Pass), failed.len(), count(Status::Skip));
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(out, "failing invariants: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}
