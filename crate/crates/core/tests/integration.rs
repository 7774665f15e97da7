use std::f64::consts::PI;

use srusk::constraints::{
    project, project_reachable, resolve_vector_field, run_constraint_algorithm, sample_points, ChainOptions,
    ConstraintChain, GaugeRule, ProjectionVars, SampleBox,
};
use srusk::integrator::{integrate, project_onto_chain, IntegratorOptions, Projection};
use srusk::models::{builtin, direct_el_oracle, semidiscrete_wave, ModelParams, WaveModelParams};
use srusk::{Error, Field, LagrangianSystem, Scalar, UnifiedPoint};

fn chain_for(sys: &LagrangianSystem) -> ConstraintChain {
    let s = sample_points(sys, &SampleBox::default(), 16, 17).unwrap();
    run_constraint_algorithm(sys, &s, ChainOptions::default()).unwrap()
}

fn wave_quartic() -> (LagrangianSystem, ConstraintChain, UnifiedPoint) {
    let sys = semidiscrete_wave(&WaveModelParams::quartic(4, "zero").unwrap());
    let chain = chain_for(&sys);
    let q = [0.1, 0.0, -0.1, 0.0, 0.1];
    let v = [0.0, 0.2, 0.0, -0.2, 0.0];
    let raw = UnifiedPoint::on_w1(&sys, 0.0, &q, &v).unwrap();
    let pt = project(&chain, &raw, ProjectionVars::PositionVelocityMomentum, 1e-12, 30).unwrap().0;
    (sys, chain, pt)
}

#[test]
fn harmonic_returns_after_one_period() {
    let sys = builtin("harmonic", &ModelParams::default()).unwrap();
    let chain = chain_for(&sys);
    let pt = UnifiedPoint::on_w1(&sys, 0.0, &[1.0], &[0.0]).unwrap();
    let opts = IntegratorOptions { step: 1e-3, t_end: 2.0 * PI, ..Default::default() };
    let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
    assert!((tr.last().unwrap().q[0] - 1.0).abs() < 1e-6);
    assert_eq!(tr.points[0].t, 0.0);
    assert!((tr.points[1].t - 1e-3).abs() < 1e-18);
}

#[test]
fn holonomy_along_trajectories() {
    for (name, q0, v0) in [("free_particle", 0.5, 3.0), ("harmonic", 1.0, 0.3)] {
        let sys = builtin(name, &ModelParams::default()).unwrap();
        let chain = chain_for(&sys);
        let pt = UnifiedPoint::on_w1(&sys, 0.0, &[q0], &[v0]).unwrap();
        let step = 1e-2;
        let opts = IntegratorOptions { step, t_end: 1.0, ..Default::default() };
        let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
        for w in tr.points.windows(2) {
            let dq = (w[1].q[0] - w[0].q[0]) / (w[1].t - w[0].t);
            let vmid = 0.5 * (w[1].v[0] + w[0].v[0]);
            assert!((dq - vmid).abs() <= 5.0 * step * step, "{name}");
        }
    }
}

#[test]
fn autonomous_energy_drift_is_small() {
    let sys = builtin("harmonic", &ModelParams { dof: 2, ..Default::default() }).unwrap();
    let chain = chain_for(&sys);
    let pt = UnifiedPoint::on_w1(&sys, 0.0, &[1.0, -0.5], &[0.2, 0.7]).unwrap();
    let opts = IntegratorOptions { step: 1e-3, t_end: 1.0, ..Default::default() };
    let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
    assert!(tr.energy_drift() < 1e-5);
}

#[test]
fn projection_bounds_the_residual() {
    let (sys, chain, pt) = wave_quartic();
    let tol = 1e-10;
    let opts = IntegratorOptions {
        step: 1e-3,
        t_end: 0.2,
        projection: Projection::Newton { tol, max_iter: 10 },
        ..Default::default()
    };
    let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
    assert!(tr.projected);
    assert!(tr.constraint_residual.iter().all(|&r| r <= 10.0 * tol));
    assert!(tr.max_el_residual() < 1e-8);
}

#[test]
fn projection_examples() {
    let (_, chain, pt) = wave_quartic();
    let same = project_onto_chain(&chain, &pt, 1e-12, 10).unwrap();
    assert!((same.p.clone() - &pt.p).amax() < 1e-14 && (same.v.clone() - &pt.v).amax() < 1e-14);

    let mut off = pt.clone();
    for (i, d) in [1e-3, -7e-4, 5e-4, 1e-3, -2e-4].iter().enumerate() {
        off.v[i] += d;
        off.p[i] -= 0.5 * d;
    }
    let (back, iters) = project(&chain, &off, ProjectionVars::VelocityMomentum, 1e-12, 10).unwrap();
    assert!(iters <= 5, "{iters} iterations");
    assert!(chain.max_residual(&back).unwrap() < 1e-12);
    assert_eq!(back.q, off.q);
    assert_eq!(back.t, off.t);

    let sys = builtin("harmonic", &ModelParams::default()).unwrap();
    let hc = chain_for(&sys);
    let bad = UnifiedPoint::new(0.3, &[0.4], &[0.9], &[-2.0]);
    let fixed = project_onto_chain(&hc, &bad, 1e-12, 5).unwrap();
    assert!((fixed.p[0] - fixed.v[0]).abs() < 1e-14);
}

#[test]
fn gauge_freedom_requires_a_rule() {
    let sys = builtin("singular_toy", &ModelParams::default()).unwrap();
    let chain = chain_for(&sys);
    let pt = UnifiedPoint::on_w1(&sys, 0.0, &[0.0, 0.0], &[1.0, 0.5]).unwrap();
    let opts = IntegratorOptions { step: 0.1, t_end: 1.0, ..Default::default() };
    assert!(matches!(integrate(&sys, &chain, &pt, &opts), Err(Error::VectorFieldUndetermined(1))));
    let zero = IntegratorOptions { gauge: GaugeRule::Zero, ..opts };
    let tr = integrate(&sys, &chain, &pt, &zero).unwrap();
    let end = tr.last().unwrap();
    assert!((end.q[0] - 1.0).abs() < 1e-12);
    assert!((end.q[1] - 0.5).abs() < 1e-12);
    assert!((end.v[1] - 0.5).abs() < 1e-12);
    let r = resolve_vector_field(&chain, &pt, &GaugeRule::Zero).unwrap();
    assert_eq!(r.free_dim, 1);
}

/// `½(1 + q²)v² + ½v·t − cos q`, regular everywhere.
struct Pendulumish;

impl Field for Pendulumish {
    fn arity(&self) -> usize {
        3
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let (t, q, v) = (x[0], x[1], x[2]);
        S::from_f64(0.5) * (S::one() + q * q) * v * v + S::from_f64(0.5) * v * t - q.cos()
    }
}

#[test]
fn unified_and_direct_pipelines_agree() {
    let sys = LagrangianSystem::new("pendulumish", 1, Pendulumish).unwrap();
    let chain = chain_for(&sys);
    let pt = UnifiedPoint::on_w1(&sys, 0.0, &[0.3], &[-0.4]).unwrap();
    let opts = IntegratorOptions { step: 1e-3, t_end: 1.0, ..Default::default() };
    let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
    let direct = direct_el_oracle(&sys, 0.0, &[0.3], &[-0.4], 1e-3, 1.0).unwrap();
    for (p, q) in tr.points.iter().zip(&direct.q) {
        assert!((p.q[0] - q[0]).abs() < 1e-8);
    }
}

#[test]
fn wave_residual_stays_small_without_projection() {
    let (sys, chain, pt) = wave_quartic();
    let opts = IntegratorOptions { step: 1e-3, t_end: 0.5, projection: Projection::Off, ..Default::default() };
    let tr = integrate(&sys, &chain, &pt, &opts).unwrap();
    assert!(tr.max_constraint_residual() < 1e-6);
}

#[test]
fn position_only_residual_is_reported_not_chased() {
    let (_, chain, pt) = wave_quartic();
    let mut off = pt.clone();
    off.q[2] += 1e-6;
    off.v[1] += 1e-4;
    let r = project_reachable(&chain, &off, ProjectionVars::VelocityMomentum, 1e-12, 10).unwrap();
    assert_eq!(r.point.q, off.q);
    assert!(r.unreachable > 1e-9 && r.unreachable <= r.residual);
    assert!(matches!(
        project(&chain, &off, ProjectionVars::VelocityMomentum, 1e-12, 10),
        Err(Error::NoConvergence { .. })
    ));
    let full = project_reachable(&chain, &off, ProjectionVars::PositionVelocityMomentum, 1e-12, 10).unwrap();
    assert_eq!(full.unreachable, 0.0);
    assert!(full.residual <= 1e-12);
}

#[test]
fn coarse_steps_fail_on_position_drift() {
    let sys = semidiscrete_wave(&WaveModelParams::quartic(4, "zero").unwrap());
    let chain = chain_for(&sys);
    let x: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
    let q: Vec<f64> = x.iter().map(|x| 0.3 * (2.0 * PI * x).sin() + 0.1 * (4.0 * PI * x).cos()).collect();
    let v: Vec<f64> = x.iter().map(|x| 0.5 * (2.0 * PI * x).cos()).collect();
    let raw = UnifiedPoint::on_w1(&sys, 0.0, &q, &v).unwrap();
    let pt = project(&chain, &raw, ProjectionVars::PositionVelocityMomentum, 1e-12, 30).unwrap().0;
    let coarse = IntegratorOptions { step: 1e-3, t_end: 0.1, ..Default::default() };
    assert!(matches!(integrate(&sys, &chain, &pt, &coarse), Err(Error::ProjectionFailed(_))));
    let fine = IntegratorOptions { step: 1e-4, ..coarse };
    assert!(integrate(&sys, &chain, &pt, &fine).unwrap().max_constraint_residual() < 1e-8);
}

#[test]
fn contradiction_toy_terminates_inconsistent() {
    let sys = builtin("contradiction_toy", &ModelParams::default()).unwrap();
    assert_eq!(chain_for(&sys).termination, Some(srusk::Termination::Inconsistent));
    let free = builtin("contradiction_toy", &ModelParams { force: 0.0, ..Default::default() }).unwrap();
    assert_eq!(chain_for(&free).termination, Some(srusk::Termination::GaugeFreedom { dim: 1 }));
    assert!(matches!(builtin("pendulum", &ModelParams::default()), Err(Error::UnknownModel(_))));
}
