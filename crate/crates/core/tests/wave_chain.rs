use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srusk::constraints::{
    extend_chain, project, run_constraint_algorithm, sample_points, tangency_system, ChainOptions, ChainStep,
    ConstraintChain, ProjectionVars, SampleBox, Termination,
};
use srusk::lagrangian::DEFAULT_RANK_TOL;
use srusk::models::{potential_named, semidiscrete_wave, sigma_named, wave_reference_constraints, WaveModelParams};
use srusk::{Field, LagrangianSystem, UnifiedPoint};

fn chain_for(params: &WaveModelParams, seed: u64) -> (LagrangianSystem, ConstraintChain) {
    let sys = semidiscrete_wave(params);
    let s = sample_points(&sys, &SampleBox::default(), 32, seed).unwrap();
    let chain = run_constraint_algorithm(&sys, &s, ChainOptions::default()).unwrap();
    (sys, chain)
}

/// Random points on the zero set of the first `levels` levels.
fn on_levels(
    sys: &LagrangianSystem,
    chain: &ConstraintChain,
    levels: usize,
    count: usize,
    seed: u64,
) -> Vec<UnifiedPoint> {
    let sub = chain.truncated(levels);
    let raw = sample_points(sys, &SampleBox::default(), count, seed).unwrap();
    raw.iter().map(|p| project(&sub, p, ProjectionVars::PositionVelocityMomentum, 1e-11, 30).unwrap().0).collect()
}

/// Worst relative mismatch between the discovered level-`level` constraint
/// and its reference after fixing scale and sign at the first point.
fn max_relative_mismatch(
    chain: &ConstraintChain,
    level: usize,
    reference: &srusk::ConstraintFunction,
    pts: &[UnifiedPoint],
) -> f64 {
    let disc = &chain.levels[level - 1][0];
    let scale = reference.value(&pts[0]).unwrap() / disc.value(&pts[0]).unwrap();
    let refs: Vec<f64> = pts.iter().map(|p| reference.value(p).unwrap()).collect();
    let floor = 1e-6 * refs.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    pts.iter()
        .zip(&refs)
        .map(|(p, r)| (scale * disc.value(p).unwrap() - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}

#[test]
fn quartic_chain_has_three_levels() {
    let params = WaveModelParams::quartic(4, "sine_gordon_g").unwrap();
    let (_, chain) = chain_for(&params, 11);
    assert_eq!(chain.level_sizes(), vec![5, 1, 1], "{:?}", chain.diagnostics);
    assert_eq!(chain.termination, Some(Termination::AllDetermined));
}

#[test]
fn discovered_constraints_match_reference() {
    let params = WaveModelParams::quartic(4, "sine_gordon_g").unwrap();
    let (sys, chain) = chain_for(&params, 5);
    let refs = wave_reference_constraints(&params);
    let on_w3 = on_levels(&sys, &chain, 3, 20, 99);
    for p in &on_w3 {
        for r in &refs {
            assert!(r.value(p).unwrap().abs() < 1e-9);
        }
    }
    let on_w1 = on_levels(&sys, &chain, 1, 50, 98);
    let on_w2 = on_levels(&sys, &chain, 2, 50, 97);
    let m2 = max_relative_mismatch(&chain, 2, &refs[5], &on_w1);
    let m3 = max_relative_mismatch(&chain, 3, &refs[6], &on_w2);
    assert!(m2 < 1e-8 && m3 < 1e-8, "{m2:e} {m3:e}");
}

#[test]
fn level_count_is_three_across_grid_sizes() {
    for n in 2..=8 {
        for sigma in ["linear", "quartic", "modulated_quartic"] {
            let params = WaveModelParams::new(
                n,
                1.0,
                sigma_named(sigma, &[]).unwrap(),
                potential_named("quadratic", &[]).unwrap(),
            )
            .unwrap();
            let (_, chain) = chain_for(&params, n as u64);
            assert_eq!(chain.levels.len(), 3, "N={n} σ={sigma}: {:?}", chain.diagnostics);
            assert_eq!(chain.level_sizes(), vec![n + 1, 1, 1]);
            assert_eq!(chain.termination, Some(Termination::AllDetermined));
        }
    }
}

#[test]
fn level_cap_is_reported() {
    let params = WaveModelParams::quartic(4, "zero").unwrap();
    let sys = semidiscrete_wave(&params);
    let s = sample_points(&sys, &SampleBox::default(), 8, 1).unwrap();
    let opts = ChainOptions { max_levels: 1, ..Default::default() };
    let chain = run_constraint_algorithm(&sys, &s, opts).unwrap();
    assert_eq!(chain.termination, Some(Termination::MaxLevelsReached));
    assert_eq!(chain.level_sizes(), vec![5]);
}

#[test]
fn chain_is_deterministic() {
    let params = WaveModelParams::quartic(4, "sine_gordon_g").unwrap();
    let (_, a) = chain_for(&params, 3);
    let (_, b) = chain_for(&params, 3);
    let dirs = |c: &ConstraintChain| c.constraints().map(|f| format!("{:?}", f.provenance)).collect::<Vec<_>>();
    assert_eq!(dirs(&a), dirs(&b));
    assert_eq!(a.sample_points, b.sample_points);
}

#[test]
fn tangency_rows_reproduce_averaged_conditions() {
    // At a W₁ point with only the primaries, B vanishes and A's rows read
    // (H − W·G_particular)-type expressions whose kernel component is the
    // secondary constraint.
    let params = WaveModelParams::quartic(4, "sine_gordon_g").unwrap();
    let sys = semidiscrete_wave(&params);
    let s = sample_points(&sys, &SampleBox::default(), 1, 4).unwrap();
    let mut chain = ConstraintChain::primary(&sys, ChainOptions::default());
    chain.sample_points = s.clone();
    let ts = tangency_system(&chain, &s[0], DEFAULT_RANK_TOL).unwrap();
    assert_eq!(ts.b.ncols(), 1);
    assert!(ts.b.amax() < 1e-12);
    // Row r: dφ_r(X₀(G)) = b_r − (W·G)_r, which holds for every G.
    let w = &ts.solution.velocity_hessian;
    let g = &ts.solution.g_particular;
    let expect = &ts.solution.rhs - w * g;
    assert!((&ts.a - expect).amax() < 1e-12);
    // Interior rows of W·G are (Gⁱ⁻¹ + 2Gⁱ + Gⁱ⁺¹)/4, end rows (G⁰ + G¹)/4.
    let wg = w * g;
    assert!((wg[0] - (g[0] + g[1]) / 4.0).abs() < 1e-14);
    assert!((wg[2] - (g[1] + 2.0 * g[2] + g[3]) / 4.0).abs() < 1e-14);
    assert!(matches!(extend_chain(&mut chain).unwrap(), ChainStep::Extended { level: 2, added: 1 }));
}

#[test]
fn shifted_base_point_changes_nothing_with_zero_potential() {
    let params = WaveModelParams::quartic(4, "zero").unwrap();
    let refs = wave_reference_constraints(&params);
    let sys = semidiscrete_wave(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: f64 = rng.gen_range(-3.0..3.0);
        let mut y = x.clone();
        for v in &mut y[1..6] {
            *v += c;
        }
        let l = |x: &[f64]| sys.lagrangian().eval(&x[..11]);
        assert!((l(&x) - l(&y)).abs() < 1e-12);
        for r in &refs[5..] {
            assert!((r.evaluator.eval(&x) - r.evaluator.eval(&y)).abs() < 1e-12);
        }
    }
}
