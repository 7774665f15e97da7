use nalgebra::DVector;
use proptest::prelude::*;
use srusk::autodiff::{gradient, jet2};
use srusk::constraints::{run_constraint_algorithm, sample_points, tangency_system, ChainOptions, SampleBox};
use srusk::lagrangian::{legendre_invert, legendre_restricted, velocity_hessian, NewtonOptions, DEFAULT_RANK_TOL};
use srusk::linalg::{sign_normalized, SortedSvd};
use srusk::models::{builtin, semidiscrete_wave, ModelParams, WaveModelParams};
use srusk::unified::{omega0_matrix, solve_vector_field};
use srusk::{Field, LagrangianSystem, Scalar, UnifiedPoint};

/// `½ vᵀMv + a·sin(b·q + c·t) + d·(q·v)`, with `M` symmetric positive definite.
#[derive(Clone, Debug)]
struct Regular {
    n: usize,
    m: Vec<f64>,
    a: f64,
    b: Vec<f64>,
    c: f64,
    d: f64,
}

impl Field for Regular {
    fn arity(&self) -> usize {
        2 * self.n + 1
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let n = self.n;
        let (t, q, v) = (x[0], &x[1..1 + n], &x[1 + n..1 + 2 * n]);
        let mut kin = S::zero();
        for i in 0..n {
            for j in 0..n {
                kin += S::from_f64(0.5 * self.m[i * n + j]) * v[i] * v[j];
            }
        }
        let arg: S = q.iter().zip(&self.b).map(|(qi, bi)| S::from_f64(*bi) * *qi).sum::<S>() + S::from_f64(self.c) * t;
        let cross: S = q.iter().zip(v).map(|(a, b)| *a * *b).sum();
        kin + S::from_f64(self.a) * arg.sin() + S::from_f64(self.d) * cross
    }
}

fn regular_strategy() -> impl Strategy<Value = Regular> {
    (1usize..4).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0..1.0f64, n * n),
            -2.0..2.0f64,
            prop::collection::vec(-1.5..1.5f64, n),
            -1.0..1.0f64,
            -1.0..1.0f64,
        )
            .prop_map(move |(r, a, b, c, d)| {
                // M = RᵀR + I.
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        m[i * n + j] =
                            (0..n).map(|k| r[k * n + i] * r[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
                    }
                }
                Regular { n, m, a, b, c, d }
            })
    })
}

fn point(n: usize) -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
    (-1.0..1.0f64, prop::collection::vec(-1.0..1.0f64, n), prop::collection::vec(-1.0..1.0f64, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hessian_is_bitwise_symmetric(f in regular_strategy(), seed in any::<u64>()) {
        let x: Vec<f64> = (0..f.arity()).map(|i| (((seed >> (i % 60)) & 0xff) as f64 / 128.0) - 1.0).collect();
        let j = jet2(&f, &x).unwrap();
        prop_assert_eq!(j.hessian.clone(), j.hessian.transpose());
        let g = gradient(&f, &x).unwrap();
        prop_assert_eq!(g, j.gradient);
    }

    #[test]
    fn legendre_round_trip(f in regular_strategy(), s in point(3)) {
        let n = f.n;
        let sys = LagrangianSystem::new("reg", n, f).unwrap();
        let (t, q, v) = (s.0, &s.1[..n], &s.2[..n]);
        let p = legendre_restricted(&sys, t, q, v).unwrap();
        let back = legendre_invert(&sys, t, q, p.as_slice(), &vec![0.0; n], NewtonOptions::default()).unwrap();
        prop_assert!((back - DVector::from_column_slice(v)).amax() < 1e-9);
    }

    #[test]
    fn vector_field_annihilates_omega(f in regular_strategy(), s in point(3)) {
        let n = f.n;
        let sys = LagrangianSystem::new("reg", n, f).unwrap();
        let pt = UnifiedPoint::on_w1(&sys, s.0, &s.1[..n], &s.2[..n]).unwrap();
        let sol = solve_vector_field(&sys, &pt, DEFAULT_RANK_TOL).unwrap();
        let x = DVector::from_vec(sol.direction(&[]));
        let m = omega0_matrix(&sys, &pt).unwrap();
        // i(X₀)Ω₀ has components Σ_a X^a M_ab.
        let contraction = m.transpose() * &x;
        prop_assert!(contraction.amax() < 1e-10 * (1.0 + m.amax() * x.amax()));
        prop_assert_eq!(m.clone(), -m.transpose());
    }

    #[test]
    fn sign_normalization_is_canonical(v in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        let u = DVector::from_vec(v);
        prop_assume!(u.norm() > 1e-6);
        let a = sign_normalized(u.clone());
        let b = sign_normalized(-u);
        prop_assert!((a.norm() - 1.0).abs() < 1e-14);
        prop_assert_eq!(&a, &b);
        let first = a.iter().copied().find(|c| c.abs() > 1e-12).unwrap();
        prop_assert!(first > 0.0);
    }

    #[test]
    fn wave_translation_invariance(s in point(5), shift in -3.0..3.0f64) {
        let sys = semidiscrete_wave(&WaveModelParams::quartic(4, "zero").unwrap());
        let (t, q, v) = s;
        let moved: Vec<f64> = q.iter().map(|x| x + shift).collect();
        let l0 = sys.eval(t, &q, &v).unwrap();
        let l1 = sys.eval(t, &moved, &v).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-12);
        let w0 = velocity_hessian(&sys, t, &q, &v).unwrap();
        let w1 = velocity_hessian(&sys, t, &moved, &v).unwrap();
        prop_assert!((w0 - w1).amax() < 1e-14);
    }
}

#[test]
fn wave_kernel_is_one_dimensional_up_to_64() {
    for n in 2..=64 {
        let sys = semidiscrete_wave(&WaveModelParams::quartic(n, "sine_gordon_g").unwrap());
        let m = n + 1;
        let q: Vec<f64> = (0..m).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..m).map(|i| (i as f64 * 1.3).cos()).collect();
        let w = velocity_hessian(&sys, 0.2, &q, &v).unwrap();
        let s = SortedSvd::new(&w).singular_values;
        assert!(s[m - 1] < 1e-12, "N={n}: smallest {}", s[m - 1]);
        // W = ¼BᵀB with B the two-point average; its nonzero eigenvalues are
        // cos²(πk/(2(N+1))), the smallest being sin²(π/(2(N+1))).
        let exact = (std::f64::consts::PI / (2.0 * m as f64)).sin().powi(2);
        assert!((s[m - 2] - exact).abs() < 1e-12, "N={n}: second smallest {} vs {exact}", s[m - 2]);
        if n <= 48 {
            assert!(s[m - 2] > 1e-3);
        }
    }
}

#[test]
fn tangency_closes_on_final_chain() {
    for name in ["harmonic", "singular_toy", "wave"] {
        let params = ModelParams { g: "sine_gordon_g".into(), ..Default::default() };
        let sys = builtin(name, &params).unwrap();
        let samples = sample_points(&sys, &SampleBox::default(), 16, 21).unwrap();
        let chain = run_constraint_algorithm(&sys, &samples, ChainOptions::default()).unwrap();
        for pt in &chain.sample_points {
            let ts = tangency_system(&chain, pt, DEFAULT_RANK_TOL).unwrap();
            // Minimum-norm λ completing the determined directions.
            let lambda = SortedSvd::new(&ts.b).solve_min_norm(&(-&ts.a), 1e-9);
            let closure = &ts.a + &ts.b * lambda;
            assert!(closure.amax() < 1e-8, "{name}: {}", closure.amax());
        }
    }
}

#[test]
fn sample_points_are_reproducible() {
    let sys = builtin("wave", &ModelParams::default()).unwrap();
    let a = sample_points(&sys, &SampleBox::default(), 10, 42).unwrap();
    let b = sample_points(&sys, &SampleBox::default(), 10, 42).unwrap();
    let c = sample_points(&sys, &SampleBox::default(), 10, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn f32_tower_differentiates() {
    let f = Regular { n: 1, m: vec![2.0], a: 0.0, b: vec![0.0], c: 0.0, d: 0.0 };
    let j = jet2(&f, &[0.0f32, 0.5, 1.5]).unwrap();
    assert_eq!(j.gradient[2], 3.0f32);
    assert_eq!(j.hessian[(2, 2)], 2.0f32);
}
