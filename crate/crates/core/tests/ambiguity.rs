use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robust_dp::ambiguity::{
    adaptive_radius_multidim, estimate_theta, family_distance, lipschitz_audit, membership,
    sample_measures, transport_between_balls, AmbiguityKernel, Law, ParamFamily,
    ParametricCenter, RadiusSchedule, ReferenceKernel,
};
use robust_dp::measures::{w_q_1d, w_q_discrete, DiscreteMeasure, LocalSpace};

fn ball(reference: DiscreteMeasure, eps: f64) -> AmbiguityKernel {
    AmbiguityKernel::WassersteinBall {
        reference: ReferenceKernel::Constant(reference),
        radius: RadiusSchedule::Constant(eps),
        q: 1.0,
        space: LocalSpace::bounded(1, 2.0),
    }
}

fn two_point() -> DiscreteMeasure {
    DiscreteMeasure::uniform(vec![vec![-1.0], vec![1.0]]).unwrap()
}

#[test]
fn reference_is_a_member_with_full_slack() {
    let k = ball(two_point(), 0.3);
    let m = membership(&k, &[], &Law::Discrete(two_point())).unwrap();
    assert!(m.inside);
    assert_abs_diff_eq!(m.slack, 0.3, epsilon = 1e-12);
}

#[test]
fn dirac_inside_unit_ball() {
    let k = ball(DiscreteMeasure::dirac(vec![0.0]), 1.0);
    let m = membership(&k, &[], &Law::Discrete(DiscreteMeasure::dirac(vec![0.5]))).unwrap();
    assert!(m.inside);
    assert_abs_diff_eq!(m.slack, 0.5, epsilon = 1e-12);
}

#[test]
fn zero_radius_admits_only_the_reference() {
    let k = ball(two_point(), 0.0);
    let other = DiscreteMeasure::uniform(vec![vec![-1.0], vec![0.9]]).unwrap();
    assert!(!membership(&k, &[], &Law::Discrete(other)).unwrap().inside);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let laws = sample_measures(&k, &[], 5, &mut rng).unwrap();
    assert_eq!(laws.len(), 5);
    for l in laws {
        assert_eq!(l.as_discrete().unwrap().canonical(), two_point().canonical());
    }
}

#[test]
fn parametric_samples_are_members() {
    let k = AmbiguityKernel::ParametricBall {
        center: ParametricCenter {
            family: ParamFamily::Exponential,
            theta0: vec![2.0],
        },
        radius: RadiusSchedule::Constant(0.5),
        atoms: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for law in sample_measures(&k, &[], 50, &mut rng).unwrap() {
        let Law::Parametric { theta, .. } = &law else {
            panic!("expected a parametric law");
        };
        assert!((1.5..=2.5).contains(&theta[0]), "{theta:?}");
        assert!(membership(&k, &[], &law).unwrap().inside);
    }
}

#[test]
fn family_distance_examples() {
    let n = ParamFamily::NormalDiag { dim: 1 };
    assert_abs_diff_eq!(
        family_distance(&n, &[0.0, 1.0], &[0.0, 2.0], 2.0).unwrap(),
        1.0,
        epsilon = 1e-12
    );
    let e = ParamFamily::Exponential;
    assert_abs_diff_eq!(family_distance(&e, &[1.0], &[3.0], 1.0).unwrap(), 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(
        family_distance(&e, &[0.0], &[1.0], 2.0).unwrap(),
        2f64.sqrt(),
        epsilon = 1e-12
    );
}

#[test]
fn exponential_distance_matches_fine_discretisations() {
    let e = ParamFamily::Exponential;
    let a = e.discretize(&[1.0], 4000).unwrap();
    let b = e.discretize(&[2.5], 4000).unwrap();
    let numeric = w_q_1d(&a, &b, 1.0).unwrap();
    assert_abs_diff_eq!(numeric, 1.5, epsilon = 5e-3);
}

#[test]
fn estimator_examples() {
    let e = estimate_theta(&ParamFamily::Exponential, &[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    assert_abs_diff_eq!(e[0], 2.0, epsilon = 1e-12);
    let n = ParamFamily::NormalDiag { dim: 1 };
    let t = estimate_theta(&n, &[vec![0.0], vec![2.0]]).unwrap();
    assert_abs_diff_eq!(t[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(t[1], std::f64::consts::PI.sqrt(), epsilon = 1e-12);
    let flat = estimate_theta(&n, &vec![vec![0.4]; 4]).unwrap();
    assert_eq!(flat[1], 0.0);
}

#[test]
fn gluing_fixes_measures_between_identical_balls() {
    let mu1 = DiscreteMeasure::uniform(vec![vec![-0.8], vec![1.1]]).unwrap();
    let out = transport_between_balls(&mu1, &two_point(), 0.3, &two_point(), 0.3, 1.0).unwrap();
    assert!(w_q_discrete(&out, &mu1, 1.0).unwrap() < 1e-12);

    let ref2 = DiscreteMeasure::uniform(vec![vec![-0.5], vec![0.5]]).unwrap();
    let out = transport_between_balls(&two_point(), &two_point(), 0.3, &ref2, 0.1, 1.0).unwrap();
    assert!(w_q_discrete(&out, &ref2, 1.0).unwrap() < 1e-12);
}

#[test]
fn multidim_radius_is_nonincreasing_in_the_sample_size() {
    for d in [2, 3, 5] {
        let mut last = f64::INFINITY;
        for n in (2..300_000).step_by(97) {
            let r = adaptive_radius_multidim(d, 0.08, n, 0.9).unwrap();
            assert!(r > 0.0 && r <= last, "d = {d}: radius {r} after {last} at n = {n}");
            last = r;
        }
    }
    // Below the clipping threshold the bracket is the half-diameter C√5/2.
    let small = adaptive_radius_multidim(5, 0.08, 200, 0.9).unwrap();
    assert_abs_diff_eq!(small, 64.0 / 2.7 * 0.08 * 5f64.sqrt() / 2.0, epsilon = 1e-12);
}

#[test]
fn one_dimensional_radius_halves_at_four_times_the_size() {
    let r = RadiusSchedule::Adaptive1D { h: 0.5, n: 100 };
    let small = r.radius(&[]).unwrap();
    let big = RadiusSchedule::Adaptive1D { h: 0.5, n: 400 }.radius(&[]).unwrap();
    assert_abs_diff_eq!(big, small / 2.0, epsilon = 1e-15);
}

#[test]
fn audits_of_constant_kernels_report_zero() {
    let k = ball(two_point(), 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let same = lipschitz_audit(&k, &[vec![0.3]], &[vec![0.3]], 8, 0.0, &mut rng).unwrap();
    assert_eq!(same.max_ratio, 0.0);
    let moved = lipschitz_audit(&k, &[vec![0.3]], &[vec![-1.2]], 8, 0.0, &mut rng).unwrap();
    assert!(moved.max_ratio < 1e-12, "{}", moved.max_ratio);
    assert!(moved.witnesses_inside);
}

fn arb_measure() -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..=4).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.5..1.5f64, n),
            prop::collection::vec(0.1..1.0f64, n),
        )
            .prop_map(|(x, w)| {
                let s: f64 = w.iter().sum();
                DiscreteMeasure::new(
                    x.into_iter().map(|v| vec![v]).collect(),
                    w.into_iter().map(|v| v / s).collect(),
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wasserstein_samples_always_pass_membership(seed in 0u64..10_000, eps in 0.0..0.5f64, r in arb_measure()) {
        let k = ball(r, eps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for law in sample_measures(&k, &[], 6, &mut rng).unwrap() {
            prop_assert!(membership(&k, &[], &law).unwrap().inside);
        }
    }

    #[test]
    fn glued_measure_lands_in_the_second_ball(
        ref1 in arb_measure(),
        ref2 in arb_measure(),
        target in arb_measure(),
        eps1 in 0.05..0.6f64,
        eps2 in 0.0..0.6f64,
    ) {
        // Pull an arbitrary measure into the first ball before gluing.
        let d = w_q_discrete(&target, &ref1, 1.0).unwrap();
        let mu1 = if d <= eps1 {
            target
        } else {
            let s = eps1 / d;
            let mix = robust_dp::measures::optimal_coupling(&ref1, &target, 1.0).unwrap();
            let mut pts = Vec::new();
            let mut ws = Vec::new();
            for (i, j, w) in mix.plan.iter().copied() {
                let a = ref1.support()[i][0];
                let b = target.support()[j][0];
                pts.push(vec![a + s * (b - a)]);
                ws.push(w);
            }
            DiscreteMeasure::new(pts, ws).unwrap()
        };
        let mu2 = transport_between_balls(&mu1, &ref1, eps1, &ref2, eps2, 1.0).unwrap();
        let lam = robust_dp::geometry::shrink_factor(eps1, eps2);
        let w_refs = w_q_discrete(&ref1, &ref2, 1.0).unwrap();
        let w_in = w_q_discrete(&mu1, &ref1, 1.0).unwrap();
        prop_assert!(w_q_discrete(&mu2, &ref2, 1.0).unwrap() <= eps2 + 1e-9);
        prop_assert!(w_q_discrete(&mu1, &mu2, 1.0).unwrap() <= w_refs + lam * w_in + 1e-9);
    }

    #[test]
    fn exponential_mean_maximises_the_likelihood(xs in prop::collection::vec(0.01..3.0f64, 1..12)) {
        let path: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let th = estimate_theta(&ParamFamily::Exponential, &path).unwrap()[0];
        let ll = |t: f64| -(xs.len() as f64) * t.ln() - xs.iter().sum::<f64>() / t;
        prop_assert!(ll(th + 1e-3) <= ll(th));
        prop_assert!(ll(th - 1e-3) <= ll(th));
    }

    #[test]
    fn family_distance_is_a_metric(a in 0.0..4.0f64, b in 0.0..4.0f64, c in 0.0..4.0f64) {
        let e = ParamFamily::Exponential;
        let d = |x: f64, y: f64| family_distance(&e, &[x], &[y], 1.0).unwrap();
        prop_assert!((d(a, b) - d(b, a)).abs() < 1e-12);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-12);
        prop_assert_eq!(d(a, a), 0.0);
    }
}
