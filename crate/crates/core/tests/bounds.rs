use approx::assert_abs_diff_eq;
use robust_dp::ambiguity::{
    AmbiguityKernel, ParamFamily, ParametricCenter, RadiusSchedule, ReferenceKernel,
};
use robust_dp::bounds::{
    bounds_report, measure_values, mu_recursion, parametric_gap_bound, stability_bound,
    wasserstein_gap_bound, BoundsSetting, ParametricConstants, ThetaFn, TrueModel,
};
use robust_dp::controls::ActionSpec;
use robust_dp::dp::{ControlProblem, Objective, SolverConfig};
use robust_dp::measures::{DiscreteMeasure, LocalSpace};

fn m(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(points.iter().map(|&x| vec![x]).collect(), weights.to_vec()).unwrap()
}

/// `∫ |F(x) - G(x)| dx` for measures on the line.
fn w1_by_cdfs(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let mut xs: Vec<f64> = a.support().iter().chain(b.support()).map(|p| p[0]).collect();
    xs.sort_by(f64::total_cmp);
    let cdf = |m: &DiscreteMeasure, x: f64| -> f64 {
        m.atoms().filter(|(p, _)| p[0] <= x).map(|(_, w)| w).sum()
    };
    xs.windows(2)
        .map(|w| (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0]))
        .sum()
}

fn shifted(base: &DiscreteMeasure, by: f64) -> DiscreteMeasure {
    base.push_forward(|x| vec![x[0] + by])
}

struct Pair {
    true0: DiscreteMeasure,
    true1: (DiscreteMeasure, f64),
    ref0: DiscreteMeasure,
    ref1: (DiscreteMeasure, f64),
}

fn pair() -> Pair {
    Pair {
        true0: m(&[-1.0, 1.0], &[0.5, 0.5]),
        true1: (m(&[-0.3, 0.2, 0.6], &[0.3, 0.3, 0.4]), 0.5),
        ref0: m(&[-0.8, 1.1], &[0.4, 0.6]),
        ref1: (m(&[-0.2, 0.5], &[0.5, 0.5]), -0.2),
    }
}

fn setting(p: &Pair, eps: f64) -> BoundsSetting {
    let ball = |reference: ReferenceKernel| AmbiguityKernel::WassersteinBall {
        reference,
        radius: RadiusSchedule::Constant(eps),
        q: 1.0,
        space: LocalSpace::bounded(1, 3.0),
    };
    BoundsSetting {
        horizon: 2,
        truth: TrueModel::Kernels(vec![
            ReferenceKernel::Constant(p.true0.clone()),
            ReferenceKernel::Shift {
                base: p.true1.0.clone(),
                gamma: p.true1.1,
            },
        ]),
        kernels: vec![
            ball(ReferenceKernel::Constant(p.ref0.clone())),
            ball(ReferenceKernel::Shift {
                base: p.ref1.0.clone(),
                gamma: p.ref1.1,
            }),
        ],
        alpha: 1.0,
        l_psi: 1.3,
        l_a: vec![0.0, 0.0],
        l_ref: vec![0.0, 0.2],
        l_eps: vec![0.0, 0.0],
        parametric: None,
    }
}

#[test]
fn error_tables_match_direct_summation() {
    let p = pair();
    let mu = mu_recursion(&setting(&p, 1.0)).unwrap();
    let first = w1_by_cdfs(&p.true0, &p.ref0);
    let second: f64 = p
        .true0
        .atoms()
        .map(|(x, w)| {
            let t = shifted(&p.true1.0, p.true1.1 * x[0]);
            let r = shifted(&p.ref1.0, p.ref1.1 * x[0]);
            w * w1_by_cdfs(&t, &r)
        })
        .sum();
    assert_abs_diff_eq!(mu.err[0], first, epsilon = 1e-12);
    assert_abs_diff_eq!(mu.err[1], second, epsilon = 1e-12);
    assert_eq!(mu.eps, vec![1.0, 1.0]);
}

#[test]
fn identical_kernels_have_no_estimation_error() {
    let p = pair();
    let same = Pair {
        ref0: p.true0.clone(),
        ref1: p.true1.clone(),
        ..p
    };
    let s = setting(&same, 0.0);
    let mu = mu_recursion(&s).unwrap();
    assert!(mu.err.iter().all(|&e| e == 0.0));
    assert_eq!(stability_bound(&s, &mu), 0.0);
    assert_eq!(wasserstein_gap_bound(&s, &mu).unwrap(), 0.0);

    let problem = ControlProblem {
        horizon: 2,
        space: LocalSpace::bounded(1, 3.0),
        actions: vec![ActionSpec::ConstantFinite(vec![vec![-0.5], vec![0.5]]); 2],
        kernels: s.kernels.clone(),
        objective: Objective::new(|w, a| (w[0][0] - a[0][0]).cos() - (w[1][0] - a[1][0]).abs()),
        growth_p: 0.0,
        constants: None,
    };
    let v = measure_values(&problem, &s, &SolverConfig::default()).unwrap();
    assert_eq!(v.v_true, v.v_reference);
    assert_eq!(v.v_true, v.v_robust);
    let r = bounds_report(&s, Some(v), 0.0).unwrap();
    assert_eq!(r.stability_holds, Some(true));
    assert_eq!(r.robust_gap_holds, Some(true));
}

#[test]
fn one_stage_stability_is_the_scaled_distance() {
    let p = pair();
    let mut s = setting(&p, 0.5);
    s.horizon = 1;
    s.truth = TrueModel::Kernels(vec![ReferenceKernel::Constant(p.true0.clone())]);
    s.kernels.truncate(1);
    for v in [&mut s.l_a, &mut s.l_ref, &mut s.l_eps] {
        v.truncate(1);
    }
    let mu = mu_recursion(&s).unwrap();
    let expected = 1.3 * w1_by_cdfs(&p.true0, &p.ref0);
    assert_abs_diff_eq!(stability_bound(&s, &mu), expected, epsilon = 1e-12);
    assert_abs_diff_eq!(wasserstein_gap_bound(&s, &mu).unwrap(), 2.0 * 1.3 * 0.5, epsilon = 1e-12);
}

#[test]
fn doubling_the_radii_doubles_the_gap_bound() {
    let p = pair();
    let b = |eps: f64| {
        let s = setting(&p, eps);
        wasserstein_gap_bound(&s, &mu_recursion(&s).unwrap()).unwrap()
    };
    assert_abs_diff_eq!(b(2.0), 2.0 * b(1.0), epsilon = 1e-12);
}

#[test]
fn exponential_one_stage_bound() {
    let eps = 0.3;
    let s = BoundsSetting {
        horizon: 1,
        truth: TrueModel::Parametric {
            family: ParamFamily::Exponential,
            theta: ThetaFn::new(|_| vec![1.1]),
            atoms: 5,
        },
        kernels: vec![AmbiguityKernel::ParametricBall {
            center: ParametricCenter {
                family: ParamFamily::Exponential,
                theta0: vec![1.0],
            },
            radius: RadiusSchedule::Constant(eps),
            atoms: 5,
        }],
        alpha: 1.0,
        l_psi: 0.8,
        l_a: vec![0.0],
        l_ref: vec![0.0],
        l_eps: vec![0.0],
        parametric: Some(ParametricConstants {
            l_family: vec![1.0],
            l_estimator: vec![0.0],
        }),
    };
    let mu = mu_recursion(&s).unwrap();
    assert_abs_diff_eq!(parametric_gap_bound(&s, &mu).unwrap(), 2.0 * 0.8 * eps, epsilon = 1e-12);
}
