use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use robust_dp::ambiguity::{AmbiguityKernel, RadiusSchedule, ReferenceKernel};
use robust_dp::controls::ActionSpec;
use robust_dp::dp::{
    backward_induction_exact, brute_force_value, evaluate_policy, holder_constant_recursion,
    ControlProblem, DeclaredConstants, EvalMode, FnPolicy, FnSelection, Objective, ScenarioTree,
    SolverConfig,
};
use robust_dp::ambiguity::Law;
use robust_dp::measures::{DiscreteMeasure, LocalSpace};

fn dirac(x: f64) -> ReferenceKernel {
    ReferenceKernel::Constant(DiscreteMeasure::dirac(vec![x]))
}

fn signs() -> ActionSpec {
    ActionSpec::ConstantFinite(vec![vec![-1.0], vec![1.0]])
}

fn one_stage(kernel: AmbiguityKernel) -> ControlProblem {
    ControlProblem {
        horizon: 1,
        space: LocalSpace::bounded(1, 2.0),
        actions: vec![signs()],
        kernels: vec![kernel],
        objective: Objective::new(|w, a| a[0][0] * w[0][0]),
        growth_p: 0.0,
        constants: None,
    }
}

fn measure(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(points.iter().map(|&x| vec![x]).collect(), weights.to_vec()).unwrap()
}

fn wiggly(w: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
    (3.0 * (w[0][0] * a[0][0] + w[1][0] * a[1][0])).cos() - 0.1 * a[1][0] * a[1][0]
        + 0.3 * w[1][0] * a[0][0]
}

fn two_stage(kernels: Vec<AmbiguityKernel>) -> ControlProblem {
    let act = ActionSpec::ConstantFinite(vec![vec![-1.0], vec![0.0], vec![1.0]]);
    ControlProblem {
        horizon: 2,
        space: LocalSpace::bounded(1, 2.0),
        actions: vec![act.clone(), act],
        kernels,
        objective: Objective::new(wiggly),
        growth_p: 0.0,
        constants: None,
    }
}

fn exact(p: &ControlProblem) -> f64 {
    backward_induction_exact(p, &SolverConfig::default()).unwrap().value
}

#[test]
fn single_dirac_leaves_nothing_to_hedge() {
    assert_eq!(exact(&one_stage(AmbiguityKernel::Singleton(dirac(0.0)))), 0.0);
}

#[test]
fn adversary_flips_the_sign() {
    let p = one_stage(AmbiguityKernel::FiniteSet(vec![dirac(-1.0), dirac(1.0)]));
    assert_eq!(exact(&p), -1.0);
    let tree = ScenarioTree::build(&p, &SolverConfig::default()).unwrap();
    let report = brute_force_value(&p, &tree, 1_000).unwrap();
    assert_eq!(report.max_min, -1.0);
}

#[test]
fn singleton_kernels_reduce_to_plain_dynamic_programming() {
    let first = measure(&[-0.5, 1.0], &[0.25, 0.75]);
    let second = measure(&[-1.0, 0.2, 0.7], &[0.2, 0.5, 0.3]);
    let p = two_stage(vec![
        AmbiguityKernel::Singleton(ReferenceKernel::Constant(first.clone())),
        AmbiguityKernel::Singleton(ReferenceKernel::Constant(second.clone())),
    ]);
    // max_{a0} E_{ω1}[ max_{a1} E_{ω2} Ψ ].
    let acts = [-1.0, 0.0, 1.0];
    let mut best0 = f64::NEG_INFINITY;
    for &a0 in &acts {
        let mut outer = 0.0;
        for (x1, w1) in first.atoms() {
            let mut best1 = f64::NEG_INFINITY;
            for &a1 in &acts {
                let inner: f64 = second
                    .atoms()
                    .map(|(x2, w2)| w2 * wiggly(&[x1.clone(), x2.clone()], &[vec![a0], vec![a1]]))
                    .sum();
                best1 = best1.max(inner);
            }
            outer += w1 * best1;
        }
        best0 = best0.max(outer);
    }
    assert_abs_diff_eq!(exact(&p), best0, epsilon = 1e-12);
}

#[test]
fn zero_radius_ball_equals_the_singleton() {
    let reference = ReferenceKernel::Shift {
        base: measure(&[-0.4, 0.3], &[0.5, 0.5]),
        gamma: 0.5,
    };
    let ball = AmbiguityKernel::WassersteinBall {
        reference: reference.clone(),
        radius: RadiusSchedule::Constant(0.0),
        q: 1.0,
        space: LocalSpace::bounded(1, 2.0),
    };
    let first = AmbiguityKernel::Singleton(ReferenceKernel::Constant(measure(&[-0.5, 0.5], &[0.5, 0.5])));
    let cfg = SolverConfig::default();
    let a = backward_induction_exact(&two_stage(vec![first.clone(), ball]), &cfg).unwrap();
    let b = backward_induction_exact(&two_stage(vec![first, AmbiguityKernel::Singleton(reference)]), &cfg)
        .unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.policy_actions, b.policy_actions);
}

#[test]
fn dirac_kernels_evaluate_a_single_path() {
    let p = two_stage(vec![
        AmbiguityKernel::Singleton(dirac(0.3)),
        AmbiguityKernel::Singleton(dirac(-0.7)),
    ]);
    let policy = FnPolicy(|t: usize, _: &[Vec<f64>], _: &[Vec<f64>]| {
        Ok(vec![if t == 0 { 1.0 } else { -1.0 }])
    });
    let sel = FnSelection(|t: usize, _: &[Vec<f64>], _: &[Vec<f64>]| {
        Ok(Law::Discrete(DiscreteMeasure::dirac(vec![[0.3, -0.7][t]])))
    });
    let v = evaluate_policy(&p, &policy, &sel, EvalMode::Exact, 8).unwrap();
    assert_eq!(v.mean, wiggly(&[vec![0.3], vec![-0.7]], &[vec![1.0], vec![-1.0]]));
}

#[test]
fn holder_recursion_examples() {
    let c = DeclaredConstants {
        alpha: 1.0,
        l_psi: 1.5,
        c_psi: 0.7,
        l_a: vec![0.5, 1.0],
        l_p: vec![0.3, 0.0],
        c_p: vec![1.0, 1.0],
    };
    let r = holder_constant_recursion(&c, 2).unwrap();
    assert_eq!(r[2], (0.7, 1.5));
    assert_eq!(r[0].1, 4.0 * 1.5);
    assert_eq!(r[0].0, 4.0 * 0.7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn enlarging_the_sets_never_raises_the_value(
        xs in prop::collection::vec(-1.0..1.0f64, 8),
        extra_shift in -0.5..0.5f64,
    ) {
        let k = |a: f64, b: f64| ReferenceKernel::Constant(measure(&[a, b], &[0.5, 0.5]));
        let base = vec![k(xs[0], xs[1]), k(xs[2], xs[3])];
        let second = ReferenceKernel::Shift { base: measure(&[xs[4], xs[5]], &[0.4, 0.6]), gamma: 0.5 };
        let small = two_stage(vec![
            AmbiguityKernel::FiniteSet(base.clone()),
            AmbiguityKernel::FiniteSet(vec![second.clone()]),
        ]);
        let mut wide = base;
        wide.push(k(xs[6], xs[7]));
        let large = two_stage(vec![
            AmbiguityKernel::FiniteSet(wide),
            AmbiguityKernel::FiniteSet(vec![
                second,
                ReferenceKernel::Shift { base: measure(&[xs[4] + extra_shift, xs[5]], &[0.4, 0.6]), gamma: -0.3 },
            ]),
        ]);
        let v_small = exact(&small);
        let v_large = exact(&large);
        prop_assert!(v_large <= v_small + 1e-12, "{} > {}", v_large, v_small);
        let tree = ScenarioTree::build(&large, &SolverConfig::default()).unwrap();
        let bf = brute_force_value(&large, &tree, u64::MAX).unwrap();
        prop_assert!((bf.max_min - v_large).abs() <= 1e-12);
    }
}
