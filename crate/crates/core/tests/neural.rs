use robust_dp::ambiguity::{
    ball_inf_on_grid, AmbiguityKernel, RadiusSchedule, ReferenceKernel,
};
use robust_dp::controls::ActionSpec;
use robust_dp::dp::{ControlProblem, Objective, Policy};
use robust_dp::instances::tracking_instance;
use robust_dp::measures::{DiscreteMeasure, LocalSpace};
use robust_dp::neural::{
    dual_inner_value, log_to_csv, train_algorithm1, train_algorithm2, ModelDump, RawFeatures,
    Sampling, TrainConfig, ZGrid,
};
use std::sync::Arc;

fn m1(pts: &[f64], w: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(pts.iter().map(|x| vec![*x]).collect(), w.to_vec()).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![16, 16],
        lr: 1e-2,
        batch: 32,
        n_measures: 2,
        n_mc: 16,
        iter_a: 300,
        iter_psi: 300,
        z_grid: ZGrid::Uniform(32),
        seed,
        sampling: Sampling::Uniform,
        exact_discrete: true,
        lambda_init: 1.0,
        eval_samples: 256,
        features: None,
    }
}

fn one_stage(kernel: AmbiguityKernel) -> ControlProblem {
    ControlProblem {
        horizon: 1,
        space: LocalSpace::bounded(1, 1.0),
        actions: vec![ActionSpec::ConstantBox {
            lo: vec![-1.0],
            hi: vec![1.0],
            resolution: vec![41],
        }],
        kernels: vec![kernel],
        objective: Objective::new(|w, a| -(a[0][0] - 0.3 - w[0][0]).powi(2)),
        growth_p: 0.0,
        constants: None,
    }
}

#[test]
fn one_stage_concave_quadratic_finds_the_maximiser() {
    // E[-(a - 0.3 - ω)^2] with E ω = 0.1 is maximised at a = 0.4.
    let p = one_stage(AmbiguityKernel::Singleton(ReferenceKernel::Constant(m1(
        &[-0.4, 0.6],
        &[0.5, 0.5],
    ))));
    let model = train_algorithm1(&p, &small_config(1)).unwrap();
    let a = model.policy();
    let a0 = a.act(0, &[], &[]).unwrap()[0];
    assert!((a0 - 0.4).abs() < 0.05, "trained action {a0}");
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let p = one_stage(AmbiguityKernel::Singleton(ReferenceKernel::Constant(m1(
        &[-0.4, 0.6],
        &[0.5, 0.5],
    ))));
    let mut cfg = small_config(9);
    cfg.iter_a = 40;
    cfg.iter_psi = 40;
    let a = train_algorithm1(&p, &cfg).unwrap();
    let b = train_algorithm1(&p, &cfg).unwrap();
    assert_eq!(a.dump(), b.dump());
    assert_eq!(log_to_csv(&a.log).unwrap(), log_to_csv(&b.log).unwrap());
    cfg.seed = 10;
    let c = train_algorithm1(&p, &cfg).unwrap();
    assert_ne!(a.dump(), c.dump());
}

#[test]
fn single_measure_sampling_is_non_robust_training() {
    let reference = ReferenceKernel::Constant(m1(&[-0.4, 0.6], &[0.5, 0.5]));
    let single = one_stage(AmbiguityKernel::Singleton(reference.clone()));
    let ball = one_stage(AmbiguityKernel::WassersteinBall {
        reference,
        radius: RadiusSchedule::Constant(0.2),
        q: 1.0,
        space: LocalSpace::bounded(1, 1.0),
    });
    let mut cfg = small_config(4);
    cfg.n_measures = 1;
    cfg.iter_a = 30;
    cfg.iter_psi = 30;
    let a = train_algorithm1(&single, &cfg).unwrap();
    let b = train_algorithm1(&ball, &cfg).unwrap();
    assert_eq!(a.dump(), b.dump());
}

#[test]
fn dual_of_constant_function_is_shifted_constant() {
    let reference = m1(&[0.0, 0.5], &[0.5, 0.5]);
    let z: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 / 4.0]).collect();
    let v = dual_inner_value(&|_| 2.0, &reference, 0.3, 2.0, 1.7, &z).unwrap();
    assert!((v - (2.0 - 1.7 * 0.09)).abs() < 1e-14);
    assert!(dual_inner_value(&|_| 2.0, &reference, 0.3, 2.0, 1.7, &[]).is_err());
}

#[test]
fn zero_radius_dual_recovers_the_expectation() {
    let reference = m1(&[-0.5, 0.25, 1.0], &[0.2, 0.3, 0.5]);
    let psi = |x: &[f64]| x[0].sin();
    let mut z: Vec<Vec<f64>> = (0..=20).map(|k| vec![-1.0 + k as f64 / 10.0]).collect();
    z.push(vec![0.25]);
    let v = dual_inner_value(&psi, &reference, 0.0, 1.0, 1e6, &z).unwrap();
    let e = reference.expect(psi);
    assert!((v - e).abs() < 1e-12);
}

#[test]
fn dual_never_exceeds_the_primal_ball_infimum() {
    let reference = m1(&[-0.3, 0.2, 0.7], &[0.3, 0.3, 0.4]);
    let z: Vec<Vec<f64>> = (0..=16).map(|k| vec![-1.0 + k as f64 / 8.0]).collect();
    let psi = |x: &[f64]| (3.0 * x[0]).cos() + x[0];
    let vals: Vec<f64> = z.iter().map(|x| psi(x)).collect();
    let (primal, _) = ball_inf_on_grid(&reference, 0.15, 1.0, &z, &vals).unwrap();
    for k in 0..40 {
        let lam = 0.05 * 1.2f64.powi(k);
        let d = dual_inner_value(&psi, &reference, 0.15, 1.0, lam, &z).unwrap();
        assert!(d <= primal + 1e-12, "λ = {lam}: {d} > {primal}");
    }
}

#[test]
fn one_stage_dual_training_matches_the_primal_lp() {
    let grid: Vec<Vec<f64>> = (0..=20).map(|k| vec![-1.0 + k as f64 / 10.0]).collect();
    let reference = m1(&[-0.4, 0.6], &[0.5, 0.5]);
    let eps = 0.1;
    let p = one_stage(AmbiguityKernel::WassersteinBall {
        reference: ReferenceKernel::Constant(reference.clone()),
        radius: RadiusSchedule::Constant(eps),
        q: 1.0,
        space: LocalSpace::bounded(1, 1.0),
    });
    let mut cfg = small_config(2);
    cfg.z_grid = ZGrid::Fixed(grid.clone());
    cfg.iter_a = 600;
    let model = train_algorithm2(&p, &cfg).unwrap();
    let a0 = model.policy().act(0, &[], &[]).unwrap();
    let vals: Vec<f64> = grid
        .iter()
        .map(|z| p.objective.eval(std::slice::from_ref(z), std::slice::from_ref(&a0)))
        .collect();
    let (primal, _) = ball_inf_on_grid(&reference, eps, 1.0, &grid, &vals).unwrap();
    assert!(
        (model.value_estimate - primal).abs() < 1e-2,
        "dual {} vs primal {primal}",
        model.value_estimate
    );
}

#[test]
fn dual_training_is_reproducible_from_the_seed() {
    let p = tracking_instance(Some(0.1));
    let mut cfg = small_config(3);
    cfg.hidden = vec![12];
    cfg.iter_a = 60;
    cfg.iter_psi = 60;
    let a = train_algorithm2(&p, &cfg).unwrap();
    let b = train_algorithm2(&p, &cfg).unwrap();
    assert_eq!(a.dump(), b.dump());
    assert_eq!(a.value_estimate, b.value_estimate);
}

#[test]
fn dumped_networks_act_like_the_trained_ones() {
    let p = tracking_instance(Some(0.1));
    let mut cfg = small_config(8);
    cfg.hidden = vec![12];
    cfg.iter_a = 60;
    cfg.iter_psi = 60;
    let model = train_algorithm2(&p, &cfg).unwrap();
    let back = ModelDump::parse(&model.dump()).unwrap();
    assert_eq!(back.lambdas, model.lambdas);
    assert!(back.lambdas.iter().all(|l| l.is_some()));
    let features = Arc::new(RawFeatures::for_problem(&p).unwrap());
    let reread = back.policy(p.actions.clone(), features);
    let trained = model.policy();
    let a0 = trained.act(0, &[], &[]).unwrap();
    assert_eq!(reread.act(0, &[], &[]).unwrap(), a0);
    for x in [-0.9, -0.2, 0.0, 0.35, 1.0] {
        let path = vec![vec![x]];
        assert_eq!(
            reread.act(1, &path, std::slice::from_ref(&a0)).unwrap(),
            trained.act(1, &path, std::slice::from_ref(&a0)).unwrap()
        );
    }
    assert!(ModelDump::parse("# action 0\nnot a network\n").is_err());
}
