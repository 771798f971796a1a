//! Problem generators: random finite problems small enough for exhaustive
//! enumeration, audit problems for the error bounds, and fixed fixtures
//! shared by tests and the command line.

use crate::ambiguity::{
    AmbiguityKernel, ParamFamily, ParametricCenter, RadiusSchedule, ReferenceKernel, TabularKernel,
};
use crate::bounds::{BoundsSetting, ThetaFn, TrueModel};
use crate::controls::ActionSpec;
use crate::dp::{ControlProblem, Objective, ScenarioTree, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::measures::{DiscreteMeasure, LocalSpace};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Size limits for [`random_finite_instance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstanceConfig {
    pub max_horizon: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_candidates: usize,
    /// Cap on policies × adversaries for the exhaustive oracle.
    pub budget: u64,
}

impl Default for RandomInstanceConfig {
    fn default() -> Self {
        Self {
            max_horizon: 3,
            max_states: 4,
            max_actions: 3,
            max_candidates: 3,
            budget: 200_000,
        }
    }
}

/// Points of the lattice `{-1, -3/4, ..., 1}`, all distinct.
fn lattice_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = sample(rng, 9, n)
        .into_iter()
        .map(|k| -1.0 + 0.25 * k as f64)
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// `Σ_j c_j sin(Σ_t u_jt ω_t + Σ_t v_jt a_t + φ_j)` with random
/// coefficients; one-dimensional states and actions.
pub fn random_smooth_objective(rng: &mut ChaCha8Rng, horizon: usize) -> Objective {
    let terms: Vec<(f64, Vec<f64>, Vec<f64>, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                (0..horizon).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..horizon).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    Objective::new(move |w, a| {
        terms
            .iter()
            .map(|(c, u, v, phi)| {
                let z: f64 = u.iter().zip(w).map(|(x, p)| x * p[0]).sum::<f64>()
                    + v.iter().zip(a).map(|(x, p)| x * p[0]).sum::<f64>();
                c * (z + phi).sin()
            })
            .sum()
    })
}

fn index_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

fn random_tabular(rng: &mut ChaCha8Rng, grid: &[Point], t: usize) -> Result<TabularKernel> {
    let n = grid.len();
    let mut table = BTreeMap::new();
    for key in index_paths(n, t) {
        let k = rng.gen_range(1..=n);
        let mut idx = sample(rng, n, k).into_vec();
        idx.sort_unstable();
        let pts = idx.iter().map(|&i| grid[i].clone()).collect();
        table.insert(key, DiscreteMeasure::new(pts, random_weights(rng, k))?);
    }
    Ok(TabularKernel {
        grid: grid.to_vec(),
        table,
    })
}

fn enumeration_size(tree: &ScenarioTree) -> Option<u64> {
    let mut total = 1u64;
    for t in 0..tree.horizon() {
        for n in &tree.stages[t] {
            total = total.checked_mul(n.actions.len() as u64)?;
            total = total.checked_mul(n.candidate_count() as u64)?;
        }
    }
    Some(total)
}

/// A random problem on a finite state grid: finite sets of tabular kernels
/// keyed on the full path, constant finite action sets and a random smooth
/// objective. Draws are repeated until the exhaustive enumeration fits in
/// the budget; the number of rejected draws is returned alongside.
pub fn random_finite_instance(
    seed: u64,
    cfg: &RandomInstanceConfig,
) -> Result<(ControlProblem, usize)> {
    if cfg.max_horizon == 0
        || cfg.max_states == 0
        || cfg.max_actions == 0
        || cfg.max_candidates == 0
    {
        return Err(Error::InvalidInput(
            "instance limits must be positive".into(),
        ));
    }
    if cfg.max_states > 9 || cfg.max_actions > 9 {
        return Err(Error::InvalidInput(
            "at most 9 lattice points are available".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rejected in 0..10_000 {
        let horizon = rng.gen_range(1..=cfg.max_horizon);
        let n = rng.gen_range(1..=cfg.max_states);
        let grid: Vec<Point> = lattice_points(&mut rng, n)
            .into_iter()
            .map(|x| vec![x])
            .collect();
        let mut actions = Vec::with_capacity(horizon);
        let mut kernels = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let k = rng.gen_range(1..=cfg.max_actions);
            actions.push(ActionSpec::ConstantFinite(
                lattice_points(&mut rng, k)
                    .into_iter()
                    .map(|x| vec![x])
                    .collect(),
            ));
            let c = rng.gen_range(1..=cfg.max_candidates);
            let set = (0..c)
                .map(|_| random_tabular(&mut rng, &grid, t).map(ReferenceKernel::Tabular))
                .collect::<Result<Vec<_>>>()?;
            kernels.push(AmbiguityKernel::FiniteSet(set));
        }
        let problem = ControlProblem {
            horizon,
            space: LocalSpace::bounded(1, 1.0),
            actions,
            kernels,
            objective: random_smooth_objective(&mut rng, horizon),
            growth_p: 0.0,
            constants: None,
        };
        let tree = ScenarioTree::build(&problem, &SolverConfig::default())?;
        if enumeration_size(&tree).is_some_and(|s| s <= cfg.budget) {
            return Ok((problem, rejected));
        }
    }
    Err(Error::SizeGuard(
        "no instance within the enumeration budget".into(),
    ))
}

/// `A sin(k Σ ω_t - Σ a_t) - B Σ_t |ω_{t+1} - a_t|`, Lipschitz with
/// constant `A max(k, 1) + B` for the sum of stagewise distances.
pub fn audit_objective(amp: f64, freq: f64, tilt: f64) -> (Objective, f64) {
    let f = Objective::new(move |w, a| {
        let sw: f64 = w.iter().map(|x| x[0]).sum();
        let sa: f64 = a.iter().map(|x| x[0]).sum();
        let track: f64 = w.iter().zip(a).map(|(x, y)| (x[0] - y[0]).abs()).sum();
        amp * (freq * sw - sa).sin() - tilt * track
    });
    (f, amp * freq.max(1.0) + tilt)
}

fn audit_actions(rng: &mut ChaCha8Rng, horizon: usize) -> Vec<ActionSpec> {
    (0..horizon)
        .map(|_| {
            let k = rng.gen_range(2..=3);
            ActionSpec::ConstantFinite(
                lattice_points(rng, k)
                    .into_iter()
                    .map(|x| vec![x])
                    .collect(),
            )
        })
        .collect()
}

/// A bound audit with Wasserstein balls: translation references
/// `ω_{t+1} = ξ + γ ω_t`, a true kernel whose noise is shifted by `δ`, and a
/// radius affine in the last state that always covers the shift.
pub fn wasserstein_audit_instance(seed: u64) -> Result<(ControlProblem, BoundsSetting)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(1..=3);
    let k = rng.gen_range(2..=3);
    let atoms: Vec<Point> = (0..k).map(|_| vec![rng.gen_range(-0.5..0.5)]).collect();
    let base = DiscreteMeasure::new(atoms, random_weights(&mut rng, k))?;
    let gamma: f64 = rng.gen_range(0.0..0.5);
    let delta: f64 = rng.gen_range(-0.1..0.1);
    let q = if rng.gen_bool(0.5) { 1.0 } else { 2.0 };
    let radius = RadiusSchedule::LastStateAffine {
        base: delta.abs() + rng.gen_range(0.0..0.1),
        slope: rng.gen_range(0.0..0.2),
        cap: 1.0,
    };
    let space = LocalSpace::bounded(1, 3.0);
    let ball = AmbiguityKernel::WassersteinBall {
        reference: ReferenceKernel::Shift {
            base: base.clone(),
            gamma,
        },
        radius,
        q,
        space: space.clone(),
    };
    let truth = ReferenceKernel::Shift {
        base: base.push_forward(|x| vec![x[0] + delta]),
        gamma,
    };
    let (objective, l_psi) = audit_objective(
        rng.gen_range(0.2..1.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..0.5),
    );
    let problem = ControlProblem {
        horizon,
        space,
        actions: audit_actions(&mut rng, horizon),
        kernels: vec![ball; horizon],
        objective,
        growth_p: 0.0,
        constants: None,
    };
    let set = BoundsSetting::from_problem(
        &problem,
        TrueModel::Kernels(vec![truth; horizon]),
        1.0,
        l_psi,
    )?;
    Ok((problem, set))
}

/// A bound audit with exponential balls around the sample-mean estimator;
/// the true parameter exceeds the estimate by a fixed `δ` smaller than the
/// radius. Laws are discretised with three quantile atoms.
pub fn parametric_audit_instance(seed: u64) -> Result<(ControlProblem, BoundsSetting)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(1..=3);
    let family = ParamFamily::Exponential;
    let center = ParametricCenter {
        family,
        theta0: vec![rng.gen_range(0.2..0.6)],
    };
    let delta: f64 = rng.gen_range(0.0..0.1);
    let atoms = 3;
    let ball = AmbiguityKernel::ParametricBall {
        center: center.clone(),
        radius: RadiusSchedule::Constant(delta + rng.gen_range(0.0..0.1)),
        atoms,
    };
    let c2 = center.clone();
    let truth = TrueModel::Parametric {
        family,
        theta: ThetaFn::new(move |p| {
            let th = c2.at(p).expect("exponential estimator is total");
            vec![th[0] + delta]
        }),
        atoms,
    };
    let (objective, l_psi) = audit_objective(
        rng.gen_range(0.2..1.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..0.5),
    );
    let problem = ControlProblem {
        horizon,
        space: LocalSpace::unbounded(1),
        actions: audit_actions(&mut rng, horizon),
        kernels: vec![ball; horizon],
        objective,
        growth_p: 0.0,
        constants: None,
    };
    let set = BoundsSetting::from_problem(&problem, truth, 1.0, l_psi)?;
    Ok((problem, set))
}

fn m1(pts: &[f64], w: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(pts.iter().map(|x| vec![*x]).collect(), w.to_vec())
        .expect("fixture measures are valid")
}

/// Two-period tracking problem on `[-1, 1]`:
/// `Ψ = -(a_0 - ω_1)² - (a_1 - ω_2 - ω_1 / 2)²` with actions in `[-1, 1]`.
/// With `ball = None` the ambiguity sets are finite: two constant laws at
/// the first stage and two translation kernels at the second. With
/// `ball = Some(ε)` they are order-1 Wasserstein balls of radius `ε` around
/// the first member of each finite set.
pub fn tracking_instance(ball: Option<f64>) -> ControlProblem {
    let first = [
        ReferenceKernel::Constant(m1(&[-0.6, 0.4], &[0.5, 0.5])),
        ReferenceKernel::Constant(m1(&[-0.2, 0.8], &[0.5, 0.5])),
    ];
    let second = [
        ReferenceKernel::Shift {
            base: m1(&[-0.4, 0.4], &[0.5, 0.5]),
            gamma: 0.5,
        },
        ReferenceKernel::Shift {
            base: m1(&[-0.3, 0.1], &[0.3, 0.7]),
            gamma: -0.3,
        },
    ];
    let space = LocalSpace::bounded(1, 1.0);
    let kernels = match ball {
        None => vec![
            AmbiguityKernel::FiniteSet(first.to_vec()),
            AmbiguityKernel::FiniteSet(second.to_vec()),
        ],
        Some(eps) => [first[0].clone(), second[0].clone()]
            .into_iter()
            .map(|reference| AmbiguityKernel::WassersteinBall {
                reference,
                radius: RadiusSchedule::Constant(eps),
                q: 1.0,
                space: space.clone(),
            })
            .collect(),
    };
    let act = ActionSpec::ConstantBox {
        lo: vec![-1.0],
        hi: vec![1.0],
        resolution: vec![41],
    };
    ControlProblem {
        horizon: 2,
        space,
        actions: vec![act.clone(), act],
        kernels,
        objective: Objective::new(|w, a| {
            -(a[0][0] - w[0][0]).powi(2) - (a[1][0] - w[1][0] - 0.5 * w[0][0]).powi(2)
        })
        .with_gradient(|w, a| {
            vec![
                vec![-2.0 * (a[0][0] - w[0][0])],
                vec![-2.0 * (a[1][0] - w[1][0] - 0.5 * w[0][0])],
            ]
        }),
        growth_p: 0.0,
        constants: None,
    }
}

/// Grid of `n + 1` equally spaced points on `[-c, c]`.
pub fn uniform_grid(c: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|k| vec![-c + 2.0 * c * k as f64 / n as f64])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_are_deterministic_and_within_limits() {
        let cfg = RandomInstanceConfig::default();
        for seed in 0..10 {
            let (a, _) = random_finite_instance(seed, &cfg).unwrap();
            let (b, _) = random_finite_instance(seed, &cfg).unwrap();
            assert_eq!(a.horizon, b.horizon);
            assert!(a.horizon <= 3);
            let path: Vec<Point> = vec![vec![0.0]; a.horizon];
            let acts: Vec<Point> = vec![vec![0.5]; a.horizon];
            assert_eq!(
                a.objective.eval(&path, &acts),
                b.objective.eval(&path, &acts)
            );
            let tree = ScenarioTree::build(&a, &SolverConfig::default()).unwrap();
            for t in 0..tree.horizon() {
                for n in &tree.stages[t] {
                    assert!(n.actions.len() <= 3 && n.candidate_count() <= 3);
                    assert!(n.children.len() <= 4);
                }
            }
        }
    }

    #[test]
    fn audit_objective_constant_dominates_difference_quotients() {
        let (f, l) = audit_objective(0.7, 1.6, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut draw =
                || -> Vec<Point> { (0..2).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect() };
            let (w1, a1, w2, a2) = (draw(), draw(), draw(), draw());
            let d: f64 = w1
                .iter()
                .zip(&w2)
                .chain(a1.iter().zip(&a2))
                .map(|(x, y)| (x[0] - y[0]).abs())
                .sum();
            let df = (f.eval(&w1, &a1) - f.eval(&w2, &a2)).abs();
            assert!(df <= l * d + 1e-12);
        }
    }

    #[test]
    fn tracking_instance_gradient_matches_differences() {
        let p = tracking_instance(None);
        let w = vec![vec![0.3], vec![-0.2]];
        let a = vec![vec![0.1], vec![0.4]];
        let g = p.objective.action_gradient(&w, &a);
        let h = 1e-6;
        for s in 0..2 {
            let mut up = a.clone();
            up[s][0] += h;
            let mut dn = a.clone();
            dn[s][0] -= h;
            let fd = (p.objective.eval(&w, &up) - p.objective.eval(&w, &dn)) / (2.0 * h);
            assert!((fd - g[s][0]).abs() < 1e-8);
        }
    }
}
