//! Ambiguity sets `𝒫_t(ω^t)`: Wasserstein balls around a reference
//! kernel, balls in a parameter space, finite sets and singletons.

mod family;
mod radius;
mod reference;

pub use family::{estimate_theta, family_distance, ParamFamily};
pub use radius::{
    adaptive_radius_1d, adaptive_radius_multidim, bridge_abs_integral_samples, bridge_quantile,
    quantile, BridgeMcConfig, PathRadius, RadiusSchedule,
};
pub use reference::{nearest_index, KernelFn, ReferenceKernel, TabularKernel};

use crate::error::{Error, Result};
use crate::geometry::{dist, lerp, norm, path_dist, shrink_factor, v_lambda, Point};
use crate::measures::{optimal_coupling, w_q_discrete, DiscreteMeasure, LocalSpace};
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

/// Tolerance used by membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// A candidate law: finitely supported, or a member of a parametric family.
#[derive(Debug, Clone, PartialEq)]
pub enum Law {
    Discrete(DiscreteMeasure),
    Parametric {
        family: ParamFamily,
        theta: Vec<f64>,
    },
}

impl Law {
    /// Finitely supported version of the law; parametric laws are replaced
    /// by their quantile discretisation with `atoms` levels per coordinate.
    pub fn to_discrete(&self, atoms: usize) -> Result<DiscreteMeasure> {
        match self {
            Law::Discrete(m) => Ok(m.clone()),
            Law::Parametric { family, theta } => family.discretize(theta, atoms),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match self {
            Law::Discrete(m) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (x, w) in m.atoms() {
                    acc += w;
                    if u < acc {
                        return x.clone();
                    }
                }
                m.support()[m.len() - 1].clone()
            }
            Law::Parametric { family, theta } => family.sample(theta, rng),
        }
    }

    pub fn as_discrete(&self) -> Option<&DiscreteMeasure> {
        match self {
            Law::Discrete(m) => Some(m),
            Law::Parametric { .. } => None,
        }
    }
}

/// Centre of a parametric ball: a fixed parameter until the history is long
/// enough for the estimator.
#[derive(Debug, Clone)]
pub struct ParametricCenter {
    pub family: ParamFamily,
    pub theta0: Vec<f64>,
}

impl ParametricCenter {
    pub fn at(&self, path: &[Point]) -> Result<Vec<f64>> {
        if path.len() < self.family.min_history() {
            self.family.validate(&self.theta0)?;
            Ok(self.theta0.clone())
        } else {
            estimate_theta(&self.family, path)
        }
    }

    pub fn lipschitz(&self, t: usize) -> f64 {
        if t < self.family.min_history() {
            0.0
        } else {
            self.family.estimator_lipschitz(t)
        }
    }
}

#[derive(Debug, Clone)]
pub enum AmbiguityKernel {
    Singleton(ReferenceKernel),
    FiniteSet(Vec<ReferenceKernel>),
    WassersteinBall {
        reference: ReferenceKernel,
        radius: RadiusSchedule,
        q: f64,
        space: LocalSpace,
    },
    ParametricBall {
        center: ParametricCenter,
        radius: RadiusSchedule,
        /// Atoms per coordinate when a member is discretised.
        atoms: usize,
    },
}

/// Outcome of a membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    /// `ε - distance`; negative outside the set.
    pub slack: f64,
}

/// The reference measure (or reference parameter law) at a path.
pub fn evaluate_reference(kernel: &AmbiguityKernel, path: &[Point]) -> Result<Law> {
    match kernel {
        AmbiguityKernel::Singleton(r) | AmbiguityKernel::WassersteinBall { reference: r, .. } => {
            Ok(Law::Discrete(r.evaluate(path)?))
        }
        AmbiguityKernel::FiniteSet(list) => list
            .first()
            .ok_or_else(|| Error::InvalidInput("empty finite ambiguity set".into()))?
            .evaluate(path)
            .map(Law::Discrete),
        AmbiguityKernel::ParametricBall { center, .. } => Ok(Law::Parametric {
            family: center.family,
            theta: center.at(path)?,
        }),
    }
}

impl AmbiguityKernel {
    /// The singleton set holding the reference law of this kernel: the
    /// center of a ball, or the first member of a finite set. Parametric
    /// centers are discretised with the ball's own atom count.
    pub fn reference_singleton(&self) -> Result<AmbiguityKernel> {
        Ok(match self {
            AmbiguityKernel::Singleton(_) => self.clone(),
            AmbiguityKernel::WassersteinBall { reference, .. } => AmbiguityKernel::Singleton(reference.clone()),
            AmbiguityKernel::FiniteSet(list) => AmbiguityKernel::Singleton(
                list.first()
                    .ok_or_else(|| Error::InvalidInput("empty finite ambiguity set".into()))?
                    .clone(),
            ),
            AmbiguityKernel::ParametricBall { center, atoms, .. } => {
                let (center, atoms) = (center.clone(), *atoms);
                AmbiguityKernel::Singleton(ReferenceKernel::Custom {
                    f: KernelFn::new(move |p| center.family.discretize(&center.at(p)?, atoms)),
                    lipschitz: None,
                })
            }
        })
    }

    /// Radius at a path (zero for singletons and finite sets).
    pub fn radius(&self, path: &[Point]) -> Result<f64> {
        match self {
            AmbiguityKernel::WassersteinBall { radius, .. }
            | AmbiguityKernel::ParametricBall { radius, .. } => radius.radius(path),
            _ => Ok(0.0),
        }
    }

    /// Declared `L_{𝒫,t}` in the Hausdorff–Wasserstein sense, when known.
    /// `p` is the growth exponent of the objective.
    pub fn lipschitz(&self, t: usize, p: f64) -> Option<f64> {
        match self {
            AmbiguityKernel::Singleton(r) => r.lipschitz(t),
            AmbiguityKernel::FiniteSet(_) => None,
            AmbiguityKernel::WassersteinBall {
                reference, radius, ..
            } => reference.lipschitz(t).map(|l| l + radius.lipschitz()),
            AmbiguityKernel::ParametricBall { center, radius, .. } => {
                Some(center.family.lipschitz(p) * (center.lipschitz(t) + radius.lipschitz()))
            }
        }
    }
}

/// Draws `count` members of `𝒫_t(ω^t)`; the first is always the reference.
///
/// Wasserstein balls: atoms of the reference are moved and reweighted at
/// random; a proposal outside the ball is pulled back along the
/// displacement interpolation from the reference so that it lands on the
/// boundary. References with many atoms only have their atoms moved.
/// Parametric balls: parameters uniform in the ball, projected
/// onto the parameter set. Finite sets are cycled through.
pub fn sample_measures<R: Rng + ?Sized>(
    kernel: &AmbiguityKernel,
    path: &[Point],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Law>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    match kernel {
        AmbiguityKernel::Singleton(r) => {
            let m = r.evaluate(path)?;
            Ok(vec![Law::Discrete(m); count])
        }
        AmbiguityKernel::FiniteSet(list) => {
            if list.is_empty() {
                return Err(Error::InvalidInput("empty finite ambiguity set".into()));
            }
            (0..count)
                .map(|k| list[k % list.len()].evaluate(path).map(Law::Discrete))
                .collect()
        }
        AmbiguityKernel::WassersteinBall {
            reference,
            radius,
            q,
            space,
        } => {
            let center = reference.evaluate(path)?;
            let eps = radius.radius(path)?;
            let mut out = vec![Law::Discrete(center.clone())];
            while out.len() < count {
                let m = sample_in_ball(&center, eps, *q, space, rng)?;
                out.push(Law::Discrete(m));
            }
            Ok(out)
        }
        AmbiguityKernel::ParametricBall { center, radius, .. } => {
            let th = center.at(path)?;
            let eps = radius.radius(path)?;
            let fam = center.family;
            let mut out = vec![Law::Parametric {
                family: fam,
                theta: th.clone(),
            }];
            let k = th.len();
            while out.len() < count {
                let dir: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                let n = norm(&dir).max(1e-300);
                let u: f64 = rng.gen();
                let r = eps * u.powf(1.0 / k as f64);
                let cand: Vec<f64> = th.iter().zip(&dir).map(|(a, b)| a + r * b / n).collect();
                out.push(Law::Parametric {
                    family: fam,
                    theta: fam.project(&cand),
                });
            }
            Ok(out)
        }
    }
}

/// All candidates used by exact solvers: every element of a finite set, or
/// `count` samples otherwise.
pub fn candidate_laws<R: Rng + ?Sized>(
    kernel: &AmbiguityKernel,
    path: &[Point],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Law>> {
    match kernel {
        AmbiguityKernel::FiniteSet(list) => sample_measures(kernel, path, list.len(), rng),
        AmbiguityKernel::Singleton(_) => sample_measures(kernel, path, 1, rng),
        _ => sample_measures(kernel, path, count.max(1), rng),
    }
}

fn sample_in_ball<R: Rng + ?Sized>(
    center: &DiscreteMeasure,
    eps: f64,
    q: f64,
    space: &LocalSpace,
    rng: &mut R,
) -> Result<DiscreteMeasure> {
    if eps <= 0.0 {
        return Ok(center.clone());
    }
    let n = center.len();
    let d = center.dim();
    if n > LARGE_SUPPORT {
        return shift_in_ball(center, eps, q, space, rng);
    }
    // Weight perturbation: mix with a flat Dirichlet draw.
    let eta: f64 = rng.gen::<f64>() * 0.5;
    let weights: Vec<f64> = if n > 1 {
        let dir = Dirichlet::new_with_size(1.0, n).map_err(|e| Error::Numerical(e.to_string()))?;
        let z = dir.sample(rng);
        center
            .weights()
            .iter()
            .zip(z)
            .map(|(w, z)| (1.0 - eta) * w + eta * z)
            .collect()
    } else {
        vec![1.0]
    };
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // Location perturbation on a random subset of atoms.
    let support: Vec<Point> = center
        .support()
        .iter()
        .zip(&weights)
        .map(|(x, w)| {
            if rng.gen_bool(0.5) {
                return x.clone();
            }
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let nd = norm(&dir).max(1e-300);
            let step = eps * 3.0 * rng.gen::<f64>() / w.max(1e-3).powf(1.0 / q);
            let moved: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b / nd).collect();
            space.project(&moved)
        })
        .collect();
    let proposal = DiscreteMeasure::new(support, weights)?;
    let coupling = optimal_coupling(center, &proposal, q)?;
    let delta = coupling.cost.max(0.0).powf(1.0 / q);
    if delta <= eps {
        return Ok(proposal.canonical());
    }
    // Displacement interpolation at fraction s has transport cost at most
    // s * delta from the centre; stay a hair inside.
    let s = eps / delta * (1.0 - 1e-12);
    let mut pts = Vec::with_capacity(coupling.plan.len());
    let mut ws = Vec::with_capacity(coupling.plan.len());
    for &(i, j, m) in &coupling.plan {
        pts.push(lerp(&center.support()[i], &proposal.support()[j], s));
        ws.push(m);
    }
    let tot: f64 = ws.iter().sum();
    ws.iter_mut().for_each(|w| *w /= tot);
    Ok(DiscreteMeasure::new(pts, ws)?.canonical())
}

/// Above this many atoms the in-ball sampler only moves atoms, which keeps
/// the identity coupling as a membership certificate and avoids solving a
/// transport problem per draw.
const LARGE_SUPPORT: usize = 64;

fn shift_in_ball<R: Rng + ?Sized>(
    center: &DiscreteMeasure,
    eps: f64,
    q: f64,
    space: &LocalSpace,
    rng: &mut R,
) -> Result<DiscreteMeasure> {
    let d = center.dim();
    let moved: Vec<Point> = center
        .support()
        .iter()
        .map(|x| {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let step = eps * 2.0 * rng.gen::<f64>();
            space.project(
                &x.iter()
                    .zip(&dir)
                    .map(|(a, b)| a + step * b)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let cost: f64 = center
        .atoms()
        .zip(&moved)
        .map(|((x, w), y)| w * dist(x, y).powf(q))
        .sum();
    let delta = cost.powf(1.0 / q);
    let s = if delta > eps {
        eps / delta * (1.0 - 1e-12)
    } else {
        1.0
    };
    let pts = center
        .support()
        .iter()
        .zip(&moved)
        .map(|(x, y)| lerp(x, y, s))
        .collect();
    Ok(DiscreteMeasure::new(pts, center.weights().to_vec())?.canonical())
}

/// Membership of a candidate in `𝒫_t(ω^t)`.
pub fn membership(kernel: &AmbiguityKernel, path: &[Point], candidate: &Law) -> Result<Membership> {
    match kernel {
        AmbiguityKernel::WassersteinBall {
            reference,
            radius,
            q,
            ..
        } => {
            let Law::Discrete(m) = candidate else {
                return Err(Error::Unsupported(
                    "parametric candidate against a discrete-centred ball".into(),
                ));
            };
            let center = reference.evaluate(path)?;
            let eps = radius.radius(path)?;
            let d = w_q_discrete(&center, m, *q)?;
            Ok(Membership {
                inside: d <= eps + MEMBERSHIP_TOL,
                slack: eps - d,
            })
        }
        AmbiguityKernel::ParametricBall { center, radius, .. } => {
            let Law::Parametric { family, theta } = candidate else {
                return Err(Error::Unsupported(
                    "discrete candidate against a parametric-centred ball".into(),
                ));
            };
            if *family != center.family {
                return Err(Error::Unsupported("candidate from another family".into()));
            }
            let th = center.at(path)?;
            let eps = radius.radius(path)?;
            let d = dist(&th, theta);
            let admissible = family.validate(theta).is_ok();
            Ok(Membership {
                inside: admissible && d <= eps + MEMBERSHIP_TOL,
                slack: eps - d,
            })
        }
        AmbiguityKernel::Singleton(r) => {
            let m = candidate
                .as_discrete()
                .ok_or_else(|| Error::Unsupported("parametric candidate for a singleton".into()))?;
            let d = w_q_discrete(&r.evaluate(path)?, m, 1.0)?;
            Ok(Membership {
                inside: d <= MEMBERSHIP_TOL,
                slack: -d,
            })
        }
        AmbiguityKernel::FiniteSet(list) => {
            let m = candidate.as_discrete().ok_or_else(|| {
                Error::Unsupported("parametric candidate for a finite set".into())
            })?;
            let mut best = f64::INFINITY;
            for r in list {
                best = best.min(w_q_discrete(&r.evaluate(path)?, m, 1.0)?);
            }
            Ok(Membership {
                inside: best <= MEMBERSHIP_TOL,
                slack: -best,
            })
        }
    }
}

/// Moves `mu1 ∈ B_q(ref1, eps1)` to a measure `mu2 ∈ B_q(ref2, eps2)` with
/// `W_q(mu1, mu2) <= W_q(ref1, ref2) + λ W_q(ref1, mu1)`,
/// `λ = max(eps1 - eps2, 0) / eps1`.
///
/// The optimal couplings `(ref1, ref2)` and `(ref1, mu1)` are glued
/// conditionally on the atoms of `ref1`, and every triple `(a, b, c)` is
/// mapped to `v_λ(a, b, c)`.
pub fn transport_between_balls(
    mu1: &DiscreteMeasure,
    ref1: &DiscreteMeasure,
    eps1: f64,
    ref2: &DiscreteMeasure,
    eps2: f64,
    q: f64,
) -> Result<DiscreteMeasure> {
    if eps1 < 0.0 || eps2 < 0.0 {
        return Err(Error::InvalidInput("negative radius".into()));
    }
    let c12 = optimal_coupling(ref1, ref2, q)?;
    let c1m = optimal_coupling(ref1, mu1, q)?;
    let d1 = c1m.cost.max(0.0).powf(1.0 / q);
    if d1 > eps1 + MEMBERSHIP_TOL {
        return Err(Error::NotInBall {
            node: "source".into(),
            distance: d1,
            radius: eps1,
        });
    }
    let lambda = shrink_factor(eps1, eps2);
    let w = ref1.weights();
    let mut by_a_b: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ref1.len()];
    for &(i, j, m) in &c12.plan {
        by_a_b[i].push((j, m));
    }
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    for &(i, k, mk) in &c1m.plan {
        if w[i] <= 0.0 {
            continue;
        }
        let a = &ref1.support()[i];
        let c = &mu1.support()[k];
        for &(j, mj) in &by_a_b[i] {
            let b = &ref2.support()[j];
            pts.push(v_lambda(a, b, c, lambda));
            ws.push(mj * mk / w[i]);
        }
    }
    let tot: f64 = ws.iter().sum();
    ws.iter_mut().for_each(|x| *x /= tot);
    Ok(DiscreteMeasure::new(pts, ws)?.canonical())
}

/// Parameter-space analogue of [`transport_between_balls`]: maps `theta` in
/// the ball around `center1` into the ball around `center2`.
pub fn parametric_clamp(
    theta: &[f64],
    center1: &[f64],
    eps1: f64,
    center2: &[f64],
    eps2: f64,
) -> Vec<f64> {
    v_lambda(center1, center2, theta, shrink_factor(eps1, eps2))
}

/// Result of an empirical Lipschitz audit of a kernel between two paths.
#[derive(Debug, Clone)]
pub struct LipschitzAudit {
    /// Largest `W(P, P̃) / d(ω, ω̃)` over the probes, each `P̃` being the
    /// witness built by gluing.
    pub max_ratio: f64,
    pub declared: Option<f64>,
    pub path_distance: f64,
    /// Every witness was verified to be a member at the second path.
    pub witnesses_inside: bool,
}

/// For probes `P ∈ 𝒫_t(path1)` constructs witnesses `P̃ ∈ 𝒫_t(path2)` and
/// reports the worst distance ratio. Ratios use `W_q` for Wasserstein balls
/// and the parameter distance (times the family constant) for parametric
/// balls.
pub fn lipschitz_audit<R: Rng + ?Sized>(
    kernel: &AmbiguityKernel,
    path1: &[Point],
    path2: &[Point],
    probes: usize,
    p: f64,
    rng: &mut R,
) -> Result<LipschitzAudit> {
    let t = path1.len();
    if path2.len() != t {
        return Err(Error::InvalidInput("paths of different lengths".into()));
    }
    let pd = path_dist(path1, path2);
    let declared = kernel.lipschitz(t, p);
    let mut max_ratio: f64 = 0.0;
    let mut inside = true;
    match kernel {
        AmbiguityKernel::WassersteinBall {
            reference,
            radius,
            q,
            ..
        } => {
            let r1 = reference.evaluate(path1)?;
            let r2 = reference.evaluate(path2)?;
            let e1 = radius.radius(path1)?;
            let e2 = radius.radius(path2)?;
            for law in sample_measures(kernel, path1, probes.max(1), rng)? {
                let Law::Discrete(mu) = law else {
                    unreachable!()
                };
                let wit = transport_between_balls(&mu, &r1, e1, &r2, e2, *q)?;
                inside &= membership(kernel, path2, &Law::Discrete(wit.clone()))?.inside;
                let d = w_q_discrete(&mu, &wit, *q)?;
                if pd > 0.0 {
                    max_ratio = max_ratio.max(d / pd);
                }
            }
        }
        AmbiguityKernel::ParametricBall { center, radius, .. } => {
            let c1 = center.at(path1)?;
            let c2 = center.at(path2)?;
            let e1 = radius.radius(path1)?;
            let e2 = radius.radius(path2)?;
            let lfam = center.family.lipschitz(p);
            for law in sample_measures(kernel, path1, probes.max(1), rng)? {
                let Law::Parametric { theta, family } = law else {
                    unreachable!()
                };
                let wit = parametric_clamp(&theta, &c1, e1, &c2, e2);
                inside &= membership(
                    kernel,
                    path2,
                    &Law::Parametric {
                        family,
                        theta: wit.clone(),
                    },
                )?
                .inside;
                if pd > 0.0 {
                    max_ratio = max_ratio.max(lfam * dist(&theta, &wit) / pd);
                }
            }
        }
        AmbiguityKernel::Singleton(r) => {
            let d = crate::measures::w_q_discrete(&r.evaluate(path1)?, &r.evaluate(path2)?, 1.0)?;
            if pd > 0.0 {
                max_ratio = d / pd;
            }
        }
        AmbiguityKernel::FiniteSet(_) => {
            return Err(Error::Unsupported("Lipschitz audit of a finite set".into()));
        }
    }
    Ok(LipschitzAudit {
        max_ratio,
        declared,
        path_distance: pd,
        witnesses_inside: inside,
    })
}

/// `inf { E_P[f] : P ∈ B_q(reference, eps), supp P ⊂ grid }` as a linear
/// program over couplings between the reference and the grid. Returns the
/// value and a minimising measure.
pub fn ball_inf_on_grid(
    reference: &DiscreteMeasure,
    eps: f64,
    q: f64,
    grid: &[Point],
    values: &[f64],
) -> Result<(f64, DiscreteMeasure)> {
    use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
    if grid.len() != values.len() || grid.is_empty() {
        return Err(Error::InvalidInput(
            "grid and values differ in length".into(),
        ));
    }
    let n = reference.len();
    let g = grid.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(n * g);
    for _ in 0..n {
        for v in values {
            vars.push(lp.add_var(*v, (0.0, f64::INFINITY)));
        }
    }
    for (i, w) in reference.weights().iter().enumerate() {
        let mut e = LinearExpr::empty();
        for j in 0..g {
            e.add(vars[i * g + j], 1.0);
        }
        lp.add_constraint(e, ComparisonOp::Eq, *w);
    }
    let mut budget = LinearExpr::empty();
    for (i, x) in reference.support().iter().enumerate() {
        for (j, z) in grid.iter().enumerate() {
            budget.add(vars[i * g + j], dist(x, z).powf(q));
        }
    }
    lp.add_constraint(budget, ComparisonOp::Le, eps.max(0.0).powf(q));
    let sol = lp
        .solve()
        .map_err(|e| Error::Solver(format!("{e:?}")))?
        .into_solution()
        .map_err(|_| Error::Solver("interrupted".into()))?;
    let mut mass = vec![0.0; g];
    for i in 0..n {
        for (j, m) in mass.iter_mut().enumerate() {
            *m += sol.var_value(vars[i * g + j]).max(0.0);
        }
    }
    let tot: f64 = mass.iter().sum();
    let (pts, ws): (Vec<Point>, Vec<f64>) = grid
        .iter()
        .zip(&mass)
        .filter(|(_, m)| **m > 0.0)
        .map(|(z, m)| (z.clone(), m / tot))
        .unzip();
    Ok((sol.objective(), DiscreteMeasure::new(pts, ws)?))
}
