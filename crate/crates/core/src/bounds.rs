//! Error bounds relating the value under the true kernel `P^TR`, the value
//! under the reference kernel `P̂` and the robust value.
//!
//! The bounds are driven by the error functionals `μ_{s,t}`: a stagewise
//! discrepancy at time `s`, raised to the power `α`, and averaged back to
//! time `t` along the true kernel.

use crate::ambiguity::{
    AmbiguityKernel, KernelFn, ParamFamily, RadiusSchedule, ReferenceKernel, MEMBERSHIP_TOL,
};
use crate::dp::{backward_induction_exact, ControlProblem, ExtraKernel, PathGrid, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::measures::{w_q_discrete, DiscreteMeasure};
use serde::Serialize;
use std::sync::Arc;

pub const BOUNDS_SCHEMA_VERSION: u32 = 1;

/// Guard on the number of nodes visited along the true kernel.
pub const MAX_TRUTH_NODES: usize = 1_000_000;

/// A parameter-valued function of the path.
#[derive(Clone)]
pub struct ThetaFn(pub Arc<dyn Fn(&[Point]) -> Vec<f64> + Send + Sync>);

impl ThetaFn {
    pub fn new<F: Fn(&[Point]) -> Vec<f64> + Send + Sync + 'static>(f: F) -> Self {
        ThetaFn(Arc::new(f))
    }
}

impl std::fmt::Debug for ThetaFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ThetaFn(..)")
    }
}

/// The data-generating kernel.
#[derive(Debug, Clone)]
pub enum TrueModel {
    /// One kernel per stage.
    Kernels(Vec<ReferenceKernel>),
    /// `P_{θ^TR_t(ω^t)}` in a parametric family, discretised with `atoms`
    /// quantile levels per coordinate.
    Parametric {
        family: ParamFamily,
        theta: ThetaFn,
        atoms: usize,
    },
}

impl TrueModel {
    pub fn measure(&self, path: &[Point]) -> Result<DiscreteMeasure> {
        match self {
            TrueModel::Kernels(ks) => ks
                .get(path.len())
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no true kernel at stage {}", path.len()))
                })?
                .evaluate(path),
            TrueModel::Parametric {
                family,
                theta,
                atoms,
            } => family.discretize(&(theta.0)(path), *atoms),
        }
    }

    /// The stage kernels as reference kernels, for solvers that take them.
    pub fn as_reference(&self, horizon: usize) -> Vec<ReferenceKernel> {
        match self {
            TrueModel::Kernels(ks) => ks.clone(),
            TrueModel::Parametric { .. } => {
                let me = self.clone();
                let k = ReferenceKernel::Custom {
                    f: KernelFn::new(move |p| me.measure(p)),
                    lipschitz: None,
                };
                vec![k; horizon]
            }
        }
    }
}

/// Constants specific to parametric balls.
#[derive(Debug, Clone, Serialize)]
pub struct ParametricConstants {
    /// `L_{P_θ,t}`: Lipschitz constant of `θ -> P_θ` in `W_1`.
    pub l_family: Vec<f64>,
    /// `L_{θ̂,t}`: Lipschitz constant of the estimator.
    pub l_estimator: Vec<f64>,
}

/// Everything the bounds need.
#[derive(Debug, Clone)]
pub struct BoundsSetting {
    pub horizon: usize,
    pub truth: TrueModel,
    /// `WassersteinBall` at every stage, or `ParametricBall` at every stage.
    pub kernels: Vec<AmbiguityKernel>,
    pub alpha: f64,
    pub l_psi: f64,
    pub l_a: Vec<f64>,
    /// `L_{P̂,t}`; unused for parametric balls.
    pub l_ref: Vec<f64>,
    pub l_eps: Vec<f64>,
    pub parametric: Option<ParametricConstants>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BallKind {
    Wasserstein,
    Parametric,
}

fn radius_of(k: &AmbiguityKernel) -> &RadiusSchedule {
    match k {
        AmbiguityKernel::WassersteinBall { radius, .. }
        | AmbiguityKernel::ParametricBall { radius, .. } => radius,
        _ => unreachable!("kernel kinds are checked by BoundsSetting::validate"),
    }
}

impl BoundsSetting {
    /// Reads the stagewise constants off the problem. Action constants come
    /// from the action specs, reference and radius constants from the
    /// kernels. Fails when a reference kernel declares no constant.
    pub fn from_problem(
        problem: &ControlProblem,
        truth: TrueModel,
        alpha: f64,
        l_psi: f64,
    ) -> Result<Self> {
        let t_max = problem.horizon;
        let l_a = problem.actions.iter().map(|a| a.lipschitz()).collect();
        let mut l_ref = Vec::with_capacity(t_max);
        let mut l_eps = Vec::with_capacity(t_max);
        let mut l_family = Vec::with_capacity(t_max);
        let mut l_estimator = Vec::with_capacity(t_max);
        let mut parametric = false;
        for (t, k) in problem.kernels.iter().enumerate() {
            match k {
                AmbiguityKernel::WassersteinBall {
                    reference, radius, ..
                } => {
                    l_ref.push(reference.lipschitz(t).ok_or_else(|| {
                        Error::Unsupported(format!(
                            "reference kernel at stage {t} declares no Lipschitz constant"
                        ))
                    })?);
                    l_eps.push(radius.lipschitz());
                }
                AmbiguityKernel::ParametricBall { center, radius, .. } => {
                    parametric = true;
                    l_ref.push(0.0);
                    l_eps.push(radius.lipschitz());
                    l_family.push(center.family.lipschitz(1.0));
                    l_estimator.push(center.lipschitz(t));
                }
                _ => {
                    return Err(Error::Unsupported(format!(
                        "bounds need ball ambiguity sets, stage {t} has another kind"
                    )))
                }
            }
        }
        let s = BoundsSetting {
            horizon: t_max,
            truth,
            kernels: problem.kernels.clone(),
            alpha,
            l_psi,
            l_a,
            l_ref,
            l_eps,
            parametric: parametric.then_some(ParametricConstants {
                l_family,
                l_estimator,
            }),
        };
        s.validate()?;
        Ok(s)
    }

    fn kind(&self) -> Result<BallKind> {
        let w = self
            .kernels
            .iter()
            .all(|k| matches!(k, AmbiguityKernel::WassersteinBall { .. }));
        let p = self
            .kernels
            .iter()
            .all(|k| matches!(k, AmbiguityKernel::ParametricBall { .. }));
        match (w, p) {
            (true, false) => Ok(BallKind::Wasserstein),
            (false, true) => Ok(BallKind::Parametric),
            _ => Err(Error::Unsupported(
                "bounds need Wasserstein balls at every stage or parametric balls at every stage"
                    .into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon;
        if t == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "Hölder exponent {} not in (0,1]",
                self.alpha
            )));
        }
        if !(self.l_psi >= 0.0 && self.l_psi.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid L_Ψ {}", self.l_psi)));
        }
        for (name, v) in [
            ("kernels", self.kernels.len()),
            ("l_a", self.l_a.len()),
            ("l_ref", self.l_ref.len()),
            ("l_eps", self.l_eps.len()),
        ] {
            if v != t {
                return Err(Error::InvalidInput(format!(
                    "{name} has length {v}, expected {t}"
                )));
            }
        }
        let all = self.l_a.iter().chain(&self.l_ref).chain(&self.l_eps);
        if all.clone().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidInput(
                "stage constants must be finite and non-negative".into(),
            ));
        }
        if self.kind()? == BallKind::Parametric {
            let pc = self.parametric.as_ref().ok_or_else(|| {
                Error::InvalidInput("parametric balls need parametric constants".into())
            })?;
            if pc.l_family.len() != t || pc.l_estimator.len() != t {
                return Err(Error::InvalidInput(
                    "parametric constants must have length T".into(),
                ));
            }
        }
        if let TrueModel::Kernels(ks) = &self.truth {
            if ks.len() != t {
                return Err(Error::InvalidInput(format!(
                    "{} true kernels for horizon {t}",
                    ks.len()
                )));
            }
        }
        Ok(())
    }

    /// Reference law at a path, discretised for parametric balls.
    fn reference_at(&self, path: &[Point]) -> Result<DiscreteMeasure> {
        match &self.kernels[path.len()] {
            AmbiguityKernel::WassersteinBall { reference, .. } => reference.evaluate(path),
            AmbiguityKernel::ParametricBall { center, atoms, .. } => {
                center.family.discretize(&center.at(path)?, *atoms)
            }
            _ => unreachable!("kernel kinds are checked by BoundsSetting::validate"),
        }
    }
}

/// `μ_{s,t}(ω^t)` for `s >= t` at one node of the true scenario tree.
#[derive(Debug, Clone, Serialize)]
pub struct NodeMu {
    pub path: Vec<Point>,
    /// `err[s - t]` is `μ^{err,α}_{s,t}(ω^t)`.
    pub err: Vec<f64>,
    /// `eps[s - t]` is `μ^{ε,α}_{s,t}(ω^t)`.
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MuTables {
    /// `μ^{err,α}_{s,0}` for `s = 0..T`.
    pub err: Vec<f64>,
    /// `μ^{ε,α}_{s,0}` for `s = 0..T`.
    pub eps: Vec<f64>,
    /// Every node reached by the true kernel.
    pub nodes: Vec<NodeMu>,
    /// Smallest `ε - distance` between truth and reference over the nodes;
    /// negative when the truth leaves the ball somewhere.
    pub min_slack: f64,
    /// Node attaining `min_slack`, with the distance and radius there.
    pub worst_node: Vec<Point>,
    pub worst_distance: f64,
    pub worst_radius: f64,
}

struct Walker<'a> {
    set: &'a BoundsSetting,
    kind: BallKind,
    nodes: Vec<NodeMu>,
    min_slack: f64,
    worst: (Vec<Point>, f64, f64),
}

impl Walker<'_> {
    fn visit(&mut self, path: &mut Vec<Point>) -> Result<(Vec<f64>, Vec<f64>)> {
        let set = self.set;
        let t = path.len();
        if self.nodes.len() >= MAX_TRUTH_NODES {
            return Err(Error::SizeGuard(format!(
                "more than {MAX_TRUTH_NODES} nodes under the true kernel"
            )));
        }
        let truth = set.truth.measure(path)?;
        let reference = set.reference_at(path)?;
        let kernel = &set.kernels[t];
        let eps = radius_of(kernel).radius(path)?;
        let d1 = w_q_discrete(&truth, &reference, 1.0)?;
        let membership_dist = match (self.kind, kernel) {
            (BallKind::Wasserstein, AmbiguityKernel::WassersteinBall { q, .. }) => {
                w_q_discrete(&truth, &reference, *q)?
            }
            (BallKind::Parametric, AmbiguityKernel::ParametricBall { center, .. }) => {
                let theta = match &set.truth {
                    TrueModel::Parametric { family, theta, .. } if *family == center.family => {
                        (theta.0)(path)
                    }
                    _ => {
                        return Err(Error::InvalidInput(
                            "parametric balls need a true model in the same family".into(),
                        ))
                    }
                };
                let c = center.at(path)?;
                theta
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }
            _ => unreachable!(),
        };
        let slack = eps - membership_dist;
        if slack < self.min_slack {
            self.min_slack = slack;
            self.worst = (path.clone(), membership_dist, eps);
        }
        let width = set.horizon - t;
        let mut err = vec![0.0; width];
        let mut eps_mu = vec![0.0; width];
        err[0] = d1.powf(set.alpha);
        eps_mu[0] = eps.powf(set.alpha);
        if t + 1 < set.horizon {
            for (x, w) in truth.atoms() {
                path.push(x.clone());
                let (ce, cp) = self.visit(path)?;
                path.pop();
                for k in 1..width {
                    err[k] += w * ce[k - 1];
                    eps_mu[k] += w * cp[k - 1];
                }
            }
        }
        self.nodes.push(NodeMu {
            path: path.clone(),
            err: err.clone(),
            eps: eps_mu.clone(),
        });
        Ok((err, eps_mu))
    }
}

/// Computes both error functionals by recursion along the true kernel.
pub fn mu_recursion(set: &BoundsSetting) -> Result<MuTables> {
    set.validate()?;
    let mut w = Walker {
        set,
        kind: set.kind()?,
        nodes: Vec::new(),
        min_slack: f64::INFINITY,
        worst: (Vec::new(), 0.0, 0.0),
    };
    let (err, eps) = w.visit(&mut Vec::new())?;
    w.nodes.reverse();
    Ok(MuTables {
        err,
        eps,
        nodes: w.nodes,
        min_slack: w.min_slack,
        worst_node: w.worst.0,
        worst_distance: w.worst.1,
        worst_radius: w.worst.2,
    })
}

fn weighted_sum(
    set: &BoundsSetting,
    mu: &[f64],
    stage_l: impl Fn(usize) -> f64,
    lead: impl Fn(usize) -> f64,
) -> f64 {
    let t_max = set.horizon;
    let a = set.alpha;
    (0..t_max)
        .map(|s| {
            let prod: f64 = (s + 1..t_max)
                .map(|u| (set.l_a[u].powf(a) + stage_l(u).powf(a)).max(1.0))
                .product();
            2f64.powi((t_max - s - 1) as i32) * prod * lead(s) * mu[s]
        })
        .sum()
}

/// Bound on `|V^TR - V̂|` from the estimation errors of the reference.
pub fn stability_bound(set: &BoundsSetting, mu: &MuTables) -> f64 {
    set.l_psi * weighted_sum(set, &mu.err, |u| set.l_ref[u], |_| 1.0)
}

fn check_membership(mu: &MuTables) -> Result<()> {
    if mu.min_slack < -MEMBERSHIP_TOL {
        return Err(Error::NotInBall {
            node: format!("path {:?}", mu.worst_node),
            distance: mu.worst_distance,
            radius: mu.worst_radius,
        });
    }
    Ok(())
}

/// Bound on `V^TR - V` for Wasserstein balls. Fails when the true kernel
/// leaves a ball at some node it reaches.
pub fn wasserstein_gap_bound(set: &BoundsSetting, mu: &MuTables) -> Result<f64> {
    if set.kind()? != BallKind::Wasserstein {
        return Err(Error::Unsupported(
            "Wasserstein bound on parametric balls".into(),
        ));
    }
    check_membership(mu)?;
    let a = set.alpha;
    Ok(2f64.powf(a)
        * set.l_psi
        * weighted_sum(set, &mu.eps, |u| set.l_ref[u] + set.l_eps[u], |_| 1.0))
}

/// Bound on `V^TR - V` for parametric balls.
pub fn parametric_gap_bound(set: &BoundsSetting, mu: &MuTables) -> Result<f64> {
    let pc = match (set.kind()?, &set.parametric) {
        (BallKind::Parametric, Some(pc)) => pc,
        _ => {
            return Err(Error::Unsupported(
                "parametric bound needs parametric balls".into(),
            ))
        }
    };
    check_membership(mu)?;
    let a = set.alpha;
    Ok(2f64.powf(a)
        * set.l_psi
        * weighted_sum(
            set,
            &mu.eps,
            |u| pc.l_family[u] * (pc.l_estimator[u] + set.l_eps[u]),
            |s| pc.l_family[s].powf(a),
        ))
}

/// Optimal values under the three models, from the exact solver.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeasuredValues {
    pub v_true: f64,
    pub v_reference: f64,
    pub v_robust: f64,
}

/// Solves the problem three times: with the true kernel, with the reference
/// kernel and with the ambiguity sets. The true kernel is added to the
/// candidate measures of the robust solve. Only exact path trees are
/// accepted, so no discretisation allowance enters the comparison.
pub fn measure_values(
    problem: &ControlProblem,
    set: &BoundsSetting,
    cfg: &SolverConfig,
) -> Result<MeasuredValues> {
    if cfg.grid != PathGrid::Exact {
        return Err(Error::Unsupported(
            "measured gaps need the exact path tree".into(),
        ));
    }
    set.validate()?;
    let truth = set.truth.as_reference(set.horizon);
    let mut p_true = problem.clone();
    p_true.kernels = truth.into_iter().map(AmbiguityKernel::Singleton).collect();
    let mut p_ref = problem.clone();
    p_ref.kernels = (0..set.horizon)
        .map(|t| {
            let s = set.clone();
            AmbiguityKernel::Singleton(ReferenceKernel::Custom {
                f: KernelFn::new(move |p| {
                    debug_assert_eq!(p.len(), t);
                    s.reference_at(p)
                }),
                lipschitz: None,
            })
        })
        .collect();
    let v_true = backward_induction_exact(&p_true, cfg)?.value;
    let v_reference = backward_induction_exact(&p_ref, cfg)?.value;
    let mut rcfg = cfg.clone();
    let model = set.truth.clone();
    rcfg.extra
        .push(ExtraKernel(Arc::new(move |_, p| model.measure(p))));
    let v_robust = backward_induction_exact(problem, &rcfg)?.value;
    Ok(MeasuredValues {
        v_true,
        v_reference,
        v_robust,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub schema_version: u32,
    pub horizon: usize,
    pub alpha: f64,
    pub l_psi: f64,
    pub mu_err: Vec<f64>,
    pub mu_eps: Vec<f64>,
    pub min_membership_slack: f64,
    pub stability_bound: f64,
    /// `"wasserstein"` or `"parametric"`.
    pub ball: &'static str,
    pub robust_gap_bound: f64,
    pub measured: Option<MeasuredValues>,
    /// `|V^TR - V̂| <= stability bound` and `0 <= V^TR - V <= gap bound`,
    /// with slack `tol`; absent without measured values.
    pub stability_holds: Option<bool>,
    pub robust_gap_holds: Option<bool>,
}

impl BoundsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates every bound and, when given, checks them against measured
/// values with absolute slack `tol`.
pub fn bounds_report(
    set: &BoundsSetting,
    measured: Option<MeasuredValues>,
    tol: f64,
) -> Result<BoundsReport> {
    let mu = mu_recursion(set)?;
    let stability = stability_bound(set, &mu);
    let (ball, gap) = match set.kind()? {
        BallKind::Wasserstein => ("wasserstein", wasserstein_gap_bound(set, &mu)?),
        BallKind::Parametric => ("parametric", parametric_gap_bound(set, &mu)?),
    };
    let stability_holds = measured.map(|m| (m.v_true - m.v_reference).abs() <= stability + tol);
    let robust_gap_holds = measured.map(|m| {
        let g = m.v_true - m.v_robust;
        g >= -tol && g <= gap + tol
    });
    Ok(BoundsReport {
        schema_version: BOUNDS_SCHEMA_VERSION,
        horizon: set.horizon,
        alpha: set.alpha,
        l_psi: set.l_psi,
        mu_err: mu.err,
        mu_eps: mu.eps,
        min_membership_slack: mu.min_slack,
        stability_bound: stability,
        ball,
        robust_gap_bound: gap,
        measured,
        stability_holds,
        robust_gap_holds,
    })
}
