//! Exact robust dynamic programming on a finite scenario tree.
//!
//! The recursion is
//!
//! ```text
//! Ψ_T = Ψ
//! J_t(ω^t, a^{t+1}) = inf_{P ∈ 𝒫_t(ω^t)} E_P[Ψ_{t+1}((ω^t, ·), a^{t+1})]
//! Ψ_t(ω^t, a^t)     = sup_{ã ∈ 𝒜_t(ω^t)} J_t(ω^t, (a^t, ã))
//! ```
//!
//! Each ambiguity set is represented by a finite list of candidate measures
//! (or, for Wasserstein balls, optionally by the exact infimum over measures
//! supported on a state grid). Actions are restricted to the grids of
//! [`crate::controls::grid`]. Ties in both optimisations go to the lowest
//! index.

use crate::ambiguity::{
    ball_inf_on_grid, candidate_laws, evaluate_reference, nearest_index, sample_measures,
    AmbiguityKernel, Law, RadiusSchedule,
};
use crate::controls::{clamp_to, grid, ActionSpec};
use crate::error::{Error, Result};
use crate::geometry::{dist, path_dist, Point};
use crate::measures::{DiscreteMeasure, LocalSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

type ValueFn = Arc<dyn Fn(&[Point], &[Point]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[Point], &[Point]) -> Vec<Point> + Send + Sync>;

/// Terminal objective `Ψ(ω^T, a^T)`, optionally with its action gradient.
#[derive(Clone)]
pub struct Objective {
    value: ValueFn,
    gradient: Option<GradFn>,
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Objective(gradient: {})", self.gradient.is_some())
    }
}

impl Objective {
    pub fn new<F: Fn(&[Point], &[Point]) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self {
            value: Arc::new(f),
            gradient: None,
        }
    }

    pub fn with_gradient<G: Fn(&[Point], &[Point]) -> Vec<Point> + Send + Sync + 'static>(
        mut self,
        g: G,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn eval(&self, path: &[Point], actions: &[Point]) -> f64 {
        (self.value)(path, actions)
    }

    /// Gradient with respect to every action coordinate; central finite
    /// differences when no analytic gradient was supplied.
    pub fn action_gradient(&self, path: &[Point], actions: &[Point]) -> Vec<Point> {
        if let Some(g) = &self.gradient {
            return g(path, actions);
        }
        let mut a = actions.to_vec();
        let mut out: Vec<Point> = actions.iter().map(|x| vec![0.0; x.len()]).collect();
        for s in 0..a.len() {
            for j in 0..a[s].len() {
                let x0 = a[s][j];
                let h = 1e-6 * x0.abs().max(1.0);
                a[s][j] = x0 + h;
                let up = self.eval(path, &a);
                a[s][j] = x0 - h;
                let dn = self.eval(path, &a);
                a[s][j] = x0;
                out[s][j] = (up - dn) / (2.0 * h);
            }
        }
        out
    }
}

/// Declared regularity constants of a problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeclaredConstants {
    /// Hölder exponent `α ∈ (0, 1]` of the objective.
    pub alpha: f64,
    /// Hölder constant `L_Ψ`.
    pub l_psi: f64,
    /// Growth constant `C_Ψ`.
    pub c_psi: f64,
    /// `L_{𝒜,t}` for `t = 0..T`.
    pub l_a: Vec<f64>,
    /// `L_{𝒫,t}` for `t = 0..T`.
    pub l_p: Vec<f64>,
    /// `C_{𝒫,t} >= 1` for `t = 0..T`.
    pub c_p: Vec<f64>,
}

/// `(C_{Ψ,t}, L_{Ψ,t})` for `t = 0..=T`:
/// `C_{Ψ,t} = 2^{T-t} C_Ψ Π_{s=t}^{T-1} C_{𝒫,s}` and
/// `L_{Ψ,t} = 2^{T-t} L_Ψ Π_{s=t}^{T-1} max(L_{𝒜,s}^α + L_{𝒫,s}^α, 1)`.
pub fn holder_constant_recursion(c: &DeclaredConstants, horizon: usize) -> Result<Vec<(f64, f64)>> {
    if c.l_a.len() != horizon || c.l_p.len() != horizon || c.c_p.len() != horizon {
        return Err(Error::InvalidInput(
            "stage constants must have length T".into(),
        ));
    }
    if !(c.alpha > 0.0 && c.alpha <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "Hölder exponent {} not in (0,1]",
            c.alpha
        )));
    }
    let mut out = vec![(0.0, 0.0); horizon + 1];
    out[horizon] = (c.c_psi, c.l_psi);
    for t in (0..horizon).rev() {
        let (cn, ln) = out[t + 1];
        let m = (c.l_a[t].powf(c.alpha) + c.l_p[t].powf(c.alpha)).max(1.0);
        out[t] = (2.0 * cn * c.c_p[t], 2.0 * ln * m);
    }
    Ok(out)
}

/// A finite-horizon robust control problem.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub horizon: usize,
    pub space: LocalSpace,
    pub actions: Vec<ActionSpec>,
    pub kernels: Vec<AmbiguityKernel>,
    pub objective: Objective,
    /// Growth exponent `p` of the objective.
    pub growth_p: f64,
    pub constants: Option<DeclaredConstants>,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if self.actions.len() != self.horizon || self.kernels.len() != self.horizon {
            return Err(Error::InvalidInput(format!(
                "need {} action sets and kernels, got {} and {}",
                self.horizon,
                self.actions.len(),
                self.kernels.len()
            )));
        }
        for (t, k) in self.kernels.iter().enumerate() {
            if let AmbiguityKernel::WassersteinBall { q, .. } = k {
                if *q <= self.growth_p && self.growth_p > 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "stage {t}: ball order {q} must exceed growth exponent {}",
                        self.growth_p
                    )));
                }
            }
        }
        if let Some(c) = &self.constants {
            holder_constant_recursion(c, self.horizon)?;
        }
        Ok(())
    }
}

/// How next states are identified with tree nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum PathGrid {
    /// Every distinct support point is its own node: exact, no snapping.
    Exact,
    /// Support points are snapped to the nearest grid point (lowest index
    /// on ties) before entering the tree.
    Nearest(Vec<Point>),
}

/// How the infimum over an ambiguity set is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerMode {
    /// Minimum over a finite list of candidates.
    Candidates,
    /// For Wasserstein balls: exact infimum over measures supported on the
    /// given grid (a linear program). Other kernels use candidates.
    GridBall(Vec<Point>),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Candidates drawn per node for sampled kernels.
    pub candidates: usize,
    pub seed: u64,
    /// Atoms per coordinate when discretising parametric laws; parametric
    /// balls use their own `atoms`.
    pub atoms: usize,
    pub grid: PathGrid,
    pub inner: InnerMode,
    /// Abort when the tree would exceed this many (node, history) pairs.
    pub max_states: usize,
    /// Extra candidates added at every node, e.g. a known true kernel.
    pub extra: Vec<ExtraKernel>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            candidates: 4,
            seed: 0,
            atoms: 8,
            grid: PathGrid::Exact,
            inner: InnerMode::Candidates,
            max_states: 2_000_000,
            extra: Vec::new(),
        }
    }
}

/// A stagewise measure-valued map used to inject additional candidates.
#[derive(Clone)]
pub struct ExtraKernel(pub Arc<dyn Fn(usize, &[Point]) -> Result<DiscreteMeasure> + Send + Sync>);

impl std::fmt::Debug for ExtraKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ExtraKernel(..)")
    }
}

#[derive(Debug, Clone)]
enum Inner {
    /// Candidate measures as lists of `(weight, child)`.
    Candidates(Vec<Vec<(f64, usize)>>),
    /// Ball around `reference` of radius `eps`, order `q`, over children
    /// laid out in grid order.
    Ball {
        reference: DiscreteMeasure,
        eps: f64,
        q: f64,
    },
}

/// A node of the scenario tree: a path `ω^t`.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub path: Vec<Point>,
    pub parent: Option<usize>,
    /// Action grid at this path (empty at the horizon).
    pub actions: Vec<Point>,
    /// Children at stage `t + 1`.
    pub children: Vec<usize>,
    /// Number of action histories `a^t` leading here.
    pub histories: usize,
    inner: Option<Inner>,
}

impl TreeNode {
    pub fn candidate_count(&self) -> usize {
        match &self.inner {
            Some(Inner::Candidates(c)) => c.len(),
            _ => 0,
        }
    }

    /// Candidate `k` as `(weight, child)` pairs.
    pub fn candidate(&self, k: usize) -> Option<&[(f64, usize)]> {
        match &self.inner {
            Some(Inner::Candidates(c)) => c.get(k).map(|v| v.as_slice()),
            _ => None,
        }
    }
}

/// Scenario tree: `stages[t]` holds the nodes at stage `t`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub stages: Vec<Vec<TreeNode>>,
    /// Largest distance between a support point and its grid node.
    pub observed_mesh: f64,
}

fn node_seed(seed: u64, t: usize, idx: usize) -> u64 {
    let mut z = seed ^ ((t as u64) << 48) ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl ScenarioTree {
    pub fn build(problem: &ControlProblem, cfg: &SolverConfig) -> Result<Self> {
        problem.validate()?;
        let t_max = problem.horizon;
        let mut stages: Vec<Vec<TreeNode>> = vec![vec![TreeNode {
            path: Vec::new(),
            parent: None,
            actions: Vec::new(),
            children: Vec::new(),
            histories: 1,
            inner: None,
        }]];
        let mut mesh: f64 = 0.0;
        let mut states = 0usize;
        for t in 0..t_max {
            let mut next: Vec<TreeNode> = Vec::new();
            let kernel = &problem.kernels[t];
            for idx in 0..stages[t].len() {
                let path = stages[t][idx].path.clone();
                let acts = grid(&problem.actions[t], &path)?;
                let hist = stages[t][idx].histories;
                let child_hist = hist
                    .checked_mul(acts.len())
                    .ok_or_else(|| Error::SizeGuard("history count overflow".into()))?;
                let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
                let mut children: Vec<usize> = Vec::new();
                let mut add_child = |x: Point, next: &mut Vec<TreeNode>, mesh: &mut f64| -> usize {
                    let x = match &cfg.grid {
                        PathGrid::Exact => x,
                        PathGrid::Nearest(g) => {
                            let k = nearest_index(g, &x);
                            *mesh = mesh.max(dist(&g[k], &x));
                            g[k].clone()
                        }
                    };
                    let key = bits(&x);
                    if let Some(&c) = lookup.get(&key) {
                        return c;
                    }
                    let mut p = path.clone();
                    p.push(x);
                    next.push(TreeNode {
                        path: p,
                        parent: Some(idx),
                        actions: Vec::new(),
                        children: Vec::new(),
                        histories: child_hist,
                        inner: None,
                    });
                    let c = next.len() - 1;
                    lookup.insert(key, c);
                    children.push(c);
                    c
                };
                let ball_grid = match (&cfg.inner, kernel) {
                    (InnerMode::GridBall(g), AmbiguityKernel::WassersteinBall { .. }) => Some(g),
                    _ => None,
                };
                let inner = if let Some(g) = ball_grid {
                    let AmbiguityKernel::WassersteinBall {
                        reference,
                        radius,
                        q,
                        ..
                    } = kernel
                    else {
                        unreachable!()
                    };
                    for z in g {
                        add_child(z.clone(), &mut next, &mut mesh);
                    }
                    Inner::Ball {
                        reference: reference.evaluate(&path)?,
                        eps: radius.radius(&path)?,
                        q: *q,
                    }
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(node_seed(cfg.seed, t, idx));
                    let atoms = match kernel {
                        AmbiguityKernel::ParametricBall { atoms, .. } => *atoms,
                        _ => cfg.atoms,
                    };
                    let mut measures: Vec<DiscreteMeasure> =
                        candidate_laws(kernel, &path, cfg.candidates, &mut rng)?
                            .iter()
                            .map(|l| l.to_discrete(atoms))
                            .collect::<Result<_>>()?;
                    for e in &cfg.extra {
                        measures.push((e.0)(t, &path)?);
                    }
                    let mut cands = Vec::with_capacity(measures.len());
                    for m in measures {
                        m.check_in(&problem.space)?;
                        let mut c: Vec<(f64, usize)> = Vec::with_capacity(m.len());
                        for (x, w) in m.atoms() {
                            if w > 0.0 {
                                c.push((w, add_child(x.clone(), &mut next, &mut mesh)));
                            }
                        }
                        cands.push(c);
                    }
                    Inner::Candidates(cands)
                };
                states += hist * acts.len();
                let node = &mut stages[t][idx];
                node.actions = acts;
                node.children = children;
                node.inner = Some(inner);
            }
            states += next.iter().map(|n| n.histories).sum::<usize>();
            if states > cfg.max_states {
                return Err(Error::SizeGuard(format!(
                    "scenario tree exceeds {} states at stage {}",
                    cfg.max_states,
                    t + 1
                )));
            }
            stages.push(next);
        }
        Ok(Self {
            stages,
            observed_mesh: mesh,
        })
    }

    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    /// Ancestor indices of a node: `out[s]` is the stage-`s` ancestor.
    pub fn ancestors(&self, t: usize, idx: usize) -> Vec<usize> {
        let mut out = vec![0; t + 1];
        let mut cur = idx;
        for s in (0..=t).rev() {
            out[s] = cur;
            if s > 0 {
                cur = self.stages[s][cur].parent.expect("non-root has a parent");
            }
        }
        out
    }

    /// Action history encoded by `hist` at a stage-`t` node.
    pub fn decode_history(&self, t: usize, idx: usize, mut hist: usize) -> Vec<Point> {
        let anc = self.ancestors(t, idx);
        let mut out = vec![Vec::new(); t];
        for s in (0..t).rev() {
            let a = &self.stages[s][anc[s]].actions;
            out[s] = a[hist % a.len()].clone();
            hist /= a.len();
        }
        out
    }

    /// Inverse of [`Self::decode_history`] by action indices.
    pub fn encode_history(&self, t: usize, idx: usize, action_idx: &[usize]) -> usize {
        let anc = self.ancestors(t, idx);
        let mut h = 0;
        for s in 0..t {
            h = h * self.stages[s][anc[s]].actions.len() + action_idx[s];
        }
        h
    }

    /// Index of the node whose path is nearest to `path` (exact match first).
    pub fn locate(&self, path: &[Point]) -> Option<usize> {
        let t = path.len();
        let nodes = self.stages.get(t)?;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (k, n) in nodes.iter().enumerate() {
            let d = path_dist(&n.path, path);
            if d < best_d {
                best_d = d;
                best = Some(k);
                if d == 0.0 {
                    break;
                }
            }
        }
        best
    }
}

/// Adversary choice at a `(node, history, action)` triple.
#[derive(Debug, Clone, PartialEq)]
pub enum WorstChoice {
    Candidate(usize),
    Measure(DiscreteMeasure),
}

/// Value functions and optimisers produced by [`backward_induction_exact`].
#[derive(Debug, Clone)]
pub struct ValueTable {
    /// `psi[t][node][hist]` is `Ψ_t(ω^t, a^t)`.
    pub psi: Vec<Vec<Vec<f64>>>,
    /// `j[t][node][hist * |A| + a]` is `J_t(ω^t, (a^t, a))`.
    pub j: Vec<Vec<Vec<f64>>>,
    /// `best[t][node][hist]`: index of the maximising action.
    pub best: Vec<Vec<Vec<usize>>>,
    /// `worst[t][node][hist * |A| + a]`: minimising measure.
    pub worst: Vec<Vec<Vec<WorstChoice>>>,
}

impl ValueTable {
    /// Plain-text dump: `psi t node hist value` and `j t node entry value`
    /// lines in index order, floats in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# value table\n");
        let _ = writeln!(s, "horizon {}", self.psi.len() - 1);
        for (t, st) in self.psi.iter().enumerate() {
            for (n, v) in st.iter().enumerate() {
                for (h, x) in v.iter().enumerate() {
                    let _ = writeln!(s, "psi {t} {n} {h} {x:?}");
                }
            }
        }
        for (t, st) in self.j.iter().enumerate() {
            for (n, v) in st.iter().enumerate() {
                for (h, x) in v.iter().enumerate() {
                    let _ = writeln!(s, "j {t} {n} {h} {x:?} {}", self.best_or_dash(t, n, h));
                }
            }
        }
        s
    }

    fn best_or_dash(&self, t: usize, n: usize, entry: usize) -> String {
        match &self.worst[t][n][entry] {
            WorstChoice::Candidate(k) => k.to_string(),
            WorstChoice::Measure(_) => "lp".into(),
        }
    }

    /// Parses the `psi` lines of [`Self::to_text`] back into
    /// `(t, node, hist) -> value` triples.
    pub fn parse_psi(text: &str) -> Result<Vec<(usize, usize, usize, f64)>> {
        let mut out = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            if it.next() != Some("psi") {
                continue;
            }
            let err = || Error::Parse {
                line: k + 1,
                message: "malformed psi line".into(),
            };
            let mut num = || it.next().ok_or_else(err);
            let t: usize = num()?.parse().map_err(|_| err())?;
            let n: usize = num()?.parse().map_err(|_| err())?;
            let h: usize = num()?.parse().map_err(|_| err())?;
            let v: f64 = num()?.parse().map_err(|_| err())?;
            out.push((t, n, h, v));
        }
        Ok(out)
    }
}

/// Output of the exact solver.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub tree: ScenarioTree,
    pub table: ValueTable,
    /// `Ψ_0`.
    pub value: f64,
    /// Action index chosen by the composed optimal policy at every node.
    pub policy_actions: Vec<Vec<usize>>,
    /// History index realised by the optimal policy at every node.
    pub policy_histories: Vec<Vec<usize>>,
}

fn argmin_first(vals: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, v) in vals.enumerate() {
        if v < best.1 {
            best = (k, v);
        }
    }
    best
}

/// Backward induction on the scenario tree of `problem`.
pub fn backward_induction_exact(
    problem: &ControlProblem,
    cfg: &SolverConfig,
) -> Result<ExactSolution> {
    let tree = ScenarioTree::build(problem, cfg)?;
    solve_tree(problem, tree)
}

/// Backward induction on a prebuilt tree.
pub fn solve_tree(problem: &ControlProblem, tree: ScenarioTree) -> Result<ExactSolution> {
    let t_max = tree.horizon();
    let mut psi: Vec<Vec<Vec<f64>>> = vec![Vec::new(); t_max + 1];
    let mut jt: Vec<Vec<Vec<f64>>> = vec![Vec::new(); t_max];
    let mut best: Vec<Vec<Vec<usize>>> = vec![Vec::new(); t_max];
    let mut worst: Vec<Vec<Vec<WorstChoice>>> = vec![Vec::new(); t_max];

    psi[t_max] = (0..tree.stages[t_max].len())
        .into_par_iter()
        .map(|idx| {
            let node = &tree.stages[t_max][idx];
            (0..node.histories)
                .map(|h| {
                    let acts = tree.decode_history(t_max, idx, h);
                    let v = problem.objective.eval(&node.path, &acts);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Numerical(format!(
                            "objective is {v} at {:?}",
                            node.path
                        )))
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    for t in (0..t_max).rev() {
        let next = &psi[t + 1];
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<usize>, Vec<WorstChoice>)> = (0..tree.stages[t]
            .len())
            .into_par_iter()
            .map(|idx| {
                let node = &tree.stages[t][idx];
                let na = node.actions.len();
                let mut j = Vec::with_capacity(node.histories * na);
                let mut w = Vec::with_capacity(node.histories * na);
                let mut p = Vec::with_capacity(node.histories);
                let mut b = Vec::with_capacity(node.histories);
                for h in 0..node.histories {
                    let mut best_a = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for a in 0..na {
                        let ch = h * na + a;
                        let (v, choice) = match node.inner.as_ref().expect("inner stage") {
                            Inner::Candidates(c) => {
                                let (k, v) =
                                    argmin_first(c.iter().map(|m| {
                                        m.iter().map(|(wt, cd)| wt * next[*cd][ch]).sum()
                                    }));
                                (v, WorstChoice::Candidate(k))
                            }
                            Inner::Ball { reference, eps, q } => {
                                let grid: Vec<Point> = node
                                    .children
                                    .iter()
                                    .map(|c| tree.stages[t + 1][*c].path[t].clone())
                                    .collect();
                                let vals: Vec<f64> =
                                    node.children.iter().map(|c| next[*c][ch]).collect();
                                let (v, m) = ball_inf_on_grid(reference, *eps, *q, &grid, &vals)?;
                                (v, WorstChoice::Measure(m))
                            }
                        };
                        j.push(v);
                        w.push(choice);
                        if v > best_v {
                            best_v = v;
                            best_a = a;
                        }
                    }
                    p.push(best_v);
                    b.push(best_a);
                }
                Ok((p, j, b, w))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, j, b, w) in rows {
            psi[t].push(p);
            jt[t].push(j);
            best[t].push(b);
            worst[t].push(w);
        }
    }

    // Compose the optimal policy top-down.
    let mut pol_a: Vec<Vec<usize>> = vec![Vec::new(); t_max];
    let mut pol_h: Vec<Vec<usize>> = vec![vec![0; 1]; t_max + 1];
    for t in 0..t_max {
        let n = tree.stages[t].len();
        pol_a[t] = (0..n).map(|i| best[t][i][pol_h[t][i]]).collect();
        pol_h[t + 1] = tree.stages[t + 1]
            .iter()
            .map(|c| {
                let p = c.parent.expect("parent");
                pol_h[t][p] * tree.stages[t][p].actions.len() + pol_a[t][p]
            })
            .collect();
    }
    let value = psi[0][0][0];
    Ok(ExactSolution {
        tree,
        table: ValueTable {
            psi,
            j: jt,
            best,
            worst,
        },
        value,
        policy_actions: pol_a,
        policy_histories: pol_h,
    })
}

/// A (possibly randomised-free) feedback policy `a_t(ω^t)`; past actions are
/// supplied for convenience and must be consistent with the policy.
pub trait Policy: Sync {
    fn act(&self, t: usize, path: &[Point], past: &[Point]) -> Result<Point>;
}

/// Per-stage lookup table on tree paths; off-table paths use the nearest
/// stored path and the action is carried over with [`clamp_to`].
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub stages: Vec<Vec<(Vec<Point>, Point)>>,
    pub specs: Vec<ActionSpec>,
}

impl TabularPolicy {
    pub fn from_solution(sol: &ExactSolution, problem: &ControlProblem) -> Self {
        let stages = (0..sol.tree.horizon())
            .map(|t| {
                sol.tree.stages[t]
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.path.clone(), n.actions[sol.policy_actions[t][i]].clone()))
                    .collect()
            })
            .collect();
        Self {
            stages,
            specs: problem.actions.clone(),
        }
    }
}

impl Policy for TabularPolicy {
    fn act(&self, t: usize, path: &[Point], _past: &[Point]) -> Result<Point> {
        let table = self
            .stages
            .get(t)
            .ok_or_else(|| Error::InvalidInput(format!("no policy for stage {t}")))?;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, (p, _)) in table.iter().enumerate() {
            let d = path_dist(p, path);
            if d < best_d {
                best_d = d;
                best = k;
                if d == 0.0 {
                    break;
                }
            }
        }
        let (src, a) = &table[best];
        if best_d == 0.0 {
            Ok(a.clone())
        } else {
            clamp_to(&self.specs[t], src, path, a)
        }
    }
}

/// Policy from a closure.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(usize, &[Point], &[Point]) -> Result<Point> + Sync,
{
    fn act(&self, t: usize, path: &[Point], past: &[Point]) -> Result<Point> {
        (self.0)(t, path, past)
    }
}

/// Selection of one law per `(t, ω^t, a^{t+1})`.
pub trait KernelSelection: Sync {
    fn law(&self, t: usize, path: &[Point], actions: &[Point]) -> Result<Law>;
}

/// Always the reference law of each stage's ambiguity set.
pub struct ReferenceSelection<'a>(pub &'a [AmbiguityKernel]);

impl KernelSelection for ReferenceSelection<'_> {
    fn law(&self, t: usize, path: &[Point], _actions: &[Point]) -> Result<Law> {
        evaluate_reference(&self.0[t], path)
    }
}

/// Selection from a closure.
pub struct FnSelection<F>(pub F);

impl<F> KernelSelection for FnSelection<F>
where
    F: Fn(usize, &[Point], &[Point]) -> Result<Law> + Sync,
{
    fn law(&self, t: usize, path: &[Point], actions: &[Point]) -> Result<Law> {
        (self.0)(t, path, actions)
    }
}

/// Member `index` of a family of kernel selections drawn from the ambiguity
/// sets. Index 0 is the reference; any other index draws one member of
/// `𝒫_t(ω^t)` from a generator seeded by `(seed, index, t, ω^t)`, so a path
/// always receives the same law and families for different policies agree.
pub struct SampledSelection<'a> {
    pub kernels: &'a [AmbiguityKernel],
    pub index: usize,
    pub seed: u64,
}

fn path_seed(seed: u64, index: usize, path: &[Point]) -> u64 {
    let mut h = node_seed(seed, path.len(), index);
    for x in path {
        for b in bits(x) {
            h = node_seed(h, 0, b as usize);
        }
    }
    h
}

impl KernelSelection for SampledSelection<'_> {
    fn law(&self, t: usize, path: &[Point], _actions: &[Point]) -> Result<Law> {
        if self.index == 0 {
            return evaluate_reference(&self.kernels[t], path);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(path_seed(self.seed, self.index, path));
        let mut laws = sample_measures(&self.kernels[t], path, 2, &mut rng)?;
        Ok(laws.pop().expect("two members drawn"))
    }
}

/// Exact robust values for nondecreasing radii over nested candidate
/// families. Every stage must be a Wasserstein ball; its radius is replaced
/// by each entry of `radii` in turn. The family at `radii[k]` holds the
/// reference and `per_radius` members of every ball of positive radius
/// `radii[j]`, `j <= k`, drawn with path-seeded generators. Families thus
/// grow with the radius, and since rounding is monotone the computed values
/// are nonincreasing exactly, not just up to round-off. At radius zero the
/// family is the reference alone.
pub fn values_over_radii(
    problem: &ControlProblem,
    radii: &[f64],
    per_radius: usize,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    if radii.windows(2).any(|w| w[1] < w[0]) || radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidInput(
            "radii must be nonnegative and nondecreasing".into(),
        ));
    }
    let with_radius = |eps: f64| -> Result<Vec<AmbiguityKernel>> {
        problem
            .kernels
            .iter()
            .enumerate()
            .map(|(t, k)| match k {
                AmbiguityKernel::WassersteinBall {
                    reference,
                    q,
                    space,
                    ..
                } => Ok(AmbiguityKernel::WassersteinBall {
                    reference: reference.clone(),
                    radius: RadiusSchedule::Constant(eps),
                    q: *q,
                    space: space.clone(),
                }),
                _ => Err(Error::Unsupported(format!(
                    "stage {t} is not a Wasserstein ball"
                ))),
            })
            .collect()
    };
    let mut out = Vec::with_capacity(radii.len());
    let mut extra = cfg.extra.clone();
    for (j, &eps) in radii.iter().enumerate() {
        let kernels = with_radius(eps)?;
        if eps > 0.0 {
            for m in 0..per_radius {
                let ks = kernels.clone();
                let seed = node_seed(cfg.seed, j, m);
                let atoms = cfg.atoms;
                extra.push(ExtraKernel(Arc::new(move |t, path| {
                    let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, t, path));
                    let laws = sample_measures(&ks[t], path, 2, &mut rng)?;
                    laws[1].to_discrete(atoms)
                })));
            }
        }
        let mut p = problem.clone();
        p.kernels = kernels;
        let mut c = cfg.clone();
        c.candidates = 1;
        c.inner = InnerMode::Candidates;
        c.extra = extra.clone();
        out.push(backward_induction_exact(&p, &c)?.value);
    }
    Ok(out)
}

/// Values of one policy under every member of a sampled family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledSetValue {
    /// `per_member[0]` is the value under the reference.
    pub per_member: Vec<f64>,
    /// Minimum over the family: the robust value on the sampled set.
    pub robust: f64,
}

/// Monte Carlo values of `policy` under the first `members` selections of
/// [`SampledSelection`], all with the same path seed.
pub fn sampled_set_value(
    problem: &ControlProblem,
    policy: &dyn Policy,
    members: usize,
    paths: usize,
    seed: u64,
) -> Result<SampledSetValue> {
    if members == 0 {
        return Err(Error::InvalidInput(
            "sampled family needs at least one member".into(),
        ));
    }
    let per_member = (0..members)
        .map(|index| {
            let sel = SampledSelection {
                kernels: &problem.kernels,
                index,
                seed,
            };
            evaluate_policy(
                problem,
                policy,
                &sel,
                EvalMode::MonteCarlo { paths, seed },
                0,
            )
            .map(|v| v.mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    let robust = per_member.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SampledSetValue { per_member, robust })
}

/// The minimising kernel `P*` stored in an exact solution.
pub struct WorstCaseKernel<'a> {
    pub solution: &'a ExactSolution,
}

impl KernelSelection for WorstCaseKernel<'_> {
    fn law(&self, t: usize, path: &[Point], actions: &[Point]) -> Result<Law> {
        let tree = &self.solution.tree;
        let idx = tree
            .locate(path)
            .ok_or_else(|| Error::InvalidInput(format!("no node at stage {t}")))?;
        let anc = tree.ancestors(t, idx);
        let mut aidx = Vec::with_capacity(t + 1);
        for s in 0..=t {
            let grid = &tree.stages[s][anc[s]].actions;
            aidx.push(nearest_index(grid, &actions[s]));
        }
        let h = tree.encode_history(t, idx, &aidx[..t]);
        let node = &tree.stages[t][idx];
        let entry = h * node.actions.len() + aidx[t];
        let measure = match &self.solution.table.worst[t][idx][entry] {
            WorstChoice::Measure(m) => m.clone(),
            WorstChoice::Candidate(k) => {
                let c = node.candidate(*k).expect("candidate exists");
                let pts = c
                    .iter()
                    .map(|(_, ch)| tree.stages[t + 1][*ch].path[t].clone())
                    .collect();
                let ws = c.iter().map(|(w, _)| *w).collect();
                DiscreteMeasure::new(pts, ws)?
            }
        };
        Ok(Law::Discrete(measure))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EvalMode {
    Exact,
    MonteCarlo { paths: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub mean: f64,
    /// Standard error for Monte Carlo estimates.
    pub std_error: Option<f64>,
}

/// `E_P[Ψ(ω, a(ω))]` for a policy and a kernel selection, by enumerating
/// every path of finitely supported laws or by Monte Carlo.
pub fn evaluate_policy(
    problem: &ControlProblem,
    policy: &dyn Policy,
    selection: &dyn KernelSelection,
    mode: EvalMode,
    atoms: usize,
) -> Result<PolicyValue> {
    match mode {
        EvalMode::Exact => {
            let mut path = Vec::new();
            let mut acts = Vec::new();
            let v = eval_rec(problem, policy, selection, atoms, &mut path, &mut acts)?;
            Ok(PolicyValue {
                mean: v,
                std_error: None,
            })
        }
        EvalMode::MonteCarlo { paths, seed } => {
            if paths < 2 {
                return Err(Error::InvalidInput(
                    "Monte Carlo needs at least 2 paths".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vals = Vec::with_capacity(paths);
            for _ in 0..paths {
                vals.push(simulate_path(problem, policy, selection, &mut rng)?.0);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(PolicyValue {
                mean,
                std_error: Some((var / n).sqrt()),
            })
        }
    }
}

/// One simulated path: returns `(Ψ, path, actions)`.
pub fn simulate_path<R: Rng + ?Sized>(
    problem: &ControlProblem,
    policy: &dyn Policy,
    selection: &dyn KernelSelection,
    rng: &mut R,
) -> Result<(f64, Vec<Point>, Vec<Point>)> {
    let mut path: Vec<Point> = Vec::new();
    let mut acts: Vec<Point> = Vec::new();
    for t in 0..problem.horizon {
        let a = policy.act(t, &path, &acts)?;
        acts.push(a);
        let law = selection.law(t, &path, &acts)?;
        path.push(law.sample(rng));
    }
    Ok((problem.objective.eval(&path, &acts), path, acts))
}

fn eval_rec(
    problem: &ControlProblem,
    policy: &dyn Policy,
    selection: &dyn KernelSelection,
    atoms: usize,
    path: &mut Vec<Point>,
    acts: &mut Vec<Point>,
) -> Result<f64> {
    let t = path.len();
    if t == problem.horizon {
        return Ok(problem.objective.eval(path, acts));
    }
    let a = policy.act(t, path, acts)?;
    acts.push(a);
    let law = selection.law(t, path, acts)?;
    let m = match &law {
        Law::Discrete(m) => m.clone(),
        Law::Parametric { .. } => law.to_discrete(atoms)?,
    };
    let mut total = 0.0;
    for (x, w) in m.atoms() {
        if w == 0.0 {
            continue;
        }
        path.push(x.clone());
        total += w * eval_rec(problem, policy, selection, atoms, path, acts)?;
        path.pop();
    }
    acts.pop();
    Ok(total)
}

/// Value of fixed tree policy (`actions[t][node]`) and fixed path-only
/// adversary (`adversary[t][node]`) by summing over all tree paths.
pub fn tree_policy_value(
    problem: &ControlProblem,
    tree: &ScenarioTree,
    actions: &[Vec<usize>],
    adversary: &dyn Fn(usize, usize, usize) -> usize,
) -> f64 {
    fn rec(
        problem: &ControlProblem,
        tree: &ScenarioTree,
        actions: &[Vec<usize>],
        adversary: &dyn Fn(usize, usize, usize) -> usize,
        t: usize,
        idx: usize,
        hist: usize,
        acts: &mut Vec<Point>,
    ) -> f64 {
        let node = &tree.stages[t][idx];
        if t == tree.horizon() {
            return problem.objective.eval(&node.path, acts);
        }
        let a = actions[t][idx];
        let h = hist * node.actions.len() + a;
        acts.push(node.actions[a].clone());
        let k = adversary(t, idx, h);
        let c = node.candidate(k).expect("candidate");
        let v = c
            .iter()
            .map(|(w, ch)| w * rec(problem, tree, actions, adversary, t + 1, *ch, h, acts))
            .sum();
        acts.pop();
        v
    }
    let mut acts = Vec::new();
    rec(problem, tree, actions, adversary, 0, 0, 0, &mut acts)
}

/// `inf` over path-only adversaries of the value of a fixed tree policy,
/// computed by a minimising backward pass.
pub fn tree_policy_worst_value(
    problem: &ControlProblem,
    tree: &ScenarioTree,
    actions: &[Vec<usize>],
) -> f64 {
    let t_max = tree.horizon();
    // Realised history at each node under the policy.
    let mut hist: Vec<Vec<usize>> = vec![vec![0]];
    for t in 0..t_max {
        let h = tree.stages[t + 1]
            .iter()
            .map(|c| {
                let p = c.parent.unwrap();
                hist[t][p] * tree.stages[t][p].actions.len() + actions[t][p]
            })
            .collect();
        hist.push(h);
    }
    let mut val: Vec<f64> = tree.stages[t_max]
        .iter()
        .enumerate()
        .map(|(i, n)| {
            problem
                .objective
                .eval(&n.path, &tree.decode_history(t_max, i, hist[t_max][i]))
        })
        .collect();
    for t in (0..t_max).rev() {
        val = tree.stages[t]
            .iter()
            .map(|n| {
                (0..n.candidate_count())
                    .map(|k| {
                        n.candidate(k)
                            .unwrap()
                            .iter()
                            .map(|(w, c)| w * val[*c])
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
    }
    val[0]
}

/// `sup` over tree policies of the value against the stored minimising
/// kernel `P*` of an exact solution, by a maximising backward pass over
/// `(node, action history)` pairs.
pub fn best_response_value(problem: &ControlProblem, sol: &ExactSolution) -> Result<f64> {
    let tree = &sol.tree;
    let t_max = tree.horizon();
    let mut val: Vec<Vec<f64>> = tree.stages[t_max]
        .iter()
        .enumerate()
        .map(|(i, n)| {
            (0..n.histories)
                .map(|h| {
                    problem
                        .objective
                        .eval(&n.path, &tree.decode_history(t_max, i, h))
                })
                .collect()
        })
        .collect();
    for t in (0..t_max).rev() {
        let mut cur = Vec::with_capacity(tree.stages[t].len());
        for (i, n) in tree.stages[t].iter().enumerate() {
            let mut row = Vec::with_capacity(n.histories);
            for h in 0..n.histories {
                let mut best = f64::NEG_INFINITY;
                for a in 0..n.actions.len() {
                    let e = h * n.actions.len() + a;
                    let k = match &sol.table.worst[t][i][e] {
                        WorstChoice::Candidate(k) => *k,
                        WorstChoice::Measure(_) => {
                            return Err(Error::Unsupported(
                                "best response needs candidate-based inner sets".into(),
                            ))
                        }
                    };
                    let c = n.candidate(k).expect("stored candidate exists");
                    let v: f64 = c.iter().map(|(w, ch)| w * val[*ch][e]).sum();
                    best = best.max(v);
                }
                row.push(best);
            }
            cur.push(row);
        }
        val = cur;
    }
    Ok(val[0][0])
}

/// Results of exhaustive enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceReport {
    /// `max` over tree policies of `min` over path-only adversaries.
    pub max_min: f64,
    /// `min` over adversaries reacting to `(ω^t, a^{t+1})` of `max` over
    /// tree policies; `None` when beyond the enumeration budget.
    pub min_max_adaptive: Option<f64>,
    pub policies: u64,
    pub adversaries: u64,
}

fn mixed_radix_next(digits: &mut [usize], radices: &[usize]) -> bool {
    for k in (0..digits.len()).rev() {
        digits[k] += 1;
        if digits[k] < radices[k] {
            return true;
        }
        digits[k] = 0;
    }
    false
}

fn product_u64(xs: impl Iterator<Item = usize>) -> Option<u64> {
    xs.fold(Some(1u64), |acc, x| {
        acc.and_then(|a| a.checked_mul(x as u64))
    })
}

/// Exhaustive oracle for small trees with candidate-based inner sets.
///
/// Enumerates every deterministic policy (an action per tree node) and
/// every adversary (a candidate per tree node), evaluating each pair by
/// summing over all paths. `budget` caps policies × adversaries.
pub fn brute_force_value(
    problem: &ControlProblem,
    tree: &ScenarioTree,
    budget: u64,
) -> Result<BruteForceReport> {
    let t_max = tree.horizon();
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for t in 0..t_max {
        for i in 0..tree.stages[t].len() {
            if tree.stages[t][i].candidate_count() == 0 {
                return Err(Error::Unsupported(
                    "brute force needs candidate lists".into(),
                ));
            }
            slots.push((t, i));
        }
    }
    let a_radix: Vec<usize> = slots
        .iter()
        .map(|&(t, i)| tree.stages[t][i].actions.len())
        .collect();
    let k_radix: Vec<usize> = slots
        .iter()
        .map(|&(t, i)| tree.stages[t][i].candidate_count())
        .collect();
    let np = product_u64(a_radix.iter().copied());
    let nk = product_u64(k_radix.iter().copied());
    let (np, nk) = match (np, nk) {
        (Some(a), Some(b)) if a.checked_mul(b).is_some_and(|x| x <= budget) => (a, b),
        _ => {
            return Err(Error::SizeGuard(format!(
                "enumeration of policies x adversaries exceeds {budget}"
            )))
        }
    };
    let slot_of: HashMap<(usize, usize), usize> =
        slots.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    let unpack = |digits: &[usize]| -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (0..t_max).map(|t| vec![0; tree.stages[t].len()]).collect();
        for (k, &(t, i)) in slots.iter().enumerate() {
            out[t][i] = digits[k];
        }
        out
    };

    let mut pd = vec![0usize; slots.len()];
    let mut max_min = f64::NEG_INFINITY;
    loop {
        let actions = unpack(&pd);
        let mut kd = vec![0usize; slots.len()];
        let mut inner = f64::INFINITY;
        loop {
            let adv = |t: usize, i: usize, _h: usize| kd[slot_of[&(t, i)]];
            inner = inner.min(tree_policy_value(problem, tree, &actions, &adv));
            if !mixed_radix_next(&mut kd, &k_radix) {
                break;
            }
        }
        max_min = max_min.max(inner);
        if !mixed_radix_next(&mut pd, &a_radix) {
            break;
        }
    }

    // Adversary indexed by (node, history, action).
    let mut triples: Vec<(usize, usize, usize)> = Vec::new();
    for t in 0..t_max {
        for (i, n) in tree.stages[t].iter().enumerate() {
            for e in 0..n.histories * n.actions.len() {
                triples.push((t, i, e));
            }
        }
    }
    let tk_radix: Vec<usize> = triples
        .iter()
        .map(|&(t, i, _)| tree.stages[t][i].candidate_count())
        .collect();
    let nsel = product_u64(tk_radix.iter().copied());
    let min_max = match nsel.and_then(|s| s.checked_mul(np)) {
        Some(total) if total <= budget => {
            let tri_of: HashMap<(usize, usize, usize), usize> =
                triples.iter().enumerate().map(|(k, s)| (*s, k)).collect();
            let mut sd = vec![0usize; triples.len()];
            let mut best = f64::INFINITY;
            loop {
                let adv = |t: usize, i: usize, h: usize| sd[tri_of[&(t, i, h)]];
                let mut pd = vec![0usize; slots.len()];
                let mut outer = f64::NEG_INFINITY;
                loop {
                    outer = outer.max(tree_policy_value(problem, tree, &unpack(&pd), &adv));
                    if !mixed_radix_next(&mut pd, &a_radix) {
                        break;
                    }
                }
                best = best.min(outer);
                if !mixed_radix_next(&mut sd, &tk_radix) {
                    break;
                }
            }
            Some(best)
        }
        _ => None,
    };
    Ok(BruteForceReport {
        max_min,
        min_max_adaptive: min_max,
        policies: np,
        adversaries: nk,
    })
}
