use super::mlp::{AdamState, Mlp};
use crate::ambiguity::{
    evaluate_reference, sample_measures, AmbiguityKernel, Law, ReferenceKernel,
};
use crate::controls::{grid, ActionSpec};
use crate::dp::{ControlProblem, Objective, Policy};
use crate::error::{Error, Result};
use crate::geometry::{dist, Point};
use crate::measures::{DiscreteMeasure, LocalSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::borrow::Cow;
use std::fmt::Write as _;
use std::sync::Arc;

/// Network inputs built from `(ω^t, a^t)`.
///
/// Any deterministic map of the path and past actions can be used; the
/// trainers only need the Jacobian with respect to the most recent action
/// to push value gradients back into the action network.
pub trait Featurizer: Send + Sync {
    fn dim(&self, t: usize) -> usize;
    fn features(&self, t: usize, path: &[Point], actions: &[Point]) -> Vec<f64>;
    /// `∂ features(t, ·) / ∂ a_{t-1}` as a row-major `dim(t) × m_{t-1}`
    /// matrix; only called for `t >= 1`.
    fn last_action_jacobian(&self, t: usize, path: &[Point], actions: &[Point]) -> Vec<f64>;
}

/// The concatenated path and past actions, each block divided by a fixed
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub state_dim: usize,
    pub action_dims: Vec<usize>,
    pub state_scale: f64,
    pub action_scale: Vec<f64>,
}

impl RawFeatures {
    /// Scales from the bound of `Ω_loc` and the action boxes at the origin.
    pub fn for_problem(problem: &ControlProblem) -> Result<Self> {
        let d = problem.space.dim;
        let state_scale = match problem.space.bound {
            Some(c) if c > 0.0 => c,
            _ => 1.0,
        };
        let mut action_scale = Vec::with_capacity(problem.horizon);
        for (s, spec) in problem.actions.iter().enumerate() {
            let origin = vec![vec![0.0; d]; s];
            let (lo, hi) = spec.bounding_box(&origin)?;
            let m = lo.iter().chain(&hi).fold(0.0f64, |m, v| m.max(v.abs()));
            action_scale.push(if m > 0.0 { m } else { 1.0 });
        }
        Ok(Self {
            state_dim: d,
            action_dims: problem.actions.iter().map(ActionSpec::dim).collect(),
            state_scale,
            action_scale,
        })
    }
}

impl Featurizer for RawFeatures {
    fn dim(&self, t: usize) -> usize {
        t * self.state_dim + self.action_dims[..t].iter().sum::<usize>()
    }

    fn features(&self, t: usize, path: &[Point], actions: &[Point]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim(t));
        for p in &path[..t] {
            x.extend(p.iter().map(|v| v / self.state_scale));
        }
        for (s, a) in actions[..t].iter().enumerate() {
            x.extend(a.iter().map(|v| v / self.action_scale[s]));
        }
        x
    }

    fn last_action_jacobian(&self, t: usize, _path: &[Point], _actions: &[Point]) -> Vec<f64> {
        let m = self.action_dims[t - 1];
        let n = self.dim(t);
        let row0 = n - m;
        let mut jac = vec![0.0; n * m];
        for j in 0..m {
            jac[(row0 + j) * m + j] = 1.0 / self.action_scale[t - 1];
        }
        jac
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maps raw network outputs into `𝒜_t(ω^t)`: a sigmoid onto the bounding
/// box followed by the projection of the action set. Returns the action
/// and the diagonal derivative of the sigmoid map; the projection is
/// treated as the identity when differentiating.
pub fn squash_action(spec: &ActionSpec, path: &[Point], raw: &[f64]) -> Result<(Point, Vec<f64>)> {
    let (lo, hi) = spec.bounding_box(path)?;
    if raw.len() != lo.len() {
        return Err(Error::DimensionMismatch {
            expected: lo.len(),
            found: raw.len(),
        });
    }
    let mut a = Vec::with_capacity(raw.len());
    let mut da = Vec::with_capacity(raw.len());
    for j in 0..raw.len() {
        let s = sigmoid(raw[j]);
        a.push(lo[j] + (hi[j] - lo[j]) * s);
        da.push((hi[j] - lo[j]) * s * (1.0 - s));
    }
    Ok((spec.project(path, &a)?, da))
}

/// `Ψ_{t+1}` as seen from stage `t`: either the terminal objective or a
/// trained value network.
pub trait StageValue: Sync {
    /// Value at `(ω^{s}, a^{s})` and its gradient in the last action.
    fn value_grad(&self, path: &[Point], actions: &[Point]) -> Result<(f64, Vec<f64>)>;
    fn value(&self, path: &[Point], actions: &[Point]) -> Result<f64> {
        Ok(self.value_grad(path, actions)?.0)
    }
}

pub struct TerminalValue<'a>(pub &'a Objective);

impl StageValue for TerminalValue<'_> {
    fn value_grad(&self, path: &[Point], actions: &[Point]) -> Result<(f64, Vec<f64>)> {
        let v = self.0.eval(path, actions);
        let mut g = self.0.action_gradient(path, actions);
        Ok((v, g.pop().unwrap_or_default()))
    }

    fn value(&self, path: &[Point], actions: &[Point]) -> Result<f64> {
        Ok(self.0.eval(path, actions))
    }
}

pub struct NetworkValue<'a> {
    pub net: &'a Mlp,
    pub features: &'a dyn Featurizer,
}

impl StageValue for NetworkValue<'_> {
    fn value_grad(&self, path: &[Point], actions: &[Point]) -> Result<(f64, Vec<f64>)> {
        let t = path.len();
        let x = self.features.features(t, path, actions);
        let tr = self.net.forward_trace(&x)?;
        let v = tr.output()[0];
        let dx = self.net.input_gradient(&tr, &[1.0]);
        let m = actions.last().map_or(0, Vec::len);
        let jac = self.features.last_action_jacobian(t, path, actions);
        let mut g = vec![0.0; m];
        for (r, dr) in dx.iter().enumerate() {
            if *dr != 0.0 {
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj += dr * jac[r * m + j];
                }
            }
        }
        Ok((v, g))
    }

    fn value(&self, path: &[Point], actions: &[Point]) -> Result<f64> {
        let x = self.features.features(path.len(), path, actions);
        Ok(self.net.forward(&x)?[0])
    }
}

/// Next-state sample: `(weight, point)`.
pub type Weighted = Vec<(f64, Point)>;

/// One `(ω^t, a^t)` draw with weighted next-state samples from each of the
/// sampled measures in `𝒫_t(ω^t)`.
#[derive(Debug, Clone)]
pub struct MinimaxSample {
    pub path: Vec<Point>,
    pub past: Vec<Point>,
    pub measures: Vec<Weighted>,
}

/// One `(ω^t, a^t)` draw with next-state samples from the reference measure
/// and the radius of the ball at `ω^t`.
#[derive(Debug, Clone)]
pub struct DualSample {
    pub path: Vec<Point>,
    pub past: Vec<Point>,
    pub eps: f64,
    pub reference: Weighted,
}

fn extend(base: &[Point], x: &[f64]) -> Vec<Point> {
    let mut v = Vec::with_capacity(base.len() + 1);
    v.extend_from_slice(base);
    v.push(x.to_vec());
    v
}

struct Acted {
    action: Point,
    trace: super::mlp::Trace,
    dsquash: Vec<f64>,
}

fn act(
    net: &Mlp,
    spec: &ActionSpec,
    features: &dyn Featurizer,
    path: &[Point],
    past: &[Point],
) -> Result<Acted> {
    let x = features.features(path.len(), path, past);
    let trace = net.forward_trace(&x)?;
    let (action, dsquash) = squash_action(spec, path, trace.output())?;
    Ok(Acted {
        action,
        trace,
        dsquash,
    })
}

fn sum_in_order(n_params: usize, parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let b = parts.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut total = 0.0;
    for (v, g) in parts {
        total += v;
        for (a, x) in grad.iter_mut().zip(g) {
            *a += x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= b);
    (total / b, grad)
}

/// Batch mean of `min_k Σ_i w_ki Ψ_{t+1}((ω^t, x_ki), (a^t, a_t))` with
/// `a_t` produced by `net`, and its gradient in the network parameters.
/// Ties in the minimum go to the lowest `k`.
pub fn minimax_objective(
    net: &Mlp,
    spec: &ActionSpec,
    features: &dyn Featurizer,
    next: &dyn StageValue,
    batch: &[MinimaxSample],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let parts: Result<Vec<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|s| {
            let ac = act(net, spec, features, &s.path, &s.past)?;
            let acts = extend(&s.past, &ac.action);
            let mut best = (f64::INFINITY, 0);
            for (k, m) in s.measures.iter().enumerate() {
                let mut v = 0.0;
                for (w, x) in m {
                    v += w * next.value(&extend(&s.path, x), &acts)?;
                }
                if v < best.0 {
                    best = (v, k);
                }
            }
            let mut ga = vec![0.0; ac.action.len()];
            for (w, x) in &s.measures[best.1] {
                let (_, g) = next.value_grad(&extend(&s.path, x), &acts)?;
                for (a, b) in ga.iter_mut().zip(g) {
                    *a += w * b;
                }
            }
            let dz: Vec<f64> = ga.iter().zip(&ac.dsquash).map(|(g, d)| g * d).collect();
            let mut grad = vec![0.0; net.n_params()];
            net.backward(&ac.trace, &dz, &mut grad);
            Ok((best.0, grad))
        })
        .collect();
    Ok(sum_in_order(net.n_params(), parts?))
}

/// Transport cost `‖x − z‖^q` used in the dual objective.
fn cost(x: &[f64], z: &[f64], q: f64) -> f64 {
    let d = dist(x, z);
    if q == 1.0 {
        d
    } else {
        d.powf(q)
    }
}

/// `Σ_i w_i min_j {ψ(z_j) + λ‖x_i − z_j‖^q} − λ ε^q` for a reference
/// measure `Σ_i w_i δ_{x_i}`. Ties in the minimum go to the lowest `j`.
pub fn dual_inner_value(
    psi: &dyn Fn(&[f64]) -> f64,
    reference: &DiscreteMeasure,
    eps: f64,
    q: f64,
    lambda: f64,
    z_grid: &[Point],
) -> Result<f64> {
    if z_grid.is_empty() {
        return Err(Error::InvalidInput("empty z-grid".into()));
    }
    if !(lambda > 0.0) || !(eps >= 0.0) || !(q >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "dual needs λ > 0, ε >= 0, q >= 1 (got {lambda}, {eps}, {q})"
        )));
    }
    let vals: Vec<f64> = z_grid.iter().map(|z| psi(z)).collect();
    let mut total = 0.0;
    for (x, w) in reference.atoms() {
        let m = vals
            .iter()
            .zip(z_grid)
            .map(|(v, z)| v + lambda * cost(x, z, q))
            .fold(f64::INFINITY, f64::min);
        total += w * m;
    }
    Ok(total - lambda * eps.powf(q))
}

/// Batch mean of the dual objective of the Wasserstein ball at the action
/// produced by `net` and `λ = exp(raw_lambda)`. Returns the value, the
/// network gradient and the derivative in `raw_lambda`.
#[allow(clippy::too_many_arguments)]
pub fn dual_objective(
    net: &Mlp,
    raw_lambda: f64,
    spec: &ActionSpec,
    features: &dyn Featurizer,
    next: &dyn StageValue,
    q: f64,
    z_grid: &[Point],
    batch: &[DualSample],
) -> Result<(f64, Vec<f64>, f64)> {
    if batch.is_empty() || z_grid.is_empty() {
        return Err(Error::InvalidInput("empty batch or z-grid".into()));
    }
    let lambda = raw_lambda.exp();
    let n = net.n_params();
    let parts: Result<Vec<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|s| {
            let ac = act(net, spec, features, &s.path, &s.past)?;
            let acts = extend(&s.past, &ac.action);
            let psi: Vec<f64> = z_grid
                .iter()
                .map(|z| next.value(&extend(&s.path, z), &acts))
                .collect::<Result<_>>()?;
            let mut mass = vec![0.0; z_grid.len()];
            let mut value = 0.0;
            let mut dlam = 0.0;
            for (w, x) in &s.reference {
                let mut best = (f64::INFINITY, 0, 0.0);
                for (j, z) in z_grid.iter().enumerate() {
                    let c = cost(x, z, q);
                    let v = psi[j] + lambda * c;
                    if v < best.0 {
                        best = (v, j, c);
                    }
                }
                value += w * best.0;
                dlam += w * best.2;
                mass[best.1] += w;
            }
            let epq = s.eps.powf(q);
            value -= lambda * epq;
            dlam -= epq;
            let mut ga = vec![0.0; ac.action.len()];
            for (j, m) in mass.iter().enumerate() {
                if *m > 0.0 {
                    let (_, g) = next.value_grad(&extend(&s.path, &z_grid[j]), &acts)?;
                    for (a, b) in ga.iter_mut().zip(g) {
                        *a += m * b;
                    }
                }
            }
            let dz: Vec<f64> = ga.iter().zip(&ac.dsquash).map(|(g, d)| g * d).collect();
            let mut grad = vec![0.0; n + 1];
            net.backward(&ac.trace, &dz, &mut grad[..n]);
            grad[n] = dlam * lambda;
            Ok((value, grad))
        })
        .collect();
    let (v, mut g) = sum_in_order(n + 1, parts?);
    let graw = g.pop().expect("λ slot");
    Ok((v, g, graw))
}

/// Mean squared error of `net` against targets at `(ω^t, a^t, y)`.
pub fn regression_loss(
    net: &Mlp,
    features: &dyn Featurizer,
    samples: &[(Vec<Point>, Vec<Point>, f64)],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let parts: Result<Vec<(f64, Vec<f64>)>> = samples
        .par_iter()
        .map(|(path, acts, y)| {
            let x = features.features(path.len(), path, acts);
            let tr = net.forward_trace(&x)?;
            let r = tr.output()[0] - y;
            let mut grad = vec![0.0; net.n_params()];
            net.backward(&tr, &[2.0 * r], &mut grad);
            Ok((r * r, grad))
        })
        .collect();
    Ok(sum_in_order(net.n_params(), parts?))
}

/// Pluggable generator of training states `(ω^t, a^t)`.
pub trait StateSampler: Send + Sync {
    fn sample(
        &self,
        problem: &ControlProblem,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Point>, Vec<Point>)>;
}

/// How training states `(ω^t, a^t)` are drawn.
#[derive(Clone)]
pub enum Sampling {
    /// Paths uniform on the bounded `Ω_loc^t`, past actions uniform on the
    /// action sets.
    Uniform,
    /// Uniform paths, past actions uniform on the action grids.
    ActionGrid,
    /// Paths simulated from the reference kernels under uniform actions.
    Reference,
    Custom(Arc<dyn StateSampler>),
}

impl std::fmt::Debug for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sampling::Uniform => f.write_str("Uniform"),
            Sampling::ActionGrid => f.write_str("ActionGrid"),
            Sampling::Reference => f.write_str("Reference"),
            Sampling::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Support points `z_1..z_N` of the dual objective.
#[derive(Debug, Clone, PartialEq)]
pub enum ZGrid {
    /// `N` points uniform on `Ω_loc`, redrawn every iteration.
    Uniform(usize),
    Fixed(Vec<Point>),
}

#[derive(Clone)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    /// `N_𝒫`: measures drawn from each ambiguity set.
    pub n_measures: usize,
    /// `N_MC`: next-state samples per measure.
    pub n_mc: usize,
    pub iter_a: usize,
    pub iter_psi: usize,
    pub z_grid: ZGrid,
    pub seed: u64,
    pub sampling: Sampling,
    /// Use the atoms of finitely supported measures with at most `n_mc`
    /// atoms instead of sampling from them.
    pub exact_discrete: bool,
    pub lambda_init: f64,
    /// Next-state samples for the final stage-0 value estimate.
    pub eval_samples: usize,
    /// Network inputs; `None` uses [`RawFeatures::for_problem`].
    pub features: Option<Arc<dyn Featurizer>>,
}

impl std::fmt::Debug for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainConfig")
            .field("hidden", &self.hidden)
            .field("lr", &self.lr)
            .field("batch", &self.batch)
            .field("n_measures", &self.n_measures)
            .field("n_mc", &self.n_mc)
            .field("iter_a", &self.iter_a)
            .field("iter_psi", &self.iter_psi)
            .field("z_grid", &self.z_grid)
            .field("seed", &self.seed)
            .field("sampling", &self.sampling)
            .field("exact_discrete", &self.exact_discrete)
            .field("lambda_init", &self.lambda_init)
            .field("eval_samples", &self.eval_samples)
            .field("features", &self.features.as_ref().map(|_| ".."))
            .finish()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32; 5],
            lr: 1e-3,
            batch: 128,
            n_measures: 4,
            n_mc: 128,
            iter_a: 500,
            iter_psi: 2000,
            z_grid: ZGrid::Uniform(64),
            seed: 0,
            sampling: Sampling::Uniform,
            exact_discrete: false,
            lambda_init: 1.0,
            eval_samples: 4096,
            features: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch", self.batch),
            ("n_measures", self.n_measures),
            ("n_mc", self.n_mc),
            ("iter_a", self.iter_a),
            ("iter_psi", self.iter_psi),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidInput(
                "hidden layers must be non-empty".into(),
            ));
        }
        match &self.z_grid {
            ZGrid::Uniform(0) => {
                return Err(Error::InvalidInput("z-grid must be non-empty".into()))
            }
            ZGrid::Fixed(v) if v.is_empty() => {
                return Err(Error::InvalidInput("z-grid must be non-empty".into()))
            }
            _ => {}
        }
        if !(self.lr > 0.0) || !(self.lambda_init > 0.0) {
            return Err(Error::InvalidInput(
                "learning rate and initial λ must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub stage: usize,
    /// `action` or `value`.
    pub phase: String,
    pub iteration: usize,
    /// Batch objective (action phase) or mean squared error (value phase).
    pub objective: f64,
    pub lambda: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
}

/// Feedback policy `a_t(ω^t) = NN_{a,t}(ω^t, a^{<t})` composed from the
/// stage action networks.
#[derive(Clone)]
pub struct NeuralPolicy {
    pub nets: Vec<Mlp>,
    pub specs: Vec<ActionSpec>,
    pub features: Arc<dyn Featurizer>,
}

impl Policy for NeuralPolicy {
    fn act(&self, t: usize, path: &[Point], past: &[Point]) -> Result<Point> {
        let net = self
            .nets
            .get(t)
            .ok_or_else(|| Error::InvalidInput(format!("no action network for stage {t}")))?;
        let x = self.features.features(t, path, past);
        Ok(squash_action(&self.specs[t], path, &net.forward(&x)?)?.0)
    }
}

/// Output of [`train_algorithm1`] / [`train_algorithm2`].
#[derive(Clone)]
pub struct TrainedModel {
    pub action_nets: Vec<Mlp>,
    pub value_nets: Vec<Mlp>,
    /// Dual multiplier per stage (dual training only).
    pub lambdas: Vec<Option<f64>>,
    pub log: Vec<LogRow>,
    /// `NN_{Ψ,0}` at the empty path.
    pub value_network: f64,
    /// Stage-0 objective re-estimated with `eval_samples` next states at
    /// the trained first action.
    pub value_estimate: f64,
    pub specs: Vec<ActionSpec>,
    pub features: Arc<dyn Featurizer>,
}

impl TrainedModel {
    pub fn policy(&self) -> NeuralPolicy {
        NeuralPolicy {
            nets: self.action_nets.clone(),
            specs: self.specs.clone(),
            features: self.features.clone(),
        }
    }

    /// Every network in stage order, each preceded by a `# action t` or
    /// `# value t` line; multipliers as `# lambda t v`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for t in 0..self.action_nets.len() {
            writeln!(s, "# action {t}").unwrap();
            s.push_str(&self.action_nets[t].dump());
            writeln!(s, "# value {t}").unwrap();
            s.push_str(&self.value_nets[t].dump());
            if let Some(l) = self.lambdas[t] {
                writeln!(s, "# lambda {t} {l:?}").unwrap();
            }
        }
        s
    }
}

/// Networks read back from [`TrainedModel::dump`].
#[derive(Debug, Clone)]
pub struct ModelDump {
    pub action_nets: Vec<Mlp>,
    pub value_nets: Vec<Mlp>,
    pub lambdas: Vec<Option<f64>>,
}

impl ModelDump {
    pub fn parse(text: &str) -> Result<Self> {
        enum Slot {
            Action,
            Value,
        }
        let mut blocks: Vec<(Slot, usize, usize, String)> = Vec::new();
        let mut lambdas: Vec<(usize, f64)> = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Parse {
                line: k + 1,
                message: m.to_string(),
            };
            if let Some(rest) = line.strip_prefix("# ") {
                let mut it = rest.split_whitespace();
                let tag = it.next().unwrap_or_default();
                let t: usize = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("missing stage index"))?;
                match tag {
                    "action" => blocks.push((Slot::Action, t, k + 2, String::new())),
                    "value" => blocks.push((Slot::Value, t, k + 2, String::new())),
                    "lambda" => {
                        let l = it
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad("missing multiplier"))?;
                        lambdas.push((t, l));
                    }
                    _ => return Err(bad("unknown header")),
                }
            } else if let Some(b) = blocks.last_mut() {
                b.3.push_str(line);
                b.3.push('\n');
            } else if !line.trim().is_empty() {
                return Err(bad("network data before the first header"));
            }
        }
        let mut action_nets = Vec::new();
        let mut value_nets = Vec::new();
        for (slot, t, first, body) in blocks {
            let nets = match slot {
                Slot::Action => &mut action_nets,
                Slot::Value => &mut value_nets,
            };
            if t != nets.len() {
                return Err(Error::Parse {
                    line: first - 1,
                    message: format!("stage {t} out of order"),
                });
            }
            let net = Mlp::parse(&body).map_err(|e| match e {
                Error::Parse { line, message } => Error::Parse {
                    line: line + first - 1,
                    message,
                },
                other => other,
            })?;
            nets.push(net);
        }
        if action_nets.is_empty() || action_nets.len() != value_nets.len() {
            return Err(Error::Parse {
                line: 1,
                message: "expected one action and one value network per stage".into(),
            });
        }
        let mut ls = vec![None; action_nets.len()];
        for (t, l) in lambdas {
            *ls.get_mut(t).ok_or(Error::Parse {
                line: 1,
                message: format!("multiplier for unknown stage {t}"),
            })? = Some(l);
        }
        Ok(Self {
            action_nets,
            value_nets,
            lambdas: ls,
        })
    }

    pub fn policy(&self, specs: Vec<ActionSpec>, features: Arc<dyn Featurizer>) -> NeuralPolicy {
        NeuralPolicy {
            nets: self.action_nets.clone(),
            specs,
            features,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for the task labelled `tag` under `seed`.
pub fn substream(seed: u64, tag: [u64; 4]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for x in tag {
        h = splitmix(h ^ x);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn uniform_state(space: &LocalSpace, rng: &mut ChaCha8Rng) -> Result<Point> {
    let c = space
        .bound
        .ok_or_else(|| Error::Unsupported("uniform sampling needs a bounded state space".into()))?;
    Ok((0..space.dim).map(|_| rng.gen_range(-c..=c)).collect())
}

fn random_action(
    spec: &ActionSpec,
    path: &[Point],
    on_grid: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Point> {
    if let ActionSpec::ConstantFinite(list) = spec {
        return Ok(list[rng.gen_range(0..list.len())].clone());
    }
    if on_grid {
        let g = grid(spec, path)?;
        return Ok(g[rng.gen_range(0..g.len())].clone());
    }
    let (lo, hi) = spec.bounding_box(path)?;
    let a: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| if h > l { rng.gen_range(*l..=*h) } else { *l })
        .collect();
    spec.project(path, &a)
}

/// Reference laws that do not depend on the path, evaluated once. Large
/// empirical references would otherwise be rebuilt for every sample.
struct Centers(Vec<Option<Law>>);

impl Centers {
    fn new(problem: &ControlProblem) -> Result<Self> {
        let fixed = |r: &ReferenceKernel| {
            matches!(
                r,
                ReferenceKernel::Constant(_) | ReferenceKernel::Empirical0 { .. }
            )
        };
        problem
            .kernels
            .iter()
            .map(|k| match k {
                AmbiguityKernel::Singleton(r)
                | AmbiguityKernel::WassersteinBall { reference: r, .. }
                    if fixed(r) =>
                {
                    evaluate_reference(k, &[]).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()
            .map(Centers)
    }

    fn get(&self, problem: &ControlProblem, t: usize, path: &[Point]) -> Result<Cow<'_, Law>> {
        match &self.0[t] {
            Some(l) => Ok(Cow::Borrowed(l)),
            None => evaluate_reference(&problem.kernels[t], path).map(Cow::Owned),
        }
    }
}

fn sample_state(
    problem: &ControlProblem,
    centers: &Centers,
    sampling: &Sampling,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Point>, Vec<Point>)> {
    let mut path: Vec<Point> = Vec::with_capacity(t);
    let mut acts: Vec<Point> = Vec::with_capacity(t);
    match sampling {
        Sampling::Custom(s) => return s.sample(problem, t, rng),
        Sampling::Uniform | Sampling::ActionGrid => {
            let on_grid = matches!(sampling, Sampling::ActionGrid);
            for s in 0..t {
                acts.push(random_action(&problem.actions[s], &path, on_grid, rng)?);
                path.push(uniform_state(&problem.space, rng)?);
            }
        }
        Sampling::Reference => {
            for s in 0..t {
                acts.push(random_action(&problem.actions[s], &path, false, rng)?);
                let law = centers.get(problem, s, &path)?;
                path.push(law.sample(rng));
            }
        }
    }
    Ok((path, acts))
}

fn next_states(law: &Law, n: usize, exact: bool, rng: &mut ChaCha8Rng) -> Weighted {
    if exact {
        if let Law::Discrete(m) = law {
            if m.len() <= n {
                return m.atoms().map(|(x, w)| (w, x.clone())).collect();
            }
        }
    }
    let w = 1.0 / n as f64;
    (0..n).map(|_| (w, law.sample(rng))).collect()
}

const PHASE_ACTION: u64 = 1;
const PHASE_VALUE: u64 = 2;
const PHASE_EVAL: u64 = 3;
const PHASE_Z: u64 = 4;

fn minimax_batch(
    problem: &ControlProblem,
    centers: &Centers,
    cfg: &TrainConfig,
    t: usize,
    phase: u64,
    it: usize,
    size: usize,
    n_mc: usize,
) -> Result<Vec<MinimaxSample>> {
    (0..size)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(cfg.seed, [t as u64, phase, it as u64, b as u64]);
            let (path, past) = if t == 0 {
                (Vec::new(), Vec::new())
            } else {
                sample_state(problem, centers, &cfg.sampling, t, &mut rng)?
            };
            let measures = if let AmbiguityKernel::Singleton(_) = &problem.kernels[t] {
                let law = centers.get(problem, t, &path)?;
                (0..cfg.n_measures)
                    .map(|_| next_states(&law, n_mc, cfg.exact_discrete, &mut rng))
                    .collect()
            } else {
                sample_measures(&problem.kernels[t], &path, cfg.n_measures, &mut rng)?
                    .iter()
                    .map(|l| next_states(l, n_mc, cfg.exact_discrete, &mut rng))
                    .collect()
            };
            Ok(MinimaxSample {
                path,
                past,
                measures,
            })
        })
        .collect()
}

fn dual_batch(
    problem: &ControlProblem,
    centers: &Centers,
    cfg: &TrainConfig,
    t: usize,
    phase: u64,
    it: usize,
    size: usize,
    n_mc: usize,
) -> Result<Vec<DualSample>> {
    (0..size)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(cfg.seed, [t as u64, phase, it as u64, b as u64]);
            let (path, past) = if t == 0 {
                (Vec::new(), Vec::new())
            } else {
                sample_state(problem, centers, &cfg.sampling, t, &mut rng)?
            };
            let kernel = &problem.kernels[t];
            let eps = kernel.radius(&path)?;
            let law = centers.get(problem, t, &path)?;
            let reference = next_states(&law, n_mc, cfg.exact_discrete, &mut rng);
            Ok(DualSample {
                path,
                past,
                eps,
                reference,
            })
        })
        .collect()
}

fn z_points(
    space: &LocalSpace,
    z: &ZGrid,
    seed: u64,
    t: usize,
    phase: u64,
    it: usize,
) -> Result<Vec<Point>> {
    match z {
        ZGrid::Fixed(v) => Ok(v.clone()),
        ZGrid::Uniform(n) => {
            let mut rng = substream(seed, [t as u64, PHASE_Z, phase, it as u64]);
            (0..*n).map(|_| uniform_state(space, &mut rng)).collect()
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Algo {
    Minimax,
    Dual,
}

fn ball_order(kernel: &AmbiguityKernel) -> Option<f64> {
    match kernel {
        AmbiguityKernel::WassersteinBall { q, .. } => Some(*q),
        _ => None,
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(input);
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

fn diverged(stage: usize, what: &str) -> Error {
    Error::Numerical(format!("training diverged at stage {stage} ({what})"))
}

fn train(problem: &ControlProblem, cfg: &TrainConfig, algo: Algo) -> Result<TrainedModel> {
    cfg.validate()?;
    problem.validate()?;
    if algo == Algo::Dual {
        if let Some(t) = problem.kernels.iter().position(|k| ball_order(k).is_none()) {
            return Err(Error::InvalidInput(format!(
                "the dual trainer needs Wasserstein balls, stage {t} is not one"
            )));
        }
    }
    let features: Arc<dyn Featurizer> = match &cfg.features {
        Some(f) => f.clone(),
        None => Arc::new(RawFeatures::for_problem(problem)?),
    };
    let centers = Centers::new(problem)?;
    let centers = &centers;
    let horizon = problem.horizon;
    let mut value_nets: Vec<Option<Mlp>> = vec![None; horizon];
    let mut action_nets: Vec<Option<Mlp>> = vec![None; horizon];
    let mut lambdas = vec![None; horizon];
    let mut log = Vec::new();
    let terminal = TerminalValue(&problem.objective);

    for t in (0..horizon).rev() {
        let next_net = if t + 1 < horizon {
            value_nets[t + 1].clone()
        } else {
            None
        };
        let network_value = next_net.as_ref().map(|net| NetworkValue {
            net,
            features: features.as_ref(),
        });
        let next: &dyn StageValue = match &network_value {
            Some(v) => v,
            None => &terminal,
        };
        let spec = &problem.actions[t];
        let fdim = features.dim(t);
        let mut init = substream(cfg.seed, [t as u64, 0, 0, 0]);
        let mut a_net = Mlp::new(&layer_sizes(fdim, &cfg.hidden, spec.dim()), &mut init)?;
        let mut psi_net = Mlp::new(&layer_sizes(fdim, &cfg.hidden, 1), &mut init)?;
        let q = ball_order(&problem.kernels[t]).unwrap_or(1.0);
        let mut raw = cfg.lambda_init.ln();

        let extra = usize::from(algo == Algo::Dual);
        let mut adam = AdamState::new(a_net.n_params() + extra, cfg.lr);
        for it in 0..cfg.iter_a {
            let (obj, mut grad) = match algo {
                Algo::Minimax => {
                    let batch = minimax_batch(
                        problem,
                        centers,
                        cfg,
                        t,
                        PHASE_ACTION,
                        it,
                        cfg.batch,
                        cfg.n_mc,
                    )?;
                    minimax_objective(&a_net, spec, features.as_ref(), next, &batch)?
                }
                Algo::Dual => {
                    let zs = z_points(&problem.space, &cfg.z_grid, cfg.seed, t, PHASE_ACTION, it)?;
                    let batch = dual_batch(
                        problem,
                        centers,
                        cfg,
                        t,
                        PHASE_ACTION,
                        it,
                        cfg.batch,
                        cfg.n_mc,
                    )?;
                    let (v, mut g, graw) =
                        dual_objective(&a_net, raw, spec, features.as_ref(), next, q, &zs, &batch)?;
                    g.push(graw);
                    (v, g)
                }
            };
            if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(t, "action network"));
            }
            grad.iter_mut().for_each(|g| *g = -*g);
            let mut params = a_net.params().to_vec();
            if algo == Algo::Dual {
                params.push(raw);
            }
            adam.step(&mut params, &grad)?;
            if algo == Algo::Dual {
                raw = params.pop().expect("λ slot");
            }
            a_net.params_mut().copy_from_slice(&params);
            log.push(LogRow {
                stage: t,
                phase: "action".into(),
                iteration: it,
                objective: obj,
                lambda: (algo == Algo::Dual).then(|| raw.exp()),
            });
        }

        let lambda = raw.exp();
        let mut adam = AdamState::new(psi_net.n_params(), cfg.lr);
        for it in 0..cfg.iter_psi {
            let samples = stage_targets(
                problem,
                centers,
                cfg,
                algo,
                t,
                PHASE_VALUE,
                it,
                cfg.batch,
                cfg.n_mc,
                &a_net,
                next,
                features.as_ref(),
                q,
                lambda,
            )?;
            let (loss, grad) = regression_loss(&psi_net, features.as_ref(), &samples)?;
            if !loss.is_finite() {
                return Err(diverged(t, "value network"));
            }
            let mut params = psi_net.params().to_vec();
            adam.step(&mut params, &grad)?;
            psi_net.params_mut().copy_from_slice(&params);
            log.push(LogRow {
                stage: t,
                phase: "value".into(),
                iteration: it,
                objective: loss,
                lambda: (algo == Algo::Dual).then_some(lambda),
            });
        }
        if algo == Algo::Dual {
            lambdas[t] = Some(lambda);
        }
        if t == 0 {
            let est = stage_targets(
                problem,
                centers,
                cfg,
                algo,
                0,
                PHASE_EVAL,
                0,
                1,
                cfg.eval_samples,
                &a_net,
                next,
                features.as_ref(),
                q,
                lambda,
            )?;
            let value_network = psi_net.forward(&features.features(0, &[], &[]))?[0];
            action_nets[0] = Some(a_net);
            value_nets[0] = Some(psi_net);
            return Ok(TrainedModel {
                action_nets: action_nets
                    .into_iter()
                    .map(|n| n.expect("trained"))
                    .collect(),
                value_nets: value_nets
                    .into_iter()
                    .map(|n| n.expect("trained"))
                    .collect(),
                lambdas,
                log,
                value_network,
                value_estimate: est[0].2,
                specs: problem.actions.clone(),
                features,
            });
        }
        action_nets[t] = Some(a_net);
        value_nets[t] = Some(psi_net);
    }
    Err(Error::InvalidInput("horizon must be at least 1".into()))
}

/// Regression targets at freshly sampled states: the minimax objective or
/// the dual objective at the current action network.
#[allow(clippy::too_many_arguments)]
fn stage_targets(
    problem: &ControlProblem,
    centers: &Centers,
    cfg: &TrainConfig,
    algo: Algo,
    t: usize,
    phase: u64,
    it: usize,
    size: usize,
    n_mc: usize,
    a_net: &Mlp,
    next: &dyn StageValue,
    features: &dyn Featurizer,
    q: f64,
    lambda: f64,
) -> Result<Vec<(Vec<Point>, Vec<Point>, f64)>> {
    let spec = &problem.actions[t];
    match algo {
        Algo::Minimax => {
            let batch = minimax_batch(problem, centers, cfg, t, phase, it, size, n_mc)?;
            batch
                .into_par_iter()
                .map(|s| {
                    let x = features.features(t, &s.path, &s.past);
                    let (a, _) = squash_action(spec, &s.path, &a_net.forward(&x)?)?;
                    let acts = extend(&s.past, &a);
                    let mut best = f64::INFINITY;
                    for m in &s.measures {
                        let mut v = 0.0;
                        for (w, y) in m {
                            v += w * next.value(&extend(&s.path, y), &acts)?;
                        }
                        best = best.min(v);
                    }
                    Ok((s.path, s.past, best))
                })
                .collect()
        }
        Algo::Dual => {
            let zs = z_points(&problem.space, &cfg.z_grid, cfg.seed, t, phase, it)?;
            let batch = dual_batch(problem, centers, cfg, t, phase, it, size, n_mc)?;
            batch
                .into_par_iter()
                .map(|s| {
                    let x = features.features(t, &s.path, &s.past);
                    let (a, _) = squash_action(spec, &s.path, &a_net.forward(&x)?)?;
                    let acts = extend(&s.past, &a);
                    let psi: Vec<f64> = zs
                        .iter()
                        .map(|z| next.value(&extend(&s.path, z), &acts))
                        .collect::<Result<_>>()?;
                    let mut v = 0.0;
                    for (w, y) in &s.reference {
                        let m = psi
                            .iter()
                            .zip(&zs)
                            .map(|(p, z)| p + lambda * cost(y, z, q))
                            .fold(f64::INFINITY, f64::min);
                        v += w * m;
                    }
                    Ok((s.path, s.past, v - lambda * s.eps.powf(q)))
                })
                .collect()
        }
    }
}

/// Sampled-measure minimax training: for `t = T−1..0` the action network
/// ascends `min_k (1/N_MC) Σ_i NN_{Ψ,t+1}` over `N_𝒫` measures drawn from
/// `𝒫_t(ω^t)`, then `NN_{Ψ,t}` is regressed on that objective.
pub fn train_algorithm1(problem: &ControlProblem, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(problem, cfg, Algo::Minimax)
}

/// Wasserstein-dual training: as [`train_algorithm1`] but the action
/// network and `λ = exp(raw)` ascend the dual objective
/// `(1/N_MC) Σ_i min_j {NN_{Ψ,t+1}(·, z_j) + λ‖ω^{(i)} − z_j‖^q} − λ ε_t^q`.
/// Every stage kernel must be a Wasserstein ball.
pub fn train_algorithm2(problem: &ControlProblem, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(problem, cfg, Algo::Dual)
}
