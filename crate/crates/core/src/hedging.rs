//! Hedging under the asymmetric prospect loss: self-financing wealth from
//! return paths, option payoffs, a Black–Scholes delta baseline, return
//! series I/O, synthetic data and the rolling backtest.

use crate::ambiguity::{quantile, AmbiguityKernel, RadiusSchedule, ReferenceKernel};
use crate::controls::ActionSpec;
use crate::dp::{ControlProblem, Objective, Policy};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::measures::LocalSpace;
use crate::neural::{Featurizer, StateSampler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as SNormal};
use std::path::Path;
use std::sync::Arc;

pub const TRADING_DAYS: usize = 252;

/// Parameters of `U(x) = x^a` for gains and `b (-x)^a` for losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub a: f64,
    pub b: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { a: 0.88, b: 2.25 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) || !(self.b > 1.0) {
            return Err(Error::InvalidInput(format!(
                "loss parameters need 0 < a < 1 and b > 1, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

pub fn prospect_loss(x: f64, p: &LossParams) -> f64 {
    if x >= 0.0 {
        x.powf(p.a)
    } else {
        p.b * (-x).powf(p.a)
    }
}

/// Derivative of [`prospect_loss`]; 0 at the kink.
fn prospect_loss_derivative(x: f64, p: &LossParams) -> f64 {
    if x > 0.0 {
        p.a * x.powf(p.a - 1.0)
    } else if x < 0.0 {
        -p.b * p.a * (-x).powf(p.a - 1.0)
    } else {
        0.0
    }
}

type PayoffFn = Arc<dyn Fn(&[Point]) -> f64 + Send + Sync>;

/// Derivative payoff as a function of the price path `S_0..S_T`.
#[derive(Clone)]
pub enum Payoff {
    /// `(S_T - K)^+` on the first asset.
    Call { strike: f64 },
    /// `(Σ_i w_i S_T^i - K)^+`.
    Basket { weights: Vec<f64>, strike: f64 },
    /// Arbitrary payoff with a declared Hölder exponent in `(0, 1]`.
    Custom { f: PayoffFn, holder: f64 },
}

impl std::fmt::Debug for Payoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Payoff::Call { strike } => write!(f, "Call {{ strike: {strike} }}"),
            Payoff::Basket { weights, strike } => {
                write!(f, "Basket {{ weights: {weights:?}, strike: {strike} }}")
            }
            Payoff::Custom { holder, .. } => write!(f, "Custom {{ holder: {holder} }}"),
        }
    }
}

impl Payoff {
    /// Equally weighted basket over `d` assets.
    pub fn basket(d: usize, strike: f64) -> Self {
        Payoff::Basket {
            weights: vec![1.0 / d as f64; d],
            strike,
        }
    }

    pub fn eval(&self, prices: &[Point]) -> f64 {
        let last = prices.last().expect("price path includes S_0");
        match self {
            Payoff::Call { strike } => (last[0] - strike).max(0.0),
            Payoff::Basket { weights, strike } => {
                let s: f64 = weights.iter().zip(last).map(|(w, x)| w * x).sum();
                (s - strike).max(0.0)
            }
            Payoff::Custom { f, .. } => f(prices),
        }
    }

    pub fn holder_exponent(&self) -> f64 {
        match self {
            Payoff::Custom { holder, .. } => *holder,
            _ => 1.0,
        }
    }
}

/// A hedging problem on returns in `[-C, C]^d`.
///
/// Actions: `a_0 = (d_0, Δ_0)` with `|d_0| <= B̄` and `a_t = Δ_t` for
/// `t >= 1`, every position in `[-Ā, Ā]^d`.
#[derive(Debug, Clone)]
pub struct HedgingProblem {
    pub d: usize,
    pub s0: Vec<f64>,
    pub horizon: usize,
    pub bound_c: f64,
    pub a_bar: f64,
    pub b_bar: f64,
    pub payoff: Payoff,
    pub loss: LossParams,
}

impl HedgingProblem {
    /// At-the-money call on one asset normalised to `S_0 = 1`.
    pub fn atm_call(horizon: usize, bound_c: f64) -> Self {
        Self {
            d: 1,
            s0: vec![1.0],
            horizon,
            bound_c,
            a_bar: 2.0,
            b_bar: 0.5,
            payoff: Payoff::Call { strike: 1.0 },
            loss: LossParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.horizon == 0 || self.d == 0 || self.s0.len() != self.d {
            return Err(Error::InvalidInput(
                "hedging problem needs T >= 1 and S_0 in R^d".into(),
            ));
        }
        if !(self.bound_c > 0.0 && self.a_bar > 0.0 && self.b_bar > 0.0) {
            return Err(Error::InvalidInput("C, Ā and B̄ must be positive".into()));
        }
        if self.bound_c >= 1.0 {
            return Err(Error::InvalidInput("return bound C must be below 1".into()));
        }
        let h = self.payoff.holder_exponent();
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "payoff Hölder exponent {h} not in (0,1]"
            )));
        }
        if let Payoff::Basket { weights, .. } = &self.payoff {
            if weights.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    found: weights.len(),
                });
            }
        }
        Ok(())
    }

    /// `S_0, ..., S_t` from the returns `ω_1..ω_t`.
    pub fn prices(&self, path: &[Point]) -> Vec<Point> {
        let mut out = Vec::with_capacity(path.len() + 1);
        out.push(self.s0.clone());
        for r in path {
            let prev = out.last().expect("S_0 present");
            out.push(prev.iter().zip(r).map(|(s, x)| s * (1.0 + x)).collect());
        }
        out
    }

    /// `d_0 + Σ_j Σ_i Δ_j^i (S_{j+1}^i - S_j^i)` over the available stages.
    pub fn wealth(&self, path: &[Point], actions: &[Point]) -> f64 {
        let s = self.prices(path);
        let mut w = actions.first().map_or(0.0, |a| a[0]);
        for j in 0..path.len().min(actions.len()) {
            let delta = position(actions, j);
            for i in 0..self.d {
                w += delta[i] * (s[j + 1][i] - s[j][i]);
            }
        }
        w
    }

    /// The same wealth accumulated from returns, `Δ_j^i S_j^i ω_{j+1}^i`.
    pub fn wealth_from_returns(&self, path: &[Point], actions: &[Point]) -> f64 {
        let s = self.prices(path);
        let mut w = actions.first().map_or(0.0, |a| a[0]);
        for (j, r) in path.iter().enumerate().take(actions.len()) {
            let delta = position(actions, j);
            for i in 0..self.d {
                w += delta[i] * s[j][i] * r[i];
            }
        }
        w
    }

    /// Terminal hedging error `wealth - Φ`.
    pub fn hedging_error(&self, path: &[Point], actions: &[Point]) -> f64 {
        self.wealth(path, actions) - self.payoff.eval(&self.prices(path))
    }

    pub fn action_specs(&self) -> Vec<ActionSpec> {
        (0..self.horizon)
            .map(|t| {
                let extra = usize::from(t == 0);
                let mut lo = vec![-self.a_bar; self.d + extra];
                let mut hi = vec![self.a_bar; self.d + extra];
                if t == 0 {
                    lo[0] = -self.b_bar;
                    hi[0] = self.b_bar;
                }
                ActionSpec::ConstantBox {
                    resolution: vec![5; lo.len()],
                    lo,
                    hi,
                }
            })
            .collect()
    }

    /// `Ψ = -U(wealth - Φ)` with its analytic action gradient.
    pub fn objective(&self) -> Objective {
        let me = self.clone();
        let me2 = self.clone();
        Objective::new(move |w, a| -prospect_loss(me.hedging_error(w, a), &me.loss)).with_gradient(
            move |w, a| {
                let x = me2.hedging_error(w, a);
                let du = -prospect_loss_derivative(x, &me2.loss);
                let s = me2.prices(w);
                a.iter()
                    .enumerate()
                    .map(|(j, aj)| {
                        let off = usize::from(j == 0);
                        let mut g = vec![0.0; aj.len()];
                        if j == 0 {
                            g[0] = du;
                        }
                        if j < w.len() {
                            for i in 0..me2.d {
                                g[off + i] = du * (s[j + 1][i] - s[j][i]);
                            }
                        }
                        g
                    })
                    .collect()
            },
        )
    }

    /// The control problem with the given stage ambiguity sets.
    pub fn control_problem(&self, kernels: Vec<AmbiguityKernel>) -> Result<ControlProblem> {
        self.validate()?;
        let p = ControlProblem {
            horizon: self.horizon,
            space: LocalSpace::bounded(self.d, self.bound_c),
            actions: self.action_specs(),
            kernels,
            objective: self.objective(),
            growth_p: 0.0,
            constants: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Wasserstein balls of order 1 around the kernel-weighted empirical
    /// reference built from `series`.
    pub fn kernel_weighted_balls(
        &self,
        series: &ReturnSeries,
        beta: f64,
        eps: f64,
    ) -> Vec<AmbiguityKernel> {
        let reference = ReferenceKernel::KernelWeighted {
            returns: series.returns.clone(),
            beta,
        };
        (0..self.horizon)
            .map(|_| AmbiguityKernel::WassersteinBall {
                reference: reference.clone(),
                radius: RadiusSchedule::Constant(eps),
                q: 1.0,
                space: LocalSpace::bounded(self.d, self.bound_c),
            })
            .collect()
    }
}

/// Position `Δ_j` inside the stage-`j` action.
fn position(actions: &[Point], j: usize) -> &[f64] {
    if j == 0 {
        &actions[0][1..]
    } else {
        &actions[j]
    }
}

/// Checked version of `Ψ`: rejects returns outside `[-C, C]^d` and
/// actions outside their bounds.
pub fn hedging_objective(
    problem: &HedgingProblem,
    path: &[Point],
    actions: &[Point],
) -> Result<f64> {
    problem.validate()?;
    if path.len() != problem.horizon || actions.len() != problem.horizon {
        return Err(Error::InvalidInput(format!(
            "expected {} returns and actions",
            problem.horizon
        )));
    }
    for (t, r) in path.iter().enumerate() {
        if r.len() != problem.d || r.iter().any(|x| x.abs() > problem.bound_c) {
            return Err(Error::OffDomain(format!(
                "return {r:?} at step {} outside [-C, C]^d",
                t + 1
            )));
        }
    }
    let specs = problem.action_specs();
    for (t, a) in actions.iter().enumerate() {
        if !specs[t].contains(&path[..t], a) {
            return Err(Error::Inadmissible(format!(
                "action {a:?} at stage {t} out of bounds"
            )));
        }
    }
    Ok(problem.objective().eval(path, actions))
}

/// Network inputs for hedging: optionally the scaled returns so far, then
/// the scaled price move `S_t - S_0` and the scaled wealth accumulated so
/// far. Price and wealth alone form a Markov state whenever the payoff only
/// looks at the terminal prices.
#[derive(Debug, Clone)]
pub struct HedgingFeatures {
    pub problem: HedgingProblem,
    pub scale: f64,
    pub include_returns: bool,
}

impl HedgingFeatures {
    pub fn new(problem: &HedgingProblem) -> Self {
        Self {
            scale: problem.bound_c * (problem.horizon as f64).sqrt(),
            problem: problem.clone(),
            include_returns: true,
        }
    }

    /// Price and wealth only.
    pub fn markov(problem: &HedgingProblem) -> Self {
        Self {
            include_returns: false,
            ..Self::new(problem)
        }
    }
}

impl Featurizer for HedgingFeatures {
    fn dim(&self, t: usize) -> usize {
        match (t, self.include_returns) {
            (0, _) => 0,
            (_, true) => (t + 1) * self.problem.d + 1,
            (_, false) => self.problem.d + 1,
        }
    }

    fn features(&self, t: usize, path: &[Point], actions: &[Point]) -> Vec<f64> {
        if t == 0 {
            return Vec::new();
        }
        let c = self.problem.bound_c;
        let mut x: Vec<f64> = if self.include_returns {
            path[..t].iter().flatten().map(|r| r / c).collect()
        } else {
            Vec::with_capacity(self.dim(t))
        };
        let s = self.problem.prices(&path[..t]);
        x.extend(
            s[t].iter()
                .zip(&self.problem.s0)
                .map(|(a, b)| (a - b) / self.scale),
        );
        x.push(self.problem.wealth(&path[..t], &actions[..t]) / self.scale);
        x
    }

    fn last_action_jacobian(&self, t: usize, path: &[Point], actions: &[Point]) -> Vec<f64> {
        let d = self.problem.d;
        let m = actions[t - 1].len();
        let n = self.dim(t);
        let s = self.problem.prices(&path[..t]);
        let mut jac = vec![0.0; n * m];
        let row = n - 1;
        let off = usize::from(t == 1);
        if t == 1 {
            jac[row * m] = 1.0 / self.scale;
        }
        for i in 0..d {
            jac[row * m + off + i] = (s[t][i] - s[t - 1][i]) / self.scale;
        }
        jac
    }
}

/// Training states for hedging: returns resampled from a list, initial
/// capital and positions drawn uniformly from the given intervals. The
/// default intervals of the action sets spread the wealth far beyond the
/// size of a typical payoff.
#[derive(Debug, Clone)]
pub struct HedgingSampler {
    pub returns: Vec<Point>,
    pub capital: (f64, f64),
    pub position: (f64, f64),
}

impl StateSampler for HedgingSampler {
    fn sample(
        &self,
        problem: &ControlProblem,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Point>, Vec<Point>)> {
        if self.returns.is_empty() {
            return Err(Error::InvalidInput("hedging sampler needs returns".into()));
        }
        let d = problem.space.dim;
        let u = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        let mut path = Vec::with_capacity(t);
        let mut acts = Vec::with_capacity(t);
        for s in 0..t {
            let mut a = Vec::with_capacity(d + 1);
            if s == 0 {
                a.push(u(self.capital, rng));
            }
            a.extend((0..d).map(|_| u(self.position, rng)));
            acts.push(problem.actions[s].project(&path, &a)?);
            path.push(self.returns[rng.gen_range(0..self.returns.len())].clone());
        }
        Ok((path, acts))
    }
}

/// `N(d_1)` with `d_1 = [ln(S/K) + σ²τ/2] / (σ√τ)`; at `τ = 0` the
/// indicator of `S > K`.
pub fn bs_delta(s: f64, k: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return if s > k { 1.0 } else { 0.0 };
    }
    let v = sigma * tau.sqrt();
    let d1 = ((s / k).ln() + 0.5 * v * v) / v;
    SNormal::standard().cdf(d1)
}

/// Black–Scholes call price at zero interest.
pub fn bs_call_price(s: f64, k: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return (s - k).max(0.0);
    }
    let n = SNormal::standard();
    let v = sigma * tau.sqrt();
    let d1 = ((s / k).ln() + 0.5 * v * v) / v;
    s * n.cdf(d1) - k * n.cdf(d1 - v)
}

/// Daily-rebalanced delta hedge of a single-asset call, started with the
/// Black–Scholes premium.
#[derive(Debug, Clone)]
pub struct BsDeltaPolicy {
    pub problem: HedgingProblem,
    pub sigma: f64,
    pub strike: f64,
    pub day_count: f64,
}

pub fn bs_delta_hedge(
    problem: &HedgingProblem,
    annual_vol: f64,
    strike: f64,
    day_count: usize,
) -> Result<BsDeltaPolicy> {
    problem.validate()?;
    if problem.d != 1 {
        return Err(Error::Unsupported(
            "delta hedge is implemented for one asset".into(),
        ));
    }
    if !(annual_vol > 0.0) || !(strike > 0.0) || day_count == 0 {
        return Err(Error::InvalidInput(
            "volatility, strike and day count must be positive".into(),
        ));
    }
    Ok(BsDeltaPolicy {
        problem: problem.clone(),
        sigma: annual_vol,
        strike,
        day_count: day_count as f64,
    })
}

impl Policy for BsDeltaPolicy {
    fn act(&self, t: usize, path: &[Point], _past: &[Point]) -> Result<Point> {
        let p = &self.problem;
        let s = p.prices(&path[..t])[t][0];
        let tau = (p.horizon - t) as f64 / self.day_count;
        let delta = bs_delta(s, self.strike, self.sigma, tau).clamp(-p.a_bar, p.a_bar);
        if t == 0 {
            let premium = bs_call_price(s, self.strike, self.sigma, tau).clamp(-p.b_bar, p.b_bar);
            Ok(vec![premium, delta])
        } else {
            Ok(vec![delta])
        }
    }
}

/// Chronological return records with `date` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<String>,
    pub returns: Vec<Point>,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.returns.first().map_or(0, Vec::len)
    }

    /// Largest absolute return, the empirical `C`.
    pub fn max_abs(&self) -> f64 {
        self.returns
            .iter()
            .flatten()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Parses `date,r_1,...,r_d` CSV text, sorts by date and checks every
    /// return against `bound` when given. Line numbers in errors count the
    /// header as line 1.
    pub fn from_csv_str(text: &str, expected_d: Option<usize>, bound: Option<f64>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.is_empty() || &header[0] != "date" {
            return Err(Error::Parse {
                line: 1,
                message: "header must start with `date`".into(),
            });
        }
        let d = header.len() - 1;
        if d == 0 {
            return Err(Error::Parse {
                line: 1,
                message: "no return columns".into(),
            });
        }
        if let Some(e) = expected_d {
            if e != d {
                return Err(Error::DimensionMismatch {
                    expected: e,
                    found: d,
                });
            }
        }
        let mut rows: Vec<(String, Point)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != d + 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", d + 1, rec.len()),
                });
            }
            let mut r = Vec::with_capacity(d);
            for f in rec.iter().skip(1) {
                let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{f}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite return".into(),
                    });
                }
                if let Some(c) = bound {
                    if v.abs() > c {
                        return Err(Error::OffDomain(format!(
                            "return {v} on line {line} exceeds the bound {c}"
                        )));
                    }
                }
                r.push(v);
            }
            rows.push((rec[0].to_string(), r));
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no return records".into(),
            });
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let (dates, returns) = rows.into_iter().unzip();
        Ok(Self { dates, returns })
    }

    pub fn read_csv(path: &Path, expected_d: Option<usize>, bound: Option<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, expected_d, bound)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["date".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("r_{i}")));
        w.write_record(&header)?;
        for (date, r) in self.dates.iter().zip(&self.returns) {
            let mut rec = vec![date.clone()];
            rec.extend(r.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
    }

    /// Records strictly before `date` and the rest.
    pub fn split_at_date(&self, date: &str) -> (Self, Self) {
        let k = self.dates.partition_point(|d| d.as_str() < date);
        (self.slice(0, k), self.slice(k, self.len()))
    }

    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            dates: self.dates[from..to].to_vec(),
            returns: self.returns[from..to].to_vec(),
        }
    }

    /// Column `i` as a one-dimensional series.
    pub fn column(&self, i: usize) -> Self {
        Self {
            dates: self.dates.clone(),
            returns: self.returns.iter().map(|r| vec![r[i]]).collect(),
        }
    }
}

/// Sample standard deviation of daily returns of asset `asset` times
/// `sqrt(trading_days)`. A constant series gives 0 with a warning.
pub fn estimate_annual_vol(
    series: &ReturnSeries,
    asset: usize,
    trading_days: usize,
) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput(
            "volatility needs at least 2 returns".into(),
        ));
    }
    if asset >= series.dim() {
        return Err(Error::DimensionMismatch {
            expected: series.dim(),
            found: asset + 1,
        });
    }
    let xs: Vec<f64> = series.returns.iter().map(|r| r[asset]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let vol = var.sqrt() * (trading_days as f64).sqrt();
    if vol == 0.0 {
        log::warn!("constant return series: estimated volatility is 0");
    }
    Ok(vol)
}

/// Settings for geometric Brownian motion returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    /// Annual drift.
    pub mu: f64,
    /// Annual volatility.
    pub sigma: f64,
    pub days: usize,
    pub dim: usize,
    pub trading_days: usize,
    /// Returns are clipped to `[-clip, clip]`.
    pub clip: f64,
    pub seed: u64,
}

/// Simple returns `exp(X) - 1` with `X ~ N((μ - σ²/2)/D, σ²/D)`, clipped.
/// Also returns the fraction of clipped returns.
pub fn synthetic_gbm(cfg: &GbmConfig) -> Result<(ReturnSeries, f64)> {
    if !(cfg.sigma > 0.0)
        || cfg.days == 0
        || cfg.dim == 0
        || cfg.trading_days == 0
        || !(cfg.clip > 0.0)
    {
        return Err(Error::InvalidInput(
            "invalid synthetic data settings".into(),
        ));
    }
    let dt = 1.0 / cfg.trading_days as f64;
    let normal = Normal::new(
        (cfg.mu - 0.5 * cfg.sigma * cfg.sigma) * dt,
        cfg.sigma * dt.sqrt(),
    )
    .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clipped = 0usize;
    let mut returns = Vec::with_capacity(cfg.days);
    for _ in 0..cfg.days {
        let r: Point = (0..cfg.dim)
            .map(|_| {
                let x = normal.sample(&mut rng).exp() - 1.0;
                if x.abs() > cfg.clip {
                    clipped += 1;
                }
                x.clamp(-cfg.clip, cfg.clip)
            })
            .collect();
        returns.push(r);
    }
    let dates = (1..=cfg.days).map(|k| format!("day{k:05}")).collect();
    let frac = clipped as f64 / (cfg.days * cfg.dim) as f64;
    Ok((ReturnSeries { dates, returns }, frac))
}

/// One hedge of the backtest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestOutcome {
    pub policy: String,
    pub instrument: usize,
    pub start_date: String,
    /// `wealth - Φ`.
    pub error: f64,
    /// `U(wealth - Φ)`.
    pub loss: f64,
}

/// Count, mean, sample standard deviation, minimum, quartiles and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

pub fn summarize(xs: &[f64]) -> SummaryStats {
    let n = xs.len();
    if n == 0 {
        return SummaryStats {
            count: 0,
            mean: f64::NAN,
            std: f64::NAN,
            min: f64::NAN,
            q25: f64::NAN,
            q50: f64::NAN,
            q75: f64::NAN,
            max: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    SummaryStats {
        count: n,
        mean,
        std,
        min: s[0],
        q25: quantile(&s, 0.25),
        q50: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
        max: s[n - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: String,
    pub loss: SummaryStats,
    pub error: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub schema_version: u32,
    pub horizon: usize,
    pub summaries: Vec<PolicySummary>,
    #[serde(skip)]
    pub outcomes: Vec<BacktestOutcome>,
}

impl BacktestReport {
    pub fn outcomes_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for o in &self.outcomes {
            w.serialize(o)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Starts a hedge on every record `i` with at least `T` later records and
/// runs it over returns `i+1..=i+T`, so a series of `n` records yields
/// `n - T` hedges per instrument. A one-asset problem on a multi-column
/// series is run on every column separately.
pub fn backtest(
    problem: &HedgingProblem,
    policies: &[(String, &dyn Policy)],
    series: &ReturnSeries,
) -> Result<BacktestReport> {
    problem.validate()?;
    let t_len = problem.horizon;
    if series.len() <= t_len {
        return Err(Error::InvalidInput(format!(
            "{} records are not enough for a hedge over {t_len} returns",
            series.len()
        )));
    }
    let instruments: Vec<ReturnSeries> = if problem.d == 1 && series.dim() > 1 {
        (0..series.dim()).map(|i| series.column(i)).collect()
    } else if series.dim() == problem.d {
        vec![series.clone()]
    } else {
        return Err(Error::DimensionMismatch {
            expected: problem.d,
            found: series.dim(),
        });
    };
    let starts = series.len() - t_len;
    let mut outcomes = Vec::new();
    for (name, policy) in policies {
        for (inst, s) in instruments.iter().enumerate() {
            let rows: Result<Vec<BacktestOutcome>> = (0..starts)
                .into_par_iter()
                .map(|i| {
                    let path: Vec<Point> = s.returns[i + 1..=i + t_len].to_vec();
                    let mut acts: Vec<Point> = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let a = policy.act(t, &path[..t], &acts)?;
                        acts.push(a);
                    }
                    let error = problem.hedging_error(&path, &acts);
                    Ok(BacktestOutcome {
                        policy: name.clone(),
                        instrument: inst,
                        start_date: s.dates[i].clone(),
                        error,
                        loss: prospect_loss(error, &problem.loss),
                    })
                })
                .collect();
            outcomes.extend(rows?);
        }
    }
    let summaries = policies
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&BacktestOutcome> =
                outcomes.iter().filter(|o| &o.policy == name).collect();
            let losses: Vec<f64> = mine.iter().map(|o| o.loss).collect();
            let errors: Vec<f64> = mine.iter().map(|o| o.error).collect();
            PolicySummary {
                policy: name.clone(),
                loss: summarize(&losses),
                error: summarize(&errors),
            }
        })
        .collect();
    Ok(BacktestReport {
        schema_version: 1,
        horizon: t_len,
        summaries,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prospect_loss_examples() {
        let p = LossParams::default();
        assert_eq!(prospect_loss(0.0, &p), 0.0);
        assert_eq!(prospect_loss(1.0, &p), 1.0);
        assert_eq!(prospect_loss(-1.0, &p), 2.25);
        for x in [0.01, 0.3, 2.0] {
            assert!((prospect_loss(-x, &p) - p.b * prospect_loss(x, &p)).abs() < 1e-15);
        }
    }

    #[test]
    fn one_period_call_hedged_exactly() {
        let mut hp = HedgingProblem::atm_call(1, 0.2);
        hp.a_bar = 1.0;
        let v = hedging_objective(&hp, &[vec![0.1]], &[vec![0.0, 1.0]]).unwrap();
        assert!(v.abs() < 1e-15);
        let v = hedging_objective(&hp, &[vec![0.0]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(v, 0.0);
        assert!(hedging_objective(&hp, &[vec![0.3]], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn delta_limits_and_value() {
        assert!((bs_delta(1.0, 1.0, 0.2, 1.0) - 0.539_827_837_277_029).abs() < 1e-12);
        assert!(bs_delta(10.0, 1.0, 0.2, 0.1) > 0.999_999);
        assert!((bs_delta(1.0, 1.0, 0.01, 1e-4) - 0.5).abs() < 1e-3);
        assert_eq!(bs_delta(1.1, 1.0, 0.2, 0.0), 1.0);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let hp = HedgingProblem::atm_call(3, 0.1);
        let obj = hp.objective();
        let path = vec![vec![0.02], vec![-0.01], vec![0.03]];
        let acts = vec![vec![0.01, 0.4], vec![0.6], vec![-0.2]];
        let g = obj.action_gradient(&path, &acts);
        let fd = Objective::new({
            let hp = hp.clone();
            move |w, a| -prospect_loss(hp.hedging_error(w, a), &hp.loss)
        })
        .action_gradient(&path, &acts);
        for (a, b) in g.iter().flatten().zip(fd.iter().flatten()) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
