//! Finitely supported probability measures on a local state space, together
//! with exact Wasserstein distances.
//!
//! Three independent routes to `W_q` are provided:
//!
//! * [`w_q_1d`]: the quantile coupling for one-dimensional measures,
//! * [`w_q_discrete`]: an exact transportation simplex for any dimension,
//! * [`kr_dual_check`]: the Kantorovich–Rubinstein dual for `q = 1`, solved
//!   as a generic linear program.

use crate::error::{Error, Result};
use crate::geometry::{dist, lex_cmp, Point};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Tolerance on the total mass of a measure.
pub const MASS_TOL: f64 = 1e-9;

/// The local state space: all of `R^d` or the closed box `[-C, C]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSpace {
    pub dim: usize,
    pub bound: Option<f64>,
}

impl LocalSpace {
    pub fn unbounded(dim: usize) -> Self {
        Self { dim, bound: None }
    }

    pub fn bounded(dim: usize, c: f64) -> Self {
        Self {
            dim,
            bound: Some(c),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.bound {
            Some(c) => x.iter().all(|v| v.abs() <= c + 1e-12),
            None => true,
        }
    }

    /// Nearest point of the space (coordinatewise clamp for a box).
    pub fn project(&self, x: &[f64]) -> Point {
        match self.bound {
            Some(c) => x.iter().map(|v| v.clamp(-c, c)).collect(),
            None => x.to_vec(),
        }
    }
}

/// A probability measure `sum_i w_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    support: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure, validating dimensions and weights. Weights whose
    /// total differs from one by more than [`MASS_TOL`] are rejected; smaller
    /// deviations are normalised away.
    pub fn new(support: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        if support.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let d = support[0].len();
        for x in &support {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    pub fn dirac(x: Point) -> Self {
        Self {
            support: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn uniform(points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&Point, f64)> {
        self.support.iter().zip(self.weights.iter().copied())
    }

    pub fn expect<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.atoms().map(|(x, w)| w * f(x)).sum()
    }

    /// Checks that every atom with positive mass lies in `space`.
    pub fn check_in(&self, space: &LocalSpace) -> Result<()> {
        if self.dim() != space.dim {
            return Err(Error::DimensionMismatch {
                expected: space.dim,
                found: self.dim(),
            });
        }
        for (x, w) in self.atoms() {
            if w > 0.0 && !space.contains(x) {
                return Err(Error::OffDomain(format!("{x:?}")));
            }
        }
        Ok(())
    }

    /// Same measure with duplicate atoms merged and zero-mass atoms
    /// removed, sorted lexicographically.
    pub fn canonical(&self) -> Self {
        let mut atoms: Vec<(Point, f64)> = self
            .atoms()
            .filter(|(_, w)| *w > 0.0)
            .map(|(x, w)| (x.clone(), w))
            .collect();
        atoms.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        let mut support: Vec<Point> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match support.last() {
                Some(last) if *last == x => *weights.last_mut().unwrap() += w,
                _ => {
                    support.push(x);
                    weights.push(w);
                }
            }
        }
        Self { support, weights }
    }

    /// Image measure under `f`.
    pub fn push_forward<F: FnMut(&[f64]) -> Point>(&self, mut f: F) -> Self {
        Self {
            support: self.support.iter().map(|x| f(x)).collect(),
            weights: self.weights.clone(),
        }
    }

    /// Text form: one line `weight x_1 ... x_d` per atom, atoms sorted
    /// lexicographically by position. Floats use the shortest round-trip
    /// representation so parsing is exact.
    pub fn to_text(&self) -> String {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&i, &j| lex_cmp(&self.support[i], &self.support[j]));
        let mut out = String::new();
        for i in idx {
            let _ = write!(out, "{:?}", self.weights[i]);
            for v in &self.support[i] {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`DiscreteMeasure::to_text`] output. The mass is validated as
    /// in [`DiscreteMeasure::new`], but the weights are kept bit for bit.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut nums = Vec::new();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("not a number: {tok:?}"),
                })?;
                nums.push(v);
            }
            if nums.len() < 2 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected a weight followed by coordinates".into(),
                });
            }
            weights.push(nums[0]);
            support.push(nums[1..].to_vec());
        }
        Self::new(support.clone(), weights.clone())?;
        Ok(Self { support, weights })
    }
}

/// `sum_i w_i |x_i|^p`; `p = 0` gives one.
pub fn moment(mu: &DiscreteMeasure, p: f64) -> f64 {
    if p == 0.0 {
        return mu.weights().iter().sum();
    }
    mu.expect(|x| crate::geometry::norm(x).powf(p))
}

fn check_order(q: f64) -> Result<()> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidInput(format!("order q = {q} must be >= 1")));
    }
    Ok(())
}

fn check_same_dim(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    Ok(())
}

/// `W_q` between one-dimensional measures via the monotone (quantile)
/// coupling.
pub fn w_q_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    check_order(q)?;
    check_same_dim(mu, nu)?;
    if mu.dim() != 1 {
        return Err(Error::Unsupported(format!(
            "quantile coupling needs dimension 1, got {}",
            mu.dim()
        )));
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut a: Vec<(f64, f64)> = m.atoms().map(|(x, w)| (x[0], w)).collect();
        a.sort_by(|x, y| x.0.total_cmp(&y.0));
        a
    };
    let a = sorted(mu);
    let b = sorted(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        cost += m * (a[i].0 - b[j].0).abs().powf(q);
        ra -= m;
        rb -= m;
        if ra <= rb {
            i += 1;
            if i < a.len() {
                ra += a[i].1;
            }
        } else {
            j += 1;
            if j < b.len() {
                rb += b[j].1;
            }
        }
    }
    Ok(cost.max(0.0).powf(1.0 / q))
}

/// An optimal transport plan between two discrete measures.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// Entries `(i, j, mass)` with positive mass, indices into the supports
    /// of the source and target measures.
    pub plan: Vec<(usize, usize, f64)>,
    /// Total transport cost `sum mass * |x_i - y_j|^q`.
    pub cost: f64,
}

/// Optimal coupling for the cost `|x - y|^q`.
pub fn optimal_coupling(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<Coupling> {
    check_order(q)?;
    check_same_dim(mu, nu)?;
    let m = mu.len();
    let n = nu.len();
    let mut cost = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            cost[i * n + j] = dist(&mu.support()[i], &nu.support()[j]).powf(q);
        }
    }
    let flows = transport_simplex(mu.weights(), nu.weights(), &cost)?;
    let mut plan = Vec::new();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let f = flows[i * n + j];
            if f > 0.0 {
                plan.push((i, j, f));
                total += f * cost[i * n + j];
            }
        }
    }
    Ok(Coupling { plan, cost: total })
}

/// `W_q` between measures of any dimension via an exact transport solve.
pub fn w_q_discrete(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    let c = optimal_coupling(mu, nu, q)?;
    Ok(c.cost.max(0.0).powf(1.0 / q))
}

/// Transportation simplex (MODI method) on a dense cost matrix.
///
/// `supply` and `demand` must have (numerically) equal totals. Returns the
/// flow matrix in row-major order.
pub fn transport_simplex(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<Vec<f64>> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 || cost.len() != m * n {
        return Err(Error::InvalidInput("transport problem shape".into()));
    }
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let ts: f64 = s.iter().sum();
    let td: f64 = d.iter().sum();
    if (ts - td).abs() > 1e-7 * ts.max(td).max(1.0) {
        return Err(Error::InvalidInput(format!(
            "unbalanced transport problem: {ts} vs {td}"
        )));
    }
    // Absorb rounding noise into the last demand so totals agree.
    let head: f64 = d[..n - 1].iter().sum();
    d[n - 1] = (ts - head).max(0.0);

    let mut x = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);
    // Northwest corner start: exactly m + n - 1 cells forming a spanning tree.
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let f = s[i].min(d[j]);
        x[i * n + j] = f;
        basic[i * n + j] = true;
        basis.push((i, j));
        s[i] -= f;
        d[j] -= f;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 {
            i += 1;
        } else if s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1e-300);
    let tol = 1e-12 * scale;
    let nodes = m + n;
    let max_iter = 50 * (m * n + 10);
    let mut degenerate_run = 0usize;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
    let mut seen = vec![false; nodes];
    let mut queue = Vec::with_capacity(nodes);

    for _ in 0..max_iter {
        for a in adj.iter_mut() {
            a.clear();
        }
        for (k, &(bi, bj)) in basis.iter().enumerate() {
            adj[bi].push((m + bj, k));
            adj[m + bj].push((bi, k));
        }
        // Potentials by traversing the basis tree from row 0.
        seen.iter_mut().for_each(|s| *s = false);
        queue.clear();
        queue.push(0);
        seen[0] = true;
        u[0] = 0.0;
        let mut head = 0;
        while head < queue.len() {
            let node = queue[head];
            head += 1;
            for &(other, k) in &adj[node] {
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let (bi, bj) = basis[k];
                if other >= m {
                    v[other - m] = cost[bi * n + bj] - u[bi];
                } else {
                    u[other] = cost[bi * n + bj] - v[bj];
                }
                queue.push(other);
            }
        }
        if queue.len() != nodes {
            return Err(Error::Solver(
                "transport basis is not a spanning tree".into(),
            ));
        }
        // Entering cell: Dantzig rule, switching to the first improving cell
        // after a long run of degenerate pivots.
        let bland = degenerate_run > m + n;
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                if basic[i * n + j] {
                    continue;
                }
                let r = cost[i * n + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = enter else {
            return Ok(x);
        };
        // Path in the tree from row ei to column ej.
        parent.iter_mut().for_each(|p| *p = None);
        seen.iter_mut().for_each(|s| *s = false);
        queue.clear();
        queue.push(ei);
        seen[ei] = true;
        let target = m + ej;
        let mut head = 0;
        while head < queue.len() {
            let node = queue[head];
            head += 1;
            if node == target {
                break;
            }
            for &(other, k) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, k));
                    queue.push(other);
                }
            }
        }
        // Walk back from the column: edges alternate -, +, -, ...
        let mut cycle: Vec<usize> = Vec::new();
        let mut node = target;
        while node != ei {
            let (prev, k) = parent[node].ok_or_else(|| Error::Solver("broken cycle".into()))?;
            cycle.push(k);
            node = prev;
        }
        let mut theta = f64::INFINITY;
        let mut leave_pos = 0;
        for (pos, &k) in cycle.iter().enumerate().step_by(2) {
            let (bi, bj) = basis[k];
            let f = x[bi * n + bj];
            if f < theta {
                theta = f;
                leave_pos = pos;
            }
        }
        degenerate_run = if theta <= 0.0 { degenerate_run + 1 } else { 0 };
        for (pos, &k) in cycle.iter().enumerate() {
            let (bi, bj) = basis[k];
            if pos % 2 == 0 {
                x[bi * n + bj] -= theta;
            } else {
                x[bi * n + bj] += theta;
            }
        }
        let leave_k = cycle[leave_pos];
        let (li, lj) = basis[leave_k];
        x[li * n + lj] = 0.0;
        basic[li * n + lj] = false;
        x[ei * n + ej] = theta;
        basic[ei * n + ej] = true;
        basis[leave_k] = (ei, ej);
        for f in x.iter_mut() {
            if *f < 0.0 {
                *f = 0.0;
            }
        }
    }
    Err(Error::Solver(
        "transport simplex iteration limit reached".into(),
    ))
}

/// `W_1` through the Kantorovich–Rubinstein dual
/// `max sum_k f_k (mu_k - nu_k)` over 1-Lipschitz `f` on the union of
/// supports, solved as a linear program independent of the transport
/// solver.
pub fn kr_dual_check(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    check_same_dim(mu, nu)?;
    let mut pts: Vec<Point> = Vec::new();
    let mut diff: Vec<f64> = Vec::new();
    let add = |x: &Point, w: f64, pts: &mut Vec<Point>, diff: &mut Vec<f64>| {
        if let Some(k) = pts.iter().position(|p| p == x) {
            diff[k] += w;
        } else {
            pts.push(x.clone());
            diff.push(w);
        }
    };
    for (x, w) in mu.atoms() {
        add(x, w, &mut pts, &mut diff);
    }
    for (x, w) in nu.atoms() {
        add(x, -w, &mut pts, &mut diff);
    }
    let k = pts.len();
    if k == 1 {
        return Ok(0.0);
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..k)
        .map(|i| {
            let bounds = if i == 0 {
                (0.0, 0.0)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            lp.add_var(diff[i], bounds)
        })
        .collect();
    for a in 0..k {
        for b in (a + 1)..k {
            let dab = dist(&pts[a], &pts[b]);
            lp.add_constraint([(vars[a], 1.0), (vars[b], -1.0)], ComparisonOp::Le, dab);
            lp.add_constraint([(vars[b], 1.0), (vars[a], -1.0)], ComparisonOp::Le, dab);
        }
    }
    let sol = lp
        .solve()
        .map_err(|e| Error::Solver(format!("{e:?}")))?
        .into_solution()
        .map_err(|_| Error::Solver("interrupted".into()))?;
    Ok(sol.objective().max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(points.iter().map(|&p| vec![p]).collect(), weights.to_vec()).unwrap()
    }

    #[test]
    fn two_point_example() {
        let mu = m1(&[0.0, 1.0], &[0.5, 0.5]);
        let nu = m1(&[0.0, 2.0], &[0.5, 0.5]);
        assert!((w_q_1d(&mu, &nu, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((w_q_discrete(&mu, &nu, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((w_q_1d(&mu, &nu, 2.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((kr_dual_check(&mu, &nu).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_mass() {
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.9]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5 + 1e-11]).is_ok());
    }

    #[test]
    fn moment_of_zero_order_is_one() {
        let mu = m1(&[-2.0, 3.0], &[0.25, 0.75]);
        assert_eq!(moment(&mu, 0.0), 1.0);
        assert!((moment(&mu, 1.0) - 2.75).abs() < 1e-15);
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mu = DiscreteMeasure::new(vec![vec![0.1, -3.0], vec![-1.0 / 3.0, 2.0]], vec![0.3, 0.7])
            .unwrap();
        let text = mu.to_text();
        let back = DiscreteMeasure::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert!(text.starts_with("0.7 "));
    }

    #[test]
    fn degenerate_transport() {
        let mu = m1(&[0.0, 1.0, 2.0], &[0.25, 0.5, 0.25]);
        assert!(w_q_discrete(&mu, &mu, 2.0).unwrap() < 1e-12);
    }
}
