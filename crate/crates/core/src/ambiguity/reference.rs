//! Reference kernels `P̂_t(ω^t)`: the centres of the ambiguity sets.

use crate::error::{Error, Result};
use crate::geometry::{dist, norm, Point};
use crate::measures::DiscreteMeasure;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Nearest grid point, ties resolved to the lowest index.
pub fn nearest_index(grid: &[Point], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, g) in grid.iter().enumerate() {
        let d = dist(g, x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// A measure-valued function of a path on a finite grid, evaluated at
/// off-grid paths through the nearest grid path.
#[derive(Debug, Clone)]
pub struct TabularKernel {
    pub grid: Vec<Point>,
    pub table: BTreeMap<Vec<usize>, DiscreteMeasure>,
}

impl TabularKernel {
    pub fn key(&self, path: &[Point]) -> Vec<usize> {
        path.iter().map(|x| nearest_index(&self.grid, x)).collect()
    }
}

/// A user-supplied measure-valued function of the path.
#[derive(Clone)]
pub struct KernelFn(pub Arc<dyn Fn(&[Point]) -> Result<DiscreteMeasure> + Send + Sync>);

impl KernelFn {
    pub fn new<F: Fn(&[Point]) -> Result<DiscreteMeasure> + Send + Sync + 'static>(f: F) -> Self {
        KernelFn(Arc::new(f))
    }
}

impl std::fmt::Debug for KernelFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KernelFn(..)")
    }
}

/// The reference kernel variants.
#[derive(Debug, Clone)]
pub enum ReferenceKernel {
    /// The same measure at every path.
    Constant(DiscreteMeasure),
    /// Uniform measure on the observed returns, independent of the path.
    Empirical0 { returns: Vec<Point> },
    /// Returns following historical windows close to the current path,
    /// weighted by a softmax of `-beta` times the squared window distance.
    KernelWeighted { returns: Vec<Point>, beta: f64 },
    /// Empirical measure of the observed returns augmented by the path.
    Adaptive { returns: Vec<Point> },
    /// Base measure translated by `gamma` times the last state of the path.
    Shift { base: DiscreteMeasure, gamma: f64 },
    /// Lookup table on a grid of states.
    Tabular(TabularKernel),
    /// Arbitrary function of the path with an optional declared constant.
    Custom { f: KernelFn, lipschitz: Option<f64> },
}

fn max_norm(points: &[Point]) -> f64 {
    points.iter().map(|x| norm(x)).fold(0.0, f64::max)
}

impl ReferenceKernel {
    /// `P̂_t(ω^t)` where `t = path.len()`.
    pub fn evaluate(&self, path: &[Point]) -> Result<DiscreteMeasure> {
        let t = path.len();
        match self {
            ReferenceKernel::Constant(m) => Ok(m.clone()),
            ReferenceKernel::Empirical0 { returns } => DiscreteMeasure::uniform(returns.clone()),
            ReferenceKernel::KernelWeighted { returns, beta } => {
                kernel_weighted(returns, *beta, path)
            }
            ReferenceKernel::Adaptive { returns } => {
                let mut pts = returns.clone();
                pts.extend(path.iter().cloned());
                DiscreteMeasure::uniform(pts)
            }
            ReferenceKernel::Shift { base, gamma } => {
                if t == 0 {
                    return Ok(base.clone());
                }
                let last = &path[t - 1];
                if last.len() != base.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: base.dim(),
                        found: last.len(),
                    });
                }
                Ok(base.push_forward(|x| x.iter().zip(last).map(|(a, b)| a + gamma * b).collect()))
            }
            ReferenceKernel::Tabular(tab) => {
                let key = tab.key(path);
                tab.table.get(&key).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!("no tabulated measure for grid path {key:?}"))
                })
            }
            ReferenceKernel::Custom { f, .. } => (f.0)(path),
        }
    }

    /// Declared Lipschitz constant of `ω^t -> P̂_t(ω^t)` in `W_1`, with
    /// paths measured by the sum of stagewise distances. `None` when no
    /// constant is known (tabular kernels jump between grid cells).
    pub fn lipschitz(&self, t: usize) -> Option<f64> {
        match self {
            ReferenceKernel::Constant(_) | ReferenceKernel::Empirical0 { .. } => Some(0.0),
            ReferenceKernel::Adaptive { returns } => Some(1.0 / (returns.len() + t) as f64),
            ReferenceKernel::Shift { gamma, .. } => Some(if t == 0 { 0.0 } else { gamma.abs() }),
            ReferenceKernel::KernelWeighted { returns, beta } => {
                if t == 0 {
                    return Some(0.0);
                }
                let n = returns.len();
                if t >= n {
                    return None;
                }
                // Each weight's gradient is bounded by (beta / 2) times the
                // diameter of the window set, at most 2 C sqrt(t).
                let c = max_norm(returns);
                let l_pi = 0.5 * beta * 2.0 * c * (t as f64).sqrt();
                Some((n - t) as f64 * c * l_pi)
            }
            ReferenceKernel::Tabular(_) => None,
            ReferenceKernel::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

fn kernel_weighted(returns: &[Point], beta: f64, path: &[Point]) -> Result<DiscreteMeasure> {
    let n = returns.len();
    let t = path.len();
    if t >= n {
        return Err(Error::InvalidInput(format!(
            "path length {t} needs more than {n} historical returns"
        )));
    }
    // 1-based s = t..=n-1 maps to atom returns[s] (R_{s+1}) and window
    // returns[s-t..s] (R_{s-t+1}, ..., R_s).
    let mut logits = Vec::with_capacity(n - t);
    let mut atoms = Vec::with_capacity(n - t);
    for s in t..n {
        let mut d2 = 0.0;
        for i in 0..t {
            let r = &returns[s - t + i];
            let w = &path[i];
            if r.len() != w.len() {
                return Err(Error::DimensionMismatch {
                    expected: r.len(),
                    found: w.len(),
                });
            }
            d2 += r.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        logits.push(-beta * d2);
        atoms.push(returns[s].clone());
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = ex.iter().sum();
    DiscreteMeasure::new(atoms, ex.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weighted_matches_hand_computation() {
        let returns = vec![vec![0.1], vec![-0.1], vec![0.1], vec![0.0]];
        let k = ReferenceKernel::KernelWeighted { returns, beta: 1.0 };
        let m = k.evaluate(&[vec![0.1]]).unwrap();
        // windows R_1..R_3 = 0.1, -0.1, 0.1 against 0.1 -> distances 0, 0.04, 0
        let z = 2.0 + (-0.04f64).exp();
        let w = m.weights();
        assert!((w[0] - 1.0 / z).abs() < 1e-15);
        assert!((w[1] - (-0.04f64).exp() / z).abs() < 1e-15);
        assert_eq!(m.support()[1], vec![0.1]);
    }

    #[test]
    fn kernel_weighted_at_time_zero_is_empirical() {
        let returns = vec![vec![1.0], vec![2.0], vec![4.0]];
        let k = ReferenceKernel::KernelWeighted {
            returns: returns.clone(),
            beta: 500.0,
        };
        let m = k.evaluate(&[]).unwrap();
        assert_eq!(m.support(), &returns[..]);
        for w in m.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptive_appends_path() {
        let k = ReferenceKernel::Adaptive {
            returns: vec![vec![0.0], vec![1.0]],
        };
        let m = k.evaluate(&[vec![5.0]]).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(k.lipschitz(1), Some(1.0 / 3.0));
    }
}
