//! Parametric families `θ -> P_θ` with closed-form Wasserstein distances
//! and path estimators.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::measures::DiscreteMeasure;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as SNormal};
use statrs::function::gamma::gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamFamily {
    /// Product of independent normals, `θ = (μ_1..μ_d, σ_1..σ_d)`.
    NormalDiag { dim: usize },
    /// Exponential law with mean `θ` on `[0, ∞)`; `θ = 0` is `δ_0`.
    Exponential,
}

impl ParamFamily {
    pub fn dim(&self) -> usize {
        match self {
            ParamFamily::NormalDiag { dim } => *dim,
            ParamFamily::Exponential => 1,
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ParamFamily::NormalDiag { dim } => 2 * dim,
            ParamFamily::Exponential => 1,
        }
    }

    /// Shortest history for which [`estimate_theta`] is defined.
    pub fn min_history(&self) -> usize {
        match self {
            ParamFamily::NormalDiag { .. } => 2,
            ParamFamily::Exponential => 1,
        }
    }

    pub fn validate(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                found: theta.len(),
            });
        }
        let ok = match self {
            ParamFamily::NormalDiag { dim } => theta[*dim..].iter().all(|s| *s >= 0.0),
            ParamFamily::Exponential => theta[0] >= 0.0,
        };
        if !ok || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter {theta:?} outside the parameter set"
            )));
        }
        Ok(())
    }

    /// Euclidean projection onto the (convex) parameter set.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            ParamFamily::NormalDiag { dim } => theta
                .iter()
                .enumerate()
                .map(|(k, v)| if k >= *dim { v.max(0.0) } else { *v })
                .collect(),
            ParamFamily::Exponential => vec![theta[0].max(0.0)],
        }
    }

    /// Constant `L` with `W_r(P_θ, P_θ') <= L |θ - θ'|` for `r = max(1, p)`.
    pub fn lipschitz(&self, p: f64) -> f64 {
        match self {
            ParamFamily::NormalDiag { .. } => 1.0,
            ParamFamily::Exponential => {
                let r = p.max(1.0);
                gamma(r + 1.0).powf(1.0 / r)
            }
        }
    }

    /// Lipschitz constant of the estimator on histories of length `t`.
    pub fn estimator_lipschitz(&self, t: usize) -> f64 {
        let tf = t as f64;
        match self {
            ParamFamily::Exponential => 1.0 / tf,
            ParamFamily::NormalDiag { dim } => {
                if t < 2 {
                    return f64::INFINITY;
                }
                let c = (std::f64::consts::PI / 2.0).sqrt() * (tf / (tf - 1.0)).sqrt();
                1.0 / tf + 2.0 * c * (*dim as f64).sqrt() / tf
            }
        }
    }

    /// Quantile discretisation with `n` equally weighted atoms per
    /// coordinate at the levels `(k - 1/2) / n`.
    pub fn discretize(&self, theta: &[f64], n: usize) -> Result<DiscreteMeasure> {
        self.validate(theta)?;
        if n == 0 {
            return Err(Error::InvalidInput("discretisation needs n >= 1".into()));
        }
        let levels: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        match self {
            ParamFamily::Exponential => {
                let pts = levels
                    .iter()
                    .map(|u| vec![-theta[0] * (1.0 - u).ln()])
                    .collect();
                Ok(DiscreteMeasure::uniform(pts)?.canonical())
            }
            ParamFamily::NormalDiag { dim } => {
                let std = SNormal::standard();
                let z: Vec<f64> = levels.iter().map(|u| std.inverse_cdf(*u)).collect();
                let total = n.pow(*dim as u32);
                let mut pts = Vec::with_capacity(total);
                for idx in 0..total {
                    let mut rem = idx;
                    let mut x = vec![0.0; *dim];
                    for (j, xj) in x.iter_mut().enumerate() {
                        let k = rem % n;
                        rem /= n;
                        *xj = theta[j] + theta[dim + j] * z[k];
                    }
                    pts.push(x);
                }
                Ok(DiscreteMeasure::uniform(pts)?.canonical())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Point {
        match self {
            ParamFamily::Exponential => {
                if theta[0] == 0.0 {
                    vec![0.0]
                } else {
                    vec![Exp::new(1.0 / theta[0]).expect("positive rate").sample(rng)]
                }
            }
            ParamFamily::NormalDiag { dim } => (0..*dim)
                .map(|j| {
                    let s = theta[dim + j];
                    if s == 0.0 {
                        theta[j]
                    } else {
                        Normal::new(theta[j], s).expect("valid normal").sample(rng)
                    }
                })
                .collect(),
        }
    }
}

/// Closed-form `W_r(P_θ1, P_θ2)`.
///
/// Exponential: `|θ1 - θ2| Γ(r + 1)^{1/r}`. Normal: only `r = 2`,
/// `sqrt(|μ1 - μ2|² + |σ1 - σ2|²)`.
pub fn family_distance(family: &ParamFamily, t1: &[f64], t2: &[f64], order: f64) -> Result<f64> {
    family.validate(t1)?;
    family.validate(t2)?;
    if order < 1.0 {
        return Err(Error::InvalidInput(format!("order {order} < 1")));
    }
    match family {
        ParamFamily::Exponential => {
            Ok((t1[0] - t2[0]).abs() * gamma(order + 1.0).powf(1.0 / order))
        }
        ParamFamily::NormalDiag { .. } => {
            if order != 2.0 {
                return Err(Error::Unsupported(format!(
                    "closed-form normal distance only for order 2, got {order}"
                )));
            }
            Ok(crate::geometry::dist(t1, t2))
        }
    }
}

/// Path estimator `θ̂_t(ω^t)`.
///
/// Exponential: sample mean. Normal: sample mean and the bias-corrected
/// mean-absolute-deviation scale estimate
/// `sqrt(π/2) sqrt(t/(t-1)) (1/t) sum_s |ω_s - mean|`.
pub fn estimate_theta(family: &ParamFamily, path: &[Point]) -> Result<Vec<f64>> {
    let t = path.len();
    if t < family.min_history() {
        return Err(Error::InvalidInput(format!(
            "estimator needs a history of length >= {}, got {t}",
            family.min_history()
        )));
    }
    let d = family.dim();
    for x in path {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
    }
    let tf = t as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| path.iter().map(|x| x[j]).sum::<f64>() / tf)
        .collect();
    match family {
        ParamFamily::Exponential => {
            if mean[0] < 0.0 {
                return Err(Error::OffDomain(
                    "exponential estimator on a negative path".into(),
                ));
            }
            Ok(mean)
        }
        ParamFamily::NormalDiag { .. } => {
            let c = (std::f64::consts::PI / 2.0).sqrt() * (tf / (tf - 1.0)).sqrt();
            let mut theta = mean.clone();
            for j in 0..d {
                let mad = path.iter().map(|x| (x[j] - mean[j]).abs()).sum::<f64>() / tf;
                theta.push(c * mad);
            }
            Ok(theta)
        }
    }
}
