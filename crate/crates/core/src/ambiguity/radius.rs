//! Radius schedules `ε_t(ω^t)` and the data-driven radii for adaptive
//! empirical reference measures.

use crate::error::{Error, Result};
use crate::geometry::{norm, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// A user-supplied radius as a function of the path.
#[derive(Clone)]
pub struct PathRadius(pub Arc<dyn Fn(&[Point]) -> f64 + Send + Sync>);

impl std::fmt::Debug for PathRadius {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PathRadius(..)")
    }
}

#[derive(Debug, Clone)]
pub enum RadiusSchedule {
    Constant(f64),
    /// `h / sqrt(n + t)` for one-dimensional adaptive references.
    Adaptive1D {
        h: f64,
        n: usize,
    },
    /// Multi-dimensional covering-number radius, see
    /// [`adaptive_radius_multidim`].
    AdaptiveMultiD {
        dim: usize,
        bound: f64,
        n: usize,
        scale: f64,
    },
    /// `clamp(base + slope |ω_t|, 0, cap)` in the last state of the path.
    LastStateAffine {
        base: f64,
        slope: f64,
        cap: f64,
    },
    /// Arbitrary path function, clamped to `[0, cap]`, with a declared
    /// Lipschitz constant.
    Custom {
        f: PathRadius,
        lipschitz: f64,
        cap: f64,
    },
}

impl RadiusSchedule {
    pub fn radius(&self, path: &[Point]) -> Result<f64> {
        let t = path.len();
        let r = match self {
            RadiusSchedule::Constant(e) => *e,
            RadiusSchedule::Adaptive1D { h, n } => h / ((n + t) as f64).sqrt(),
            RadiusSchedule::AdaptiveMultiD {
                dim,
                bound,
                n,
                scale,
            } => adaptive_radius_multidim(*dim, *bound, n + t, *scale)?,
            RadiusSchedule::LastStateAffine { base, slope, cap } => {
                let x = path.last().map(|x| norm(x)).unwrap_or(0.0);
                (base + slope * x).clamp(0.0, *cap)
            }
            RadiusSchedule::Custom { f, cap, .. } => (f.0)(path).clamp(0.0, *cap),
        };
        if !r.is_finite() || r < 0.0 {
            return Err(Error::Numerical(format!("invalid radius {r} at stage {t}")));
        }
        Ok(r)
    }

    /// Lipschitz constant of the radius in the path.
    pub fn lipschitz(&self) -> f64 {
        match self {
            RadiusSchedule::Constant(_)
            | RadiusSchedule::Adaptive1D { .. }
            | RadiusSchedule::AdaptiveMultiD { .. } => 0.0,
            RadiusSchedule::LastStateAffine { slope, .. } => slope.abs(),
            RadiusSchedule::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

/// Monte Carlo settings for the Brownian bridge functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BridgeMcConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BridgeMcConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            steps: 1_000,
            seed: 20_240_101,
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

const CHUNK: usize = 1_000;

/// Samples of `∫_0^1 |B_u| du` for a standard Brownian bridge `B`, by the
/// trapezoidal rule on `steps` equal subintervals.
pub fn bridge_abs_integral_samples(cfg: &BridgeMcConfig) -> Vec<f64> {
    let chunks = cfg.paths.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(cfg.paths - c * CHUNK);
            let n = cfg.steps;
            let sd = (1.0 / n as f64).sqrt();
            let mut w = vec![0.0; n + 1];
            (0..count)
                .map(|_| {
                    for k in 1..=n {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        w[k] = w[k - 1] + sd * z;
                    }
                    let w1 = w[n];
                    let mut acc = 0.0;
                    for (k, wk) in w.iter().enumerate().take(n).skip(1) {
                        let u = k as f64 / n as f64;
                        acc += (wk - u * w1).abs();
                    }
                    acc / n as f64
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn cache() -> &'static Mutex<HashMap<(u64, BridgeMcConfig), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, BridgeMcConfig), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// `α`-quantile of `∫_0^1 |B_u| du`, cached per `(α, config)`.
pub fn bridge_quantile(alpha: f64, cfg: &BridgeMcConfig) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "quantile level {alpha} not in (0,1)"
        )));
    }
    if cfg.paths == 0 || cfg.steps == 0 {
        return Err(Error::InvalidInput(
            "Monte Carlo needs paths and steps".into(),
        ));
    }
    let key = (alpha.to_bits(), *cfg);
    if let Some(v) = cache().lock().expect("cache poisoned").get(&key) {
        return Ok(*v);
    }
    let mut s = bridge_abs_integral_samples(cfg);
    s.sort_by(f64::total_cmp);
    let h = quantile(&s, alpha);
    cache().lock().expect("cache poisoned").insert(key, h);
    Ok(h)
}

/// One-dimensional adaptive radius `H^α / sqrt(N + t)`.
pub fn adaptive_radius_1d(alpha: f64, n_plus_t: usize, cfg: &BridgeMcConfig) -> Result<f64> {
    if n_plus_t == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    Ok(bridge_quantile(alpha, cfg)? / (n_plus_t as f64).sqrt())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Radius for the adaptive empirical measure in dimension `d >= 2` on
/// `[-C, C]^d`, obtained by optimising the covering-number bound over the
/// truncation level `γ`:
///
/// `ε = 64/(3 scale) [γ* + (N+t)^{-1/2} ((C√d/2 - γ*) + log(C√d/(2γ*)) 2C√d m
///   + Σ_{k=2}^{m} C(m,k) (2C√d)^k ((C√d/2)^{1-k} - γ*^{1-k}) / (1-k))]`
///
/// with `m = ⌈d/2⌉` and `γ* = 2C√d / ((N+t)^{1/(2m)} - 1)`. The truncation
/// level never exceeds `C√d/2`: for small samples `γ*` is clipped there, the
/// bracket reduces to `C√d/2` and the radius stays positive.
pub fn adaptive_radius_multidim(d: usize, c: f64, n_plus_t: usize, scale: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidInput(format!(
            "multi-dimensional radius needs d >= 2, got {d}"
        )));
    }
    if !(c > 0.0) || !(scale > 0.0) {
        return Err(Error::InvalidInput(
            "bound and scale must be positive".into(),
        ));
    }
    let m = d.div_ceil(2);
    let k = n_plus_t as f64;
    let root = k.powf(1.0 / (2 * m) as f64) - 1.0;
    if !(root > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sample size {n_plus_t} too small for the covering bound"
        )));
    }
    let sd = (d as f64).sqrt();
    let half = c * sd / 2.0;
    let g = (2.0 * c * sd / root).min(half);
    let mut tail = (half - g) + (half / g).ln() * 2.0 * c * sd * m as f64;
    for j in 2..=m {
        let jf = j as f64;
        tail += binomial(m, j) * (2.0 * c * sd).powf(jf) * (half.powf(1.0 - jf) - g.powf(1.0 - jf))
            / (1.0 - jf);
    }
    let eps = 64.0 / (3.0 * scale) * (g + tail / k.sqrt());
    if !eps.is_finite() {
        return Err(Error::Numerical(
            "non-finite multi-dimensional radius".into(),
        ));
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&s, 0.5), 1.5);
        assert_eq!(quantile(&s, 1.0), 3.0);
    }

    #[test]
    fn bridge_mean_is_close_to_closed_form() {
        // E ∫|B| = sqrt(2/π) ∫ sqrt(u(1-u)) du = sqrt(2/π) π / 8.
        let cfg = BridgeMcConfig {
            paths: 20_000,
            steps: 200,
            seed: 7,
        };
        let s = bridge_abs_integral_samples(&cfg);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let exact = (2.0 / std::f64::consts::PI).sqrt() * std::f64::consts::PI / 8.0;
        assert!((mean - exact).abs() < 0.01 * exact, "{mean} vs {exact}");
    }

    #[test]
    fn multidim_radius_rejects_tiny_samples_and_low_dims() {
        assert!(adaptive_radius_multidim(1, 1.0, 100, 0.9).is_err());
        assert!(adaptive_radius_multidim(2, 1.0, 1, 0.9).is_err());
        assert!(adaptive_radius_multidim(5, 0.1, 1000, 0.9).is_ok());
    }
}
