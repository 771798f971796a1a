//! Path-dependent admissible action sets `𝒜_t(ω^t)`, their finite grids and
//! the clamp that carries an action admissible at one path to another.

use crate::error::{Error, Result};
use crate::geometry::{dist, lerp, shrink_factor, v_lambda, Point};
use std::sync::Arc;

const ADMISSIBLE_TOL: f64 = 1e-9;

/// A vector-valued function of the path with a declared Lipschitz constant.
#[derive(Clone)]
pub struct PathMap {
    pub f: Arc<dyn Fn(&[Point]) -> Vec<f64> + Send + Sync>,
    pub lipschitz: f64,
}

impl PathMap {
    pub fn new<F: Fn(&[Point]) -> Vec<f64> + Send + Sync + 'static>(f: F, lipschitz: f64) -> Self {
        Self {
            f: Arc::new(f),
            lipschitz,
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        Self::new(move |_| v.clone(), 0.0)
    }

    pub fn eval(&self, path: &[Point]) -> Vec<f64> {
        (self.f)(path)
    }
}

impl std::fmt::Debug for PathMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PathMap(lipschitz = {})", self.lipschitz)
    }
}

#[derive(Debug, Clone)]
pub enum ActionSpec {
    /// The box `[lo, hi]`, the same at every path. `resolution[j]` grid
    /// points are used along coordinate `j`.
    ConstantBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: Vec<usize>,
    },
    /// A fixed finite set.
    ConstantFinite(Vec<Point>),
    /// `{a ∈ A : |a - centre(ω)| <= radius(ω)}` for a closed box `A`
    /// (unbounded when `ambient` is `None`) containing every centre.
    Ball {
        center: PathMap,
        radius: PathMap,
        ambient: Option<(Vec<f64>, Vec<f64>)>,
        resolution: usize,
    },
    /// The box `[lower(ω), upper(ω)]` with `lower <= upper`.
    Box {
        lower: PathMap,
        upper: PathMap,
        resolution: Vec<usize>,
    },
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn product(axes: &[Vec<f64>]) -> Vec<Point> {
    let mut out: Vec<Point> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for p in &out {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

fn box_grid(lo: &[f64], hi: &[f64], res: &[usize]) -> Result<Vec<Point>> {
    if lo.len() != hi.len() || lo.len() != res.len() {
        return Err(Error::InvalidInput(
            "box bounds and resolution differ in length".into(),
        ));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::EmptyActionSet(format!(
            "lower {lo:?} exceeds upper {hi:?}"
        )));
    }
    let axes: Vec<Vec<f64>> = lo
        .iter()
        .zip(hi)
        .zip(res)
        .map(|((l, h), n)| linspace(*l, *h, (*n).max(1)))
        .collect();
    Ok(product(&axes))
}

fn in_box(a: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    a.len() == lo.len()
        && a.iter()
            .zip(lo.iter().zip(hi))
            .all(|(x, (l, h))| *x >= l - ADMISSIBLE_TOL && *x <= h + ADMISSIBLE_TOL)
}

/// Coordinatewise `a + (lo - a)^+ - (a - hi)^+`, evaluated as `min(max(a, lo), hi)`
/// so that clamped coordinates land exactly on the bounds.
pub fn clamp_box(a: &[f64], lo: &[f64], hi: &[f64]) -> Point {
    a.iter()
        .zip(lo.iter().zip(hi))
        .map(|(x, (l, h))| x.max(*l).min(*h))
        .collect()
}

impl ActionSpec {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpec::ConstantBox { lo, .. } => lo.len(),
            ActionSpec::ConstantFinite(pts) => pts.first().map_or(0, |p| p.len()),
            ActionSpec::Ball { center, .. } => center.eval(&[]).len(),
            ActionSpec::Box { lower, .. } => lower.eval(&[]).len(),
        }
    }

    /// Declared `L_{𝒜,t}`: `L_centre + L_radius` for balls, `2 m L` for
    /// boxes with `m` coordinates and `L` the larger bound constant.
    pub fn lipschitz(&self) -> f64 {
        match self {
            ActionSpec::ConstantBox { .. } | ActionSpec::ConstantFinite(_) => 0.0,
            ActionSpec::Ball { center, radius, .. } => center.lipschitz + radius.lipschitz,
            ActionSpec::Box { lower, upper, .. } => {
                2.0 * self.dim() as f64 * lower.lipschitz.max(upper.lipschitz)
            }
        }
    }

    /// Bounding box of the set at a path.
    pub fn bounding_box(&self, path: &[Point]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            ActionSpec::ConstantBox { lo, hi, .. } => Ok((lo.clone(), hi.clone())),
            ActionSpec::ConstantFinite(pts) => {
                let d = self.dim();
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for p in pts {
                    for j in 0..d {
                        lo[j] = lo[j].min(p[j]);
                        hi[j] = hi[j].max(p[j]);
                    }
                }
                Ok((lo, hi))
            }
            ActionSpec::Ball {
                center,
                radius,
                ambient,
                ..
            } => {
                let c = center.eval(path);
                let r = radius.eval(path)[0];
                let mut lo: Vec<f64> = c.iter().map(|x| x - r).collect();
                let mut hi: Vec<f64> = c.iter().map(|x| x + r).collect();
                if let Some((al, ah)) = ambient {
                    for j in 0..c.len() {
                        lo[j] = lo[j].max(al[j]);
                        hi[j] = hi[j].min(ah[j]);
                    }
                }
                Ok((lo, hi))
            }
            ActionSpec::Box { lower, upper, .. } => Ok((lower.eval(path), upper.eval(path))),
        }
    }

    pub fn contains(&self, path: &[Point], a: &[f64]) -> bool {
        match self {
            ActionSpec::ConstantBox { lo, hi, .. } => in_box(a, lo, hi),
            ActionSpec::ConstantFinite(pts) => pts.iter().any(|p| dist(p, a) <= ADMISSIBLE_TOL),
            ActionSpec::Ball {
                center,
                radius,
                ambient,
                ..
            } => {
                let c = center.eval(path);
                let r = radius.eval(path)[0];
                let amb = ambient.as_ref().map_or(true, |(l, h)| in_box(a, l, h));
                a.len() == c.len() && amb && dist(a, &c) <= r + ADMISSIBLE_TOL
            }
            ActionSpec::Box { lower, upper, .. } => in_box(a, &lower.eval(path), &upper.eval(path)),
        }
    }

    /// Admissible point close to `a`: a clamp for boxes, the nearest point
    /// for finite sets and a radial pull towards the centre for balls.
    pub fn project(&self, path: &[Point], a: &[f64]) -> Result<Point> {
        match self {
            ActionSpec::ConstantBox { lo, hi, .. } => Ok(clamp_box(a, lo, hi)),
            ActionSpec::ConstantFinite(pts) => pts
                .iter()
                .min_by(|x, y| dist(x, a).total_cmp(&dist(y, a)))
                .cloned()
                .ok_or_else(|| Error::EmptyActionSet("empty finite set".into())),
            ActionSpec::Ball {
                center,
                radius,
                ambient,
                ..
            } => {
                let c = center.eval(path);
                let r = radius.eval(path)[0];
                let b = match ambient {
                    Some((l, h)) => clamp_box(a, l, h),
                    None => a.to_vec(),
                };
                let d = dist(&b, &c);
                if d <= r {
                    Ok(b)
                } else {
                    Ok(lerp(&c, &b, r / d))
                }
            }
            ActionSpec::Box { lower, upper, .. } => {
                Ok(clamp_box(a, &lower.eval(path), &upper.eval(path)))
            }
        }
    }
}

/// Deterministic finite grid of `𝒜_t(ω^t)`. Box grids include every corner
/// (resolution at least 2); ball grids always include the centre.
pub fn grid(spec: &ActionSpec, path: &[Point]) -> Result<Vec<Point>> {
    let pts = match spec {
        ActionSpec::ConstantBox { lo, hi, resolution } => box_grid(lo, hi, resolution)?,
        ActionSpec::ConstantFinite(pts) => pts.clone(),
        ActionSpec::Box {
            lower,
            upper,
            resolution,
        } => box_grid(&lower.eval(path), &upper.eval(path), resolution)?,
        ActionSpec::Ball { resolution, .. } => {
            let c = match spec {
                ActionSpec::Ball { center, .. } => center.eval(path),
                _ => unreachable!(),
            };
            let (lo, hi) = spec.bounding_box(path)?;
            if lo.iter().zip(&hi).any(|(l, h)| l > h) {
                return Err(Error::EmptyActionSet("ball misses the ambient box".into()));
            }
            let mut pts: Vec<Point> = box_grid(&lo, &hi, &vec![*resolution; c.len()])?
                .into_iter()
                .filter(|a| spec.contains(path, a))
                .collect();
            if !pts.iter().any(|p| dist(p, &c) == 0.0) && spec.contains(path, &c) {
                pts.insert(0, c);
            }
            pts
        }
    };
    if pts.is_empty() {
        return Err(Error::EmptyActionSet(format!(
            "no grid points at stage {}",
            path.len()
        )));
    }
    Ok(pts)
}

/// Carries `action ∈ 𝒜_t(source)` to an admissible action at `target`,
/// moving it by at most `L_{𝒜,t} d(source, target)`.
pub fn clamp_to(
    spec: &ActionSpec,
    source: &[Point],
    target: &[Point],
    action: &[f64],
) -> Result<Point> {
    if !spec.contains(source, action) {
        return Err(Error::Inadmissible(format!(
            "{action:?} not in the action set at the source path"
        )));
    }
    match spec {
        ActionSpec::ConstantBox { .. } | ActionSpec::ConstantFinite(_) => Ok(action.to_vec()),
        ActionSpec::Box { lower, upper, .. } => {
            Ok(clamp_box(action, &lower.eval(target), &upper.eval(target)))
        }
        ActionSpec::Ball { center, radius, .. } => {
            let a = center.eval(source);
            let b = center.eval(target);
            let lambda = shrink_factor(radius.eval(source)[0], radius.eval(target)[0]);
            Ok(v_lambda(&a, &b, action, lambda))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_box_grid_has_corners() {
        let spec = ActionSpec::ConstantBox {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 2.0],
            resolution: vec![3, 2],
        };
        let g = grid(&spec, &[]).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.contains(&vec![-1.0, 0.0]) && g.contains(&vec![1.0, 2.0]));
    }

    #[test]
    fn ball_clamp_stays_inside() {
        let spec = ActionSpec::Ball {
            center: PathMap::new(|p: &[Point]| vec![p.last().map_or(0.0, |x| x[0])], 1.0),
            radius: PathMap::new(
                |p: &[Point]| vec![0.5 + 0.25 * p.last().map_or(0.0, |x| x[0])],
                0.25,
            ),
            ambient: None,
            resolution: 5,
        };
        let src = [vec![1.0]];
        let dst = [vec![0.0]];
        let a = clamp_to(&spec, &src, &dst, &[1.7]).unwrap();
        assert!(spec.contains(&dst, &a));
        assert!(dist(&a, &[1.7]) <= spec.lipschitz() * 1.0 + 1e-12);
        assert!(clamp_to(&spec, &src, &dst, &[3.0]).is_err());
    }

    #[test]
    fn empty_box_is_an_error() {
        let spec = ActionSpec::Box {
            lower: PathMap::constant(vec![1.0]),
            upper: PathMap::constant(vec![0.0]),
            resolution: vec![3],
        };
        assert!(matches!(grid(&spec, &[]), Err(Error::EmptyActionSet(_))));
    }
}
