//! Euclidean helpers and the three-point map used to move points and
//! measures between nested balls.

/// A point of `R^d`.
pub type Point = Vec<f64>;

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Sum of stagewise Euclidean distances between two paths of equal length.
pub fn path_dist(p: &[Point], q: &[Point]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(a, b)| dist(a, b)).sum()
}

/// Convex combination `(1 - s) x + s y`.
pub fn lerp(x: &[f64], y: &[f64], s: f64) -> Point {
    x.iter()
        .zip(y)
        .map(|(a, b)| (1.0 - s) * a + s * b)
        .collect()
}

/// Two-point map `v2(a, b, c)`.
///
/// Returns `a` when the three points coincide and otherwise the point
/// `r c + (1 - r) b` with `r = |c - a| / (|c - a| + |b - a|)`. It satisfies
/// `|v2 - c| <= |b - a|` and `|v2 - b| <= |c - a|`.
pub fn v2(a: &[f64], b: &[f64], c: &[f64]) -> Point {
    let ca = dist(c, a);
    let ba = dist(b, a);
    if ca + ba == 0.0 {
        return a.to_vec();
    }
    let r = ca / (ca + ba);
    lerp(b, c, r)
}

/// Three-point map `v_lambda(a, b, c) = v2(a, b, lambda a + (1 - lambda) c)`.
///
/// With `lambda` in `[0, 1]`:
/// `|v - c| <= |b - a| + lambda |c - a|` and `|v - b| <= (1 - lambda) |c - a|`.
/// The result is a convex combination of `a`, `b` and `c`.
pub fn v_lambda(a: &[f64], b: &[f64], c: &[f64], lambda: f64) -> Point {
    let shrunk = lerp(c, a, lambda);
    v2(a, b, &shrunk)
}

/// Shrink factor used when moving from a ball of radius `eps1` into one of
/// radius `eps2`.
pub fn shrink_factor(eps1: f64, eps2: f64) -> f64 {
    if eps1 <= 0.0 {
        0.0
    } else {
        ((eps1 - eps2).max(0.0) / eps1).min(1.0)
    }
}

/// Lexicographic comparison of points, treating NaN as equal.
pub fn lex_cmp(x: &[f64], y: &[f64]) -> std::cmp::Ordering {
    for (a, b) in x.iter().zip(y) {
        match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    x.len().cmp(&y.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v2_coincident_points() {
        assert_eq!(v2(&[1.0], &[1.0], &[1.0]), vec![1.0]);
    }

    #[test]
    fn v_lambda_inequalities_hold_on_a_line() {
        let a = [0.0];
        let b = [2.0];
        let c = [1.0];
        let v = v_lambda(&a, &b, &c, 0.0);
        assert!((v[0] - 5.0 / 3.0).abs() < 1e-15);
        let v = v_lambda(&a, &b, &c, 0.5);
        assert!(dist(&v, &c) <= dist(&b, &a) + 0.5 * dist(&c, &a) + 1e-15);
        assert!(dist(&v, &b) <= 0.5 * dist(&c, &a) + 1e-15);
    }

    #[test]
    fn shrink_factor_edge_cases() {
        assert_eq!(shrink_factor(0.0, 1.0), 0.0);
        assert_eq!(shrink_factor(1.0, 2.0), 0.0);
        assert!((shrink_factor(2.0, 0.5) - 0.75).abs() < 1e-15);
    }
}
