use proptest::prelude::*;
use robust_dp::controls::{clamp_to, grid, ActionSpec, PathMap};

fn unit_box(resolution: usize) -> ActionSpec {
    ActionSpec::ConstantBox {
        lo: vec![0.0],
        hi: vec![1.0],
        resolution: vec![resolution],
    }
}

/// Box `[l(ω), l(ω) + 1]` per coordinate with `l(ω) = slope * last state`.
fn sliding_box(dim: usize, slope: f64) -> ActionSpec {
    let lower = move |p: &[Vec<f64>]| -> Vec<f64> {
        let x = p.last().map(|x| x[0]).unwrap_or(0.0);
        vec![slope * x; dim]
    };
    let upper = move |p: &[Vec<f64>]| -> Vec<f64> { lower(p).iter().map(|l| l + 1.0).collect() };
    ActionSpec::Box {
        lower: PathMap::new(lower, slope.abs()),
        upper: PathMap::new(upper, slope.abs()),
        resolution: vec![4; dim],
    }
}

#[test]
fn grid_examples() {
    assert_eq!(grid(&unit_box(3), &[]).unwrap(), vec![vec![0.0], vec![0.5], vec![1.0]]);
    let finite = vec![vec![-1.0], vec![0.0], vec![1.0]];
    assert_eq!(grid(&ActionSpec::ConstantFinite(finite.clone()), &[]).unwrap(), finite);
    let ball = ActionSpec::Ball {
        center: PathMap::constant(vec![0.0]),
        radius: PathMap::constant(vec![1.0]),
        ambient: None,
        resolution: 5,
    };
    let pts: Vec<f64> = grid(&ball, &[]).unwrap().into_iter().map(|p| p[0]).collect();
    assert_eq!(pts, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
}

#[test]
fn clamp_examples() {
    let spec = ActionSpec::Box {
        lower: PathMap::new(|p| vec![if p.is_empty() { 0.0 } else { 0.5 }], 0.0),
        upper: PathMap::constant(vec![1.0]),
        resolution: vec![3],
    };
    assert_eq!(clamp_to(&spec, &[], &[vec![0.0]], &[0.2]).unwrap(), vec![0.5]);
    let same = vec![vec![0.3]];
    let b = sliding_box(1, 0.7);
    assert_eq!(clamp_to(&b, &same, &same, &[0.5]).unwrap(), vec![0.5]);
}

fn path(xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter().map(|&x| vec![x]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn grids_lie_inside_the_action_set(x in -2.0..2.0f64, slope in -1.5..1.5f64, dim in 1usize..=2) {
        let spec = sliding_box(dim, slope);
        let p = path(&[x]);
        for a in grid(&spec, &p).unwrap() {
            prop_assert!(spec.contains(&p, &a));
        }
    }

    #[test]
    fn clamping_is_idempotent_and_lipschitz(
        xs in prop::collection::vec(-2.0..2.0f64, 2),
        ys in prop::collection::vec(-2.0..2.0f64, 2),
        slope in -1.5..1.5f64,
        dim in 1usize..=2,
        k in 0usize..16,
    ) {
        let spec = sliding_box(dim, slope);
        let (src, dst) = (path(&xs), path(&ys));
        let pts = grid(&spec, &src).unwrap();
        let a = &pts[k % pts.len()];
        let out = clamp_to(&spec, &src, &dst, a).unwrap();
        prop_assert!(spec.contains(&dst, &out));
        prop_assert_eq!(clamp_to(&spec, &dst, &dst, &out).unwrap(), out.clone());
        let moved = a.iter().zip(&out).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let steps: f64 = xs.iter().zip(&ys).map(|(u, v)| (u - v).abs()).sum();
        prop_assert!(moved <= 2.0 * dim as f64 * slope.abs() * steps + 1e-12);
    }
}
