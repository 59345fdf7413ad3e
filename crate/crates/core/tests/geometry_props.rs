use pehcm::geometry::{
    clip_to_ball, exp_map, hyperplane_distance, mobius_add, poincare_distance, Curvature, PoincarePoint, BALL_EPS,
};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn curvature() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1e-3), Just(0.1), Just(1.0), Just(4.0)]
}

/// A point strictly inside the ball at no more than 90% of the radius.
fn ball_point(dim: usize, c: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, dim), 0.0f64..0.9).prop_map(move |(dir, r)| {
        let n = norm(&dir);
        if n < 1e-9 {
            return vec![0.0; dir.len()];
        }
        dir.iter().map(|v| v / n * r / c.sqrt()).collect()
    })
}

fn triple() -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..9, curvature()).prop_flat_map(|(d, c)| (Just(c), ball_point(d, c), ball_point(d, c), ball_point(d, c)))
}

fn pt(v: &[f64], c: f64) -> PoincarePoint {
    PoincarePoint::new(v.to_vec(), Curvature::new(c).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn exp_map_is_conformal_and_bounded(
        c in curvature(),
        x in prop::collection::vec(-20.0f64..20.0, 2..16),
        y in prop::collection::vec(-20.0f64..20.0, 16),
    ) {
        prop_assume!(norm(&x) > 1e-6);
        let y = &y[..x.len()];
        prop_assume!(norm(y) > 1e-6);
        let k = Curvature::new(c).unwrap();
        let ex = exp_map(&x, k).unwrap();
        let ey = exp_map(y, k).unwrap();
        prop_assert!((cos(ex.coords(), ey.coords()) - cos(&x, y)).abs() < 1e-9);
        prop_assert!(c.sqrt() * ex.norm() < 1.0);
        let expected = (c.sqrt() * norm(&x)).tanh().min(1.0 - BALL_EPS);
        prop_assert!((c.sqrt() * ex.norm() - expected).abs() < 1e-12);
        for (a, b) in ex.coords().iter().zip(&x) {
            prop_assert!((a / ex.norm() - b / norm(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn mobius_group_laws((c, u, v, _) in triple()) {
        let (u, v) = (pt(&u, c), pt(&v, c));
        let zero = PoincarePoint::origin(u.dim(), u.curvature());
        let id = mobius_add(&zero, &v).unwrap();
        for (a, b) in id.coords().iter().zip(v.coords()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let inv = mobius_add(&u, &u.neg()).unwrap();
        prop_assert!(inv.norm() < 1e-12);
        let back = mobius_add(&u.neg(), &mobius_add(&u, &v).unwrap()).unwrap();
        for (a, b) in back.coords().iter().zip(v.coords()) {
            prop_assert!((a - b).abs() * c.sqrt() < 1e-9);
        }
    }

    #[test]
    fn distance_is_a_symmetric_premetric((c, u, v, _) in triple()) {
        let (u, v) = (pt(&u, c), pt(&v, c));
        let d = poincare_distance(&u, &v).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - poincare_distance(&v, &u).unwrap()).abs() <= 1e-9 * d.max(1.0));
        prop_assert_eq!(poincare_distance(&u, &u).unwrap(), 0.0);
    }

    #[test]
    fn hyperplane_distance_ignores_normal_scale_and_sign(
        (c, z, p, a) in triple(),
        t in 0.01f64..100.0,
    ) {
        prop_assume!(norm(&a) > 1e-3);
        let (z, p) = (pt(&z, c), pt(&p, c));
        let d = hyperplane_distance(&z, &p, &a).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * t).collect();
        let flipped: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!(d >= 0.0);
        prop_assert!((hyperplane_distance(&z, &p, &scaled).unwrap() - d).abs() <= 1e-9 * d.max(1.0));
        prop_assert!((hyperplane_distance(&z, &p, &flipped).unwrap() - d).abs() <= 1e-12 * d.max(1.0));
    }

    #[test]
    fn clipping_never_leaves_the_ball(c in curvature(), v in prop::collection::vec(-1e3f64..1e3, 1..10)) {
        let k = Curvature::new(c).unwrap();
        let z = clip_to_ball(&v, k);
        prop_assert!(z.norm() <= (1.0 - BALL_EPS) / c.sqrt() * (1.0 + 1e-15));
        if c.sqrt() * norm(&v) < 1.0 - BALL_EPS {
            prop_assert_eq!(z.coords(), &v[..]);
        }
    }
}

#[test]
fn tiny_curvature_is_nearly_euclidean() {
    let k = Curvature::new(1e-12).unwrap();
    for x in [vec![10.0, 0.0], vec![-3.0, 4.0, 5.0], vec![0.25; 8]] {
        let z = exp_map(&x, k).unwrap();
        let err: f64 = z.coords().iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn hyperplane_through_origin_agrees_with_point_distance() {
    let c = Curvature::new(1.0).unwrap();
    let z = pt(&[0.5, 0.0], 1.0);
    let o = PoincarePoint::origin(2, c);
    let dh = hyperplane_distance(&z, &o, &[1.0, 0.0]).unwrap();
    let dp = poincare_distance(&o, &z).unwrap();
    assert!((dh - dp).abs() < 1e-12);
    assert!((dh - (4.0f64 / 3.0).asinh()).abs() < 1e-12);
    // A point on the hyperplane.
    assert_eq!(hyperplane_distance(&pt(&[0.0, 0.3], 1.0), &o, &[1.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn curvature_mismatch_is_a_contract_error() {
    let u = pt(&[0.1, 0.0], 1.0);
    let v = pt(&[0.1, 0.0], 0.5);
    assert!(matches!(mobius_add(&u, &v), Err(pehcm::Error::Contract(_))));
}
