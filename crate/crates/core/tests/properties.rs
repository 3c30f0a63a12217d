use corrfuse::math::{row_softmax, Matrix};
use corrfuse::metrics::{add, add_s, auc, ObjectModel};
use corrfuse::pose::{Quaternion, RigidTransform};
use corrfuse::synth::{make_model, Shape};
use proptest::prelude::*;
use std::sync::OnceLock;

fn pose() -> impl Strategy<Value = RigidTransform> {
    (
        prop::array::uniform3(-1.0..1.0f64),
        -3.1..3.1f64,
        prop::array::uniform3(-0.5..0.5f64),
    )
        .prop_filter("axis too short", |(a, _, _)| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(axis, angle, t)| RigidTransform::new(Quaternion::from_axis_angle(axis, angle), t))
}

fn lshape() -> &'static ObjectModel {
    static MODEL: OnceLock<ObjectModel> = OnceLock::new();
    MODEL.get_or_init(|| make_model(Shape::DEFAULT_LSHAPE, 120, 9).unwrap())
}

fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn compose_matches_sequential_application(a in pose(), b in pose(), p in prop::array::uniform3(-0.2..0.2f64)) {
        let direct = a.compose(&b).apply_point(p);
        let seq = a.apply_point(b.apply_point(p));
        prop_assert!(close(direct, seq, 1e-12));
    }

    #[test]
    fn inverse_undoes_the_transform(a in pose(), p in prop::array::uniform3(-0.2..0.2f64)) {
        prop_assert!(close(a.inverse().apply_point(a.apply_point(p)), p, 1e-12));
    }

    #[test]
    fn array_round_trip_is_exact(a in pose()) {
        prop_assert_eq!(RigidTransform::from_array(a.to_array()).unwrap(), a);
    }

    #[test]
    fn add_s_never_exceeds_add(pred in pose(), gt in pose()) {
        let m = lshape();
        let (d, ds) = (add(m, &pred, &gt), add_s(m, &pred, &gt));
        prop_assert!(ds >= 0.0 && ds <= d + 1e-15, "add_s {} add {}", ds, d);
    }

    #[test]
    fn distances_are_invariant_to_a_common_motion(pred in pose(), gt in pose(), g in pose()) {
        let m = lshape();
        let (gp, gg) = (g.compose(&pred), g.compose(&gt));
        prop_assert!((add(m, &gp, &gg) - add(m, &pred, &gt)).abs() < 1e-12);
        prop_assert!((add_s(m, &gp, &gg) - add_s(m, &pred, &gt)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0..30.0f64, 12)) {
        let y = row_softmax(&Matrix::from_vec(3, 4, vals).unwrap()).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_is_order_independent_and_bounded(mut d in prop::collection::vec(0.0..0.3f64, 1..40)) {
        let a = auc(&d, 0.1).unwrap();
        d.reverse();
        prop_assert_eq!(auc(&d, 0.1).unwrap(), a);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}
