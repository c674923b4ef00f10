//! Property tests for the spec-level invariants that hold for arbitrary
//! inputs, driven by proptest.

use ndarray::{Array4, ArrayD, IxDyn};
use proptest::prelude::*;

use tamperloc_core::losses::{iou_f1, LossBreakdown};
use tamperloc_core::nn::{Fwd, ParamStore};
use tamperloc_core::tapi::modulate;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// F1 == 2*IoU/(1+IoU) and F1 >= IoU for every evaluated image.
    #[test]
    fn f1_iou_identity(probs in proptest::collection::vec(0.0f64..1.0, 64),
                       bits in proptest::collection::vec(any::<bool>(), 64),
                       threshold in 0.05f64..0.95) {
        let pred = Array4::from_shape_vec((1, 1, 8, 8), probs).unwrap();
        let target = Array4::from_shape_vec(
            (1, 1, 8, 8),
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let r = iou_f1(&pred, &target, threshold, None);
        let identity = 2.0 * r.iou / (1.0 + r.iou);
        prop_assert!((r.f1 - identity).abs() < 1e-12);
        prop_assert!(r.f1 >= r.iou - 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.iou));
    }

    /// Binarized positive-pixel count is non-increasing in the threshold.
    #[test]
    fn threshold_monotone(probs in proptest::collection::vec(0.0f64..1.0, 64)) {
        let mut prev = usize::MAX;
        for i in 0..=10 {
            let thr = i as f64 / 10.0;
            let count = probs.iter().filter(|&&p| p >= thr).count();
            prop_assert!(count <= prev);
            prev = count;
        }
    }

    /// FiLM modulation agrees with the explicit per-token loop everywhere.
    #[test]
    fn modulate_matches_loop(zd in proptest::collection::vec(-3.0f64..3.0, 2 * 3 * 4),
                             gd in proptest::collection::vec(-2.0f64..2.0, 2 * 4),
                             bd in proptest::collection::vec(-2.0f64..2.0, 2 * 4)) {
        let z = ArrayD::from_shape_vec(IxDyn(&[2, 3, 4]), zd).unwrap();
        let gamma = ArrayD::from_shape_vec(IxDyn(&[2, 4]), gd).unwrap();
        let beta = ArrayD::from_shape_vec(IxDyn(&[2, 4]), bd).unwrap();
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let zv = f.tape.constant(z.clone());
        let gv = f.tape.constant(gamma.clone());
        let bv = f.tape.constant(beta.clone());
        let out = modulate(&mut f, zv, gv, bv);
        let ov = f.tape.val(out);
        for b in 0..2 {
            for n in 0..3 {
                for d in 0..4 {
                    let want = gamma[[b, d]] * z[[b, n, d]] + beta[[b, d]];
                    prop_assert_eq!(ov[[b, n, d]], want);
                }
            }
        }
    }

    /// Patchify/unpatchify is an exact bijection for any image content.
    #[test]
    fn patchify_bijection(data in proptest::collection::vec(-10.0f64..10.0, 3 * 16 * 16)) {
        let img = ArrayD::from_shape_vec(IxDyn(&[1, 3, 16, 16]), data).unwrap();
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let x = f.tape.constant(img.clone());
        let p = f.tape.patchify(x, 4);
        let back = f.tape.unpatchify(p, 4, 3, 16, 16);
        prop_assert_eq!(f.tape.val(back), &img);
    }

    /// The loss decomposition is reproducible from its parts.
    #[test]
    fn loss_breakdown_consistent(l_crs in 0.0f64..5.0, l_ref in 0.0f64..5.0, alpha in 0.0f64..1.0) {
        let b = LossBreakdown::new(l_crs, l_ref, alpha);
        prop_assert_eq!(b.l_total, b.l_ref + b.alpha * b.l_crs);
    }
}
