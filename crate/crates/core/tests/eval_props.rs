mod common;

use proptest::prelude::*;

use common::permutation;
use toothmatch::eval::{center_error, mean_iou, overall_accuracy, pairwise_confusion, ToothPair};
use toothmatch::SceneFrame;

fn labelings(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..max).prop_flat_map(|m| {
        (
            prop::collection::vec(0u8..17, m),
            prop::collection::vec(0u8..17, m),
        )
    })
}

fn scene(diagonal: f64) -> SceneFrame {
    SceneFrame {
        bbox_min: [0.0; 3],
        bbox_max: [diagonal, 0.0, 0.0],
        diagonal,
        arch_axis: [1.0, 0.0, 0.0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scores_ignore_face_order((pred, gt) in labelings(60), seed in any::<u64>()) {
        let order = permutation(gt.len(), seed);
        let pp: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        let gp: Vec<u8> = order.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(overall_accuracy(&pred, &gt).unwrap(), overall_accuracy(&pp, &gp).unwrap());
        prop_assert_eq!(mean_iou(&pred, &gt).unwrap(), mean_iou(&pp, &gp).unwrap());
    }

    #[test]
    fn scores_are_fractions((pred, gt) in labelings(60)) {
        let oa = overall_accuracy(&pred, &gt).unwrap();
        let (miou, per_class) = mean_iou(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&oa) && (0.0..=1.0).contains(&miou));
        prop_assert!(per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        for pair in ToothPair::ALL {
            if let Some(rate) = pairwise_confusion(&pred, &gt, pair).unwrap() {
                prop_assert!((0.0..=1.0).contains(&rate));
            }
        }
    }

    #[test]
    fn perfect_and_disjoint_extremes(gt in prop::collection::vec(1u8..9, 1..50)) {
        prop_assert_eq!(overall_accuracy(&gt, &gt).unwrap(), 1.0);
        prop_assert_eq!(mean_iou(&gt, &gt).unwrap().0, 1.0);
        let other: Vec<u8> = gt.iter().map(|l| l + 8).collect();
        prop_assert_eq!(overall_accuracy(&other, &gt).unwrap(), 0.0);
        prop_assert_eq!(mean_iou(&other, &gt).unwrap().0, 0.0);
    }

    #[test]
    fn a_correct_non_pair_tooth_changes_nothing((pred, gt) in labelings(40), extra in 1usize..10, quadrant in any::<bool>()) {
        // offset 3 (canine) belongs to none of the pairs
        let canine = if quadrant { 3 } else { 11 };
        let (mut p2, mut g2) = (pred.clone(), gt.clone());
        p2.extend(std::iter::repeat_n(canine, extra));
        g2.extend(std::iter::repeat_n(canine, extra));
        for pair in ToothPair::ALL {
            prop_assert_eq!(pairwise_confusion(&pred, &gt, pair).unwrap(), pairwise_confusion(&p2, &g2, pair).unwrap());
        }
    }

    #[test]
    fn center_error_ignores_scale(
        pairs in prop::collection::vec((prop::array::uniform3(-50.0f64..50.0), prop::array::uniform3(-50.0f64..50.0)), 0..12),
        d in 1.0f64..200.0,
        k in -4i32..5,
    ) {
        let s = 2f64.powi(k);
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let scaled = |v: &Vec<[f64; 3]>| v.iter().map(|c| [c[0] * s, c[1] * s, c[2] * s]).collect::<Vec<_>>();
        let a = center_error(&pred, &gt, &scene(d)).unwrap();
        let b = center_error(&scaled(&pred), &scaled(&gt), &scene(d * s)).unwrap();
        prop_assert_eq!(a, b);
    }
}
