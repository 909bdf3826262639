mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{small_spec, Scan};
use toothmatch::cmr::DEFAULT_THRESHOLD;
use toothmatch::fhm::{fhm_match, MatchConfig};
use toothmatch::losses::{evaluate_losses, focal_loss, mask_loss, objectness_loss, total_loss};
use toothmatch::synthgen::{perfect_prediction, perturb, PerturbSpec};
use toothmatch::{Jaw, Matrix};

fn cross_entropy(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + z.ln() - row[y]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn focal_reduces_to_cross_entropy(rows in prop::collection::vec((prop::collection::vec(-12.0f64..12.0, 17), 0usize..17), 1..6)) {
        let logits = Matrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()).unwrap();
        let labels: Vec<u8> = rows.iter().map(|r| r.1 as u8).collect();
        let want = rows.iter().map(|(r, y)| cross_entropy(r, *y)).sum::<f64>() / rows.len() as f64;
        prop_assert!((focal_loss(&logits, &labels, 0.0, 1.0).unwrap() - want).abs() <= 1e-9);
        prop_assert!(focal_loss(&logits, &labels, 2.0, 0.25).unwrap() >= 0.0);
    }

    #[test]
    fn terms_are_nonnegative(seed in any::<u64>(), n in 1usize..5, m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Matrix::random_uniform(n, m, 8.0, &mut rng);
        let targets = Matrix::random_uniform(n, m, 1.0, &mut rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        prop_assert!(mask_loss(&logits, &targets).unwrap() >= 0.0);
        let soft: Vec<f64> = targets.row(0).iter().map(|t| 0.3 + 0.4 * t).collect();
        prop_assert!(objectness_loss(logits.row(0), &soft).unwrap() >= 0.0);
    }

    #[test]
    fn total_is_the_affine_combination(parts in prop::array::uniform5(0.0f64..10.0)) {
        let b = total_loss(parts[0], parts[1], parts[2], parts[3], parts[4]).unwrap();
        let main = parts[0] + 2.0 * parts[1] + parts[2] + 0.5 * parts[3];
        prop_assert!((b.l_main - main).abs() <= 1e-9);
        prop_assert!((b.l_total - main - 0.2 * parts[4]).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn evaluated_losses_are_nonnegative(seed in any::<u64>(), flips in 0.0f64..0.2) {
        let scan = Scan::generate(&small_spec(Jaw::Upper, &[1, 2, 3, 9], seed));
        let perfect = perfect_prediction(&scan.gt, &scan.geom, &scan.cmap).unwrap();
        let spec = PerturbSpec { mask_flip_rate: flips, center_drift: 0.02, class_confusion: None, seed };
        let pred = perturb(&perfect, &spec, &scan.scene, &scan.geom, &scan.cmap).unwrap();
        if pred.num_valid() == 0 {
            return Ok(());
        }
        let (asg, _) = fhm_match(&pred, &scan.gt, &scan.scene, &MatchConfig::default()).unwrap();
        let b = evaluate_losses(&pred, &scan.gt, &asg, &scan.cmap, DEFAULT_THRESHOLD).unwrap();
        for v in [b.l_cls, b.l_mask, b.l_obj, b.l_cent, b.l_pm, b.l_main, b.l_total] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        let p = evaluate_losses(&perfect, &scan.gt, &fhm_match(&perfect, &scan.gt, &scan.scene, &MatchConfig::default()).unwrap().0, &scan.cmap, DEFAULT_THRESHOLD).unwrap();
        for v in [p.l_cls, p.l_mask, p.l_obj, p.l_cent, p.l_pm] {
            prop_assert!(v < 1e-4);
        }
    }
}
