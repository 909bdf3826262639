mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_spec, Scan};
use toothmatch::cmr::{
    active_faces, attention_pool, derive_centers, pseudo_mask, pseudo_mask_loss, smooth_l1,
    DecoderWeights,
};
use toothmatch::encoder::{FaceFeatureSet, FeatureStage, FEATURE_CHANNELS};
use toothmatch::{Jaw, Matrix};

fn scan(seed: u64) -> Scan {
    Scan::generate(&small_spec(Jaw::Lower, &[3, 4, 5, 11], seed))
}

/// Logits with roughly `density` of the faces active in each row.
fn random_logits(rng: &mut ChaCha8Rng, rows: usize, faces: usize, density: f64) -> Matrix {
    let values = (0..rows * faces)
        .map(|_| {
            if rng.gen::<f64>() < density {
                rng.gen_range(0.1..6.0)
            } else {
                rng.gen_range(-6.0..-0.1)
            }
        })
        .collect();
    Matrix::from_vec(rows, faces, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooled_rows_are_convex_combinations(seed in any::<u64>(), faces in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FaceFeatureSet::new(FeatureStage::Fused128, Matrix::random_uniform(FEATURE_CHANNELS, faces, 5.0, &mut rng))
            .unwrap();
        let w = DecoderWeights::seeded_from(&mut rng, 8, 4, 6);
        let (_, inst) = attention_pool(&f, &w).unwrap();
        for c in 0..FEATURE_CHANNELS {
            let row = f.values.row(c);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for k in 0..inst.rows() {
                let v = inst.get(k, c);
                prop_assert!(v >= lo - 1e-12 * (1.0 + lo.abs()) && v <= hi + 1e-12 * (1.0 + hi.abs()));
            }
        }
    }

    #[test]
    fn derived_centers_are_active_faces(seed in any::<u64>(), density in 0.0f64..0.2) {
        let s = scan(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(&mut rng, 8, s.mesh.num_faces(), density);
        let d = derive_centers(&logits, &s.geom, &s.cmap, 0.5).unwrap();
        for i in 0..8 {
            let active = active_faces(logits.row(i), 0.5);
            prop_assert_eq!(d.valid[i], !active.is_empty());
            if let Some(p) = d.faces[i] {
                prop_assert!(active.contains(&p));
                prop_assert_eq!(d.centers3d[i], s.geom.centers[p]);
                prop_assert_eq!(d.centers2d[i], s.cmap.coords[p]);
            }
        }
    }

    #[test]
    fn pseudo_masks_cover_whole_classes(seed in any::<u64>(), n in 1usize..8) {
        let s = scan(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = s.mesh.face_labels();
        let centers: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..1023.0), rng.gen_range(0.0..1023.0)]).collect();
        let valid: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
        let pm = pseudo_mask(&centers, &valid, &s.cmap, labels).unwrap();
        for i in 0..n {
            let row = pm.rows.row(i);
            if !valid[i] {
                prop_assert!(row.iter().all(|&v| v == 0.0));
                continue;
            }
            let class = labels[row.iter().position(|&v| v == 1.0).unwrap()];
            for (p, &l) in labels.iter().enumerate() {
                prop_assert_eq!(row[p] == 1.0, l == class);
            }
        }
    }

    #[test]
    fn pseudo_mask_loss_is_nonnegative_and_vanishes(seed in any::<u64>()) {
        let s = scan(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen_range(0.0..1023.0), rng.gen_range(0.0..1023.0)]).collect();
        let pm = pseudo_mask(&centers, &[true, true, false, true], &s.cmap, s.mesh.face_labels()).unwrap();
        let random = random_logits(&mut rng, 4, s.mesh.num_faces(), 0.5);
        prop_assert!(pseudo_mask_loss(&random, &pm).unwrap() >= 0.0);
        let saturated = pm.rows.map(|t| if t > 0.5 { 25.0 } else { -25.0 });
        prop_assert!(pseudo_mask_loss(&saturated, &pm).unwrap() < 1e-4);
    }

    #[test]
    fn smooth_l1_is_continuous_at_the_transition(beta in 0.01f64..5.0, d in 0.0f64..10.0) {
        prop_assert!(smooth_l1(d, beta) >= 0.0);
        let eps = 1e-9 * beta;
        prop_assert!((smooth_l1(beta - eps, beta) - smooth_l1(beta + eps, beta)).abs() < 1e-8);
        prop_assert!(smooth_l1(d, beta) <= d.abs());
    }
}
