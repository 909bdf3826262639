mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_knn, noisy_mesh, permutation, small_spec, Scan};
use toothmatch::encoder::{
    attention_weights, build_input_features, build_knn, encode, knn_points, EncoderWeights,
    KnnBasis, KnnGraph, STREAM_CHANNELS,
};
use toothmatch::mesh::compute_geometry;
use toothmatch::{Jaw, Matrix, Vec3};

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 2..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_full_sort(points in cloud(120), k_frac in 0.0f64..1.0) {
        let k = 1 + ((points.len() - 2) as f64 * k_frac) as usize;
        let got = knn_points(&points, k).unwrap();
        prop_assert_eq!(&got, &brute_force_knn(&points, k));
        for (i, row) in got.chunks(k).enumerate() {
            prop_assert!(row.iter().all(|&j| j != i && j < points.len()));
        }
    }

    #[test]
    fn knn_rejects_k_at_least_m(points in cloud(20)) {
        prop_assert!(knn_points(&points, points.len()).is_err());
    }

    #[test]
    fn attention_is_a_distribution(seed in any::<u64>(), m in 4usize..40, k_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + ((m - 2) as f64 * k_frac) as usize;
        let features = Matrix::random_uniform(STREAM_CHANNELS, m, 2.0, &mut rng);
        let points: Vec<Vec3> = (0..m).map(|p| [features.get(0, p), features.get(1, p), features.get(2, p)]).collect();
        let graph = KnnGraph { k, neighbors: knn_points(&points, k).unwrap(), built_on: KnnBasis::Coordinates };
        let weights = EncoderWeights::seeded(seed, 16);
        let layer = &weights.coord.stages[0];
        for face in 0..m {
            let alpha = attention_weights(&features, &graph, layer, face).unwrap();
            for c in 0..alpha.cols() {
                let col = alpha.column(c);
                prop_assert!(col.iter().all(|&a| a >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn input_features_translate(seed in any::<u64>(), t in prop::array::uniform3(-30.0f64..30.0)) {
        let (mesh, _) = toothmatch::synthgen::generate_arch(&small_spec(Jaw::Lower, &[4, 5], seed)).unwrap();
        let moved = mesh.translated(t).unwrap();
        let a = build_input_features(&mesh, &compute_geometry(&mesh).unwrap()).unwrap().values;
        let b = build_input_features(&moved, &compute_geometry(&moved).unwrap()).unwrap().values;
        for p in 0..mesh.num_faces() {
            for c in 0..12 {
                prop_assert!((b.get(c, p) - a.get(c, p) - t[c % 3]).abs() <= 1e-9);
            }
            for c in 12..24 {
                prop_assert!((b.get(c, p) - a.get(c, p)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn knn_graph_is_well_formed(seed in any::<u64>(), k in 1usize..40) {
        let scan = Scan::generate(&small_spec(Jaw::Upper, &[1, 9], seed));
        for basis in [KnnBasis::Coordinates, KnnBasis::Normals] {
            let g = build_knn(&scan.geom, k, basis).unwrap();
            prop_assert_eq!(g.neighbors.len(), k * scan.geom.num_faces());
            for i in 0..g.num_points() {
                prop_assert!(g.of(i).iter().all(|&j| j != i && j < g.num_points()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn encode_is_equivariant_to_face_order(seed in any::<u64>()) {
        let spec = small_spec(Jaw::Upper, &[2, 3, 10], seed);
        let scan = Scan::from_mesh(noisy_mesh(&spec, 0.02, seed ^ 0x55));
        let order = permutation(scan.mesh.num_faces(), seed);
        let permuted = Scan::from_mesh(scan.mesh.permute_faces(&order).unwrap());
        let weights = EncoderWeights::seeded(seed, 16);
        let f = encode(&scan.mesh, &scan.geom, &weights, 16).unwrap();
        let fp = encode(&permuted.mesh, &permuted.geom, &weights, 16).unwrap();
        prop_assert_eq!(fp.values, f.values.select_columns(&order));
        prop_assert!(f.values.is_finite());
    }
}
