mod common;

use proptest::prelude::*;
use proptest::sample::subsequence;

use common::{permutation, small_spec};
use toothmatch::io::{load_mesh, save_mesh, Tensor};
use toothmatch::mesh::{compute_geometry, scene_frame};
use toothmatch::synthgen::generate_arch;
use toothmatch::{Jaw, LabeledMesh, Matrix};

fn jaw() -> impl Strategy<Value = Jaw> {
    prop_oneof![Just(Jaw::Upper), Just(Jaw::Lower)]
}

fn arch() -> impl Strategy<Value = LabeledMesh> {
    (
        jaw(),
        subsequence((1..=16u8).collect::<Vec<_>>(), 1..=5),
        any::<u64>(),
    )
        .prop_map(|(jaw, teeth, seed)| generate_arch(&small_spec(jaw, &teeth, seed)).unwrap().0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diagonal_scales_with_the_mesh(mesh in arch(), s in 0.05f64..20.0) {
        let d = scene_frame(&mesh).unwrap().diagonal;
        let ds = scene_frame(&mesh.scaled(s).unwrap()).unwrap().diagonal;
        prop_assert!((ds - s * d).abs() <= 1e-12 * s * d);
    }

    #[test]
    fn frame_and_geometry_invariants(mesh in arch()) {
        let frame = scene_frame(&mesh).unwrap();
        let axis = frame.arch_axis;
        prop_assert!(((axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt() - 1.0).abs() < 1e-9);
        prop_assert!(frame.diagonal > 0.0);
        let geom = compute_geometry(&mesh).unwrap();
        for i in 0..mesh.num_faces() {
            let n = geom.normals[i];
            prop_assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-6);
            let [a, b, c] = mesh.face_vertices(i);
            for k in 0..3 {
                prop_assert_eq!(geom.centers[i][k], (a[k] + b[k] + c[k]) / 3.0);
            }
        }
    }

    #[test]
    fn geometry_follows_face_order(mesh in arch(), seed in any::<u64>()) {
        let order = permutation(mesh.num_faces(), seed);
        let g = compute_geometry(&mesh).unwrap();
        let gp = compute_geometry(&mesh.permute_faces(&order).unwrap()).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(gp.centers[j], g.centers[i]);
            prop_assert_eq!(gp.normals[j], g.normals[i]);
        }
        prop_assert_eq!(gp.vertex_normals, g.vertex_normals);
    }

    #[test]
    fn obj_and_ply_round_trip(mesh in arch(), ply in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if ply { "scan.ply" } else { "scan.obj" });
        let side = dir.path().join("scan.json");
        save_mesh(&path, &side, &mesh).unwrap();
        let back = load_mesh(&path, &side).unwrap();
        prop_assert_eq!(back.faces(), mesh.faces());
        prop_assert_eq!(back.face_labels(), mesh.face_labels());
        prop_assert_eq!(back.face_instance_ids(), mesh.face_instance_ids());
        prop_assert_eq!(back.jaw(), mesh.jaw());
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= f32::EPSILON as f64 * b[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn tensor_bytes_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::random_uniform(rows, cols, 100.0, &mut rng);
        let t = Tensor::from_matrix(&m);
        let back = Tensor::decode(&t.encode(), "round trip").unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_matrix().unwrap(), m.map(|v| v as f32 as f64));
    }
}
