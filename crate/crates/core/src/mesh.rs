//! Labeled triangle meshes, per-face geometry and the scene frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Squared-area threshold below which a face counts as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Largest face count accepted at ingestion.
pub const MAX_FACES: usize = 200_000;

/// Number of segmentation classes: gingiva plus 16 teeth.
pub const NUM_CLASSES: usize = 17;

pub const GINGIVA: u8 = 0;

pub const BACKGROUND_INSTANCE: i32 = -1;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jaw {
    Upper,
    Lower,
}

/// Triangle mesh with per-face class labels and instance ids.
///
/// Construction validates every invariant; the fields are read-only
/// afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_labels: Vec<u8>,
    face_instance_ids: Vec<i32>,
    jaw: Jaw,
}

impl LabeledMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        face_labels: Vec<u8>,
        face_instance_ids: Vec<i32>,
        jaw: Jaw,
    ) -> Result<Self> {
        let m = faces.len();
        if face_labels.len() != m {
            return Err(Error::LabelLengthMismatch {
                field: "face_labels",
                faces: m,
                len: face_labels.len(),
            });
        }
        if face_instance_ids.len() != m {
            return Err(Error::LabelLengthMismatch {
                field: "face_instance_ids",
                faces: m,
                len: face_instance_ids.len(),
            });
        }
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite("vertex coordinates"));
        }
        for (i, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::InvalidFace {
                    face: i,
                    message: format!(
                        "vertex index {bad} out of range ({} vertices)",
                        vertices.len()
                    ),
                });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidFace {
                    face: i,
                    message: "repeated vertex index".into(),
                });
            }
            let sq = squared_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
            if !(sq > DEGENERATE_EPS) {
                return Err(Error::DegenerateFace {
                    face: i,
                    squared_area: sq,
                });
            }
        }

        let mut instance_label: std::collections::HashMap<i32, u8> = Default::default();
        for (face, (&label, &inst)) in face_labels.iter().zip(&face_instance_ids).enumerate() {
            if label as usize >= NUM_CLASSES {
                return Err(Error::InvalidLabel(label as i64));
            }
            if label == GINGIVA && inst != BACKGROUND_INSTANCE {
                return Err(Error::InvalidFace {
                    face,
                    message: format!("gingiva face carries instance id {inst}"),
                });
            }
            if label != GINGIVA && inst < 0 {
                return Err(Error::InvalidFace {
                    face,
                    message: format!("tooth face (class {label}) carries instance id {inst}"),
                });
            }
            if inst >= 0 {
                let first = *instance_label.entry(inst).or_insert(label);
                if first != label {
                    return Err(Error::InconsistentInstance {
                        instance: inst,
                        first,
                        second: label,
                    });
                }
            }
        }

        Ok(Self {
            vertices,
            faces,
            face_labels,
            face_instance_ids,
            jaw,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_labels(&self) -> &[u8] {
        &self.face_labels
    }

    pub fn face_instance_ids(&self) -> &[i32] {
        &self.face_instance_ids
    }

    pub fn jaw(&self) -> Jaw {
        self.jaw
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0]],
            self.vertices[f[1]],
            self.vertices[f[2]],
        ]
    }

    /// Applies `f` to every vertex, keeping topology and labels.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self> {
        Self::new(
            self.vertices.iter().map(|&v| f(v)).collect(),
            self.faces.clone(),
            self.face_labels.clone(),
            self.face_instance_ids.clone(),
            self.jaw,
        )
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        self.map_vertices(|v| [v[0] * s, v[1] * s, v[2] * s])
    }

    pub fn translated(&self, t: Vec3) -> Result<Self> {
        self.map_vertices(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]])
    }

    /// Reorders faces so that new face `j` is old face `order[j]`.
    pub fn permute_faces(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.num_faces() {
            return Err(Error::shape(
                "LabeledMesh::permute_faces",
                self.num_faces(),
                order.len(),
            ));
        }
        Self::new(
            self.vertices.clone(),
            order.iter().map(|&i| self.faces[i]).collect(),
            order.iter().map(|&i| self.face_labels[i]).collect(),
            order.iter().map(|&i| self.face_instance_ids[i]).collect(),
            self.jaw,
        )
    }
}

/// Per-face centers and normals plus per-vertex normals.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub centers: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub vertex_normals: Vec<Vec3>,
}

impl FaceGeometry {
    pub fn num_faces(&self) -> usize {
        self.centers.len()
    }
}

/// Axis-aligned bounds of the scan and the mesiodistal axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub diagonal: f64,
    pub arch_axis: Vec3,
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn squared_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let n = cross(&sub(b, a), &sub(c, a));
    (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) / 4.0
}

/// Face centers, winding-oriented face normals and area-weighted vertex normals.
pub fn compute_geometry(mesh: &LabeledMesh) -> Result<FaceGeometry> {
    let m = mesh.num_faces();
    let per_face: Vec<(Vec3, Vec3, Vec3)> = par::map_range(m, |i| {
        let [a, b, c] = mesh.face_vertices(i);
        let center = [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ];
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        (center, n, n)
    });

    let mut centers = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    let mut incident: Vec<Vec<Vec3>> = vec![Vec::new(); mesh.vertices().len()];
    for (i, (center, raw, _)) in per_face.into_iter().enumerate() {
        let len = norm(&raw);
        let sq = len * len / 4.0;
        if !(sq > DEGENERATE_EPS) {
            return Err(Error::DegenerateFace {
                face: i,
                squared_area: sq,
            });
        }
        // |raw| is twice the face area, so summing raw vectors area-weights them.
        for &v in &mesh.faces()[i] {
            incident[v].push(raw);
        }
        centers.push(center);
        normals.push([raw[0] / len, raw[1] / len, raw[2] / len]);
    }

    // summed in value order, so reordering faces leaves the bits unchanged
    let vertex_normals = incident
        .into_iter()
        .map(|mut fan| {
            fan.sort_by(|a, b| {
                a[0].total_cmp(&b[0])
                    .then(a[1].total_cmp(&b[1]))
                    .then(a[2].total_cmp(&b[2]))
            });
            let n = fan.iter().fold([0.0; 3], |acc, r| {
                [acc[0] + r[0], acc[1] + r[1], acc[2] + r[2]]
            });
            let len = norm(&n);
            if len > 0.0 && len.is_finite() {
                [n[0] / len, n[1] / len, n[2] / len]
            } else {
                // unreferenced vertex or cancelling fan
                [0.0, 0.0, 1.0]
            }
        })
        .collect();

    Ok(FaceGeometry {
        centers,
        normals,
        vertex_normals,
    })
}

/// Bounding box over all vertices, its diagonal, and the +x arch axis.
pub fn scene_frame(mesh: &LabeledMesh) -> Result<SceneFrame> {
    if mesh.num_faces() == 0 || mesh.vertices().is_empty() {
        return Err(Error::Empty("mesh has no faces"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in mesh.vertices() {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let diagonal = norm(&sub(&hi, &lo));
    if !(diagonal > 0.0) {
        return Err(Error::ZeroExtent("all vertices coincide"));
    }
    Ok(SceneFrame {
        bbox_min: lo,
        bbox_max: hi,
        diagonal,
        arch_axis: [1.0, 0.0, 0.0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> LabeledMesh {
        LabeledMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            vec![0],
            vec![-1],
            Jaw::Upper,
        )
        .unwrap()
    }

    fn cube_vertices() -> Vec<Vec3> {
        let mut v = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    v.push([x, y, z]);
                }
            }
        }
        v
    }

    #[test]
    fn planar_ccw_triangle_normal_and_center() {
        let g = compute_geometry(&triangle()).unwrap();
        assert_eq!(g.normals[0], [0.0, 0.0, 1.0]);
        let c = g.centers[0];
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((c[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2], 0.0);
        for n in &g.vertex_normals {
            assert_eq!(*n, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn reversed_winding_flips_normal() {
        let m = LabeledMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 2, 1]],
            vec![0],
            vec![-1],
            Jaw::Lower,
        )
        .unwrap();
        assert_eq!(compute_geometry(&m).unwrap().normals[0], [0.0, 0.0, -1.0]);
    }

    #[test]
    fn degenerate_face_is_rejected() {
        let err = LabeledMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2]],
            vec![0],
            vec![-1],
            Jaw::Upper,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateFace { face: 0, .. }));
    }

    #[test]
    fn label_length_mismatch() {
        let err = LabeledMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            vec![0, 0],
            vec![-1],
            Jaw::Upper,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LabelLengthMismatch { .. }));
    }

    #[test]
    fn instance_with_two_labels_is_rejected() {
        let err = LabeledMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
            vec![3, 4],
            vec![7, 7],
            Jaw::Upper,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::InconsistentInstance { instance: 7, .. }
        ));
    }

    #[test]
    fn unit_cube_diagonal() {
        let v = cube_vertices();
        let m = LabeledMesh::new(
            v,
            vec![[0, 1, 2], [5, 6, 7]],
            vec![0, 0],
            vec![-1, -1],
            Jaw::Upper,
        )
        .unwrap();
        let s = scene_frame(&m).unwrap();
        assert!((s.diagonal - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.arch_axis, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_triangle_bbox() {
        let s = scene_frame(&triangle()).unwrap();
        assert_eq!(s.bbox_min, [0.0, 0.0, 0.0]);
        assert_eq!(s.bbox_max, [1.0, 1.0, 0.0]);
    }

    #[test]
    fn scene_diagonal_doubles_under_scaling() {
        let m = triangle().translated([3.0, -1.0, 2.0]).unwrap();
        let d1 = scene_frame(&m).unwrap().diagonal;
        let d2 = scene_frame(&m.scaled(2.0).unwrap()).unwrap().diagonal;
        assert_eq!(d2, 2.0 * d1);
    }

    #[test]
    fn face_permutation_permutes_geometry() {
        let v = cube_vertices();
        let m = LabeledMesh::new(
            v,
            vec![[0, 1, 3], [4, 6, 7], [0, 4, 5]],
            vec![0, 0, 0],
            vec![-1, -1, -1],
            Jaw::Upper,
        )
        .unwrap();
        let order = [2, 0, 1];
        let g = compute_geometry(&m).unwrap();
        let gp = compute_geometry(&m.permute_faces(&order).unwrap()).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert_eq!(gp.centers[j], g.centers[i]);
            assert_eq!(gp.normals[j], g.normals[i]);
        }
    }
}
