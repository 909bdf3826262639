//! Procedural labeled dental arches, perfect and perturbed predictions, and
//! synthetic embedding grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmr::{self, InstancePrediction, DEFAULT_THRESHOLD, NUM_QUERIES};
use crate::error::{Error, Result};
use crate::fhm::{fdi_position, GroundTruth, NUM_POSITIONS};
use crate::linalg::Matrix;
use crate::mesh::{
    compute_geometry, scene_frame, FaceGeometry, Jaw, LabeledMesh, SceneFrame, Vec3,
    BACKGROUND_INSTANCE, GINGIVA, NUM_CLASSES,
};
use crate::projection::{
    project_occlusal, rescale_coords, CoordinateMap, EmbeddingGrid, DEFAULT_MARGIN,
};

/// Saturation used for perfect logits.
pub const PERFECT_LOGIT: f64 = 20.0;
/// Vertices per tooth ring; a multiple of 6 keeps the cap fans symmetric.
const RING_VERTICES: usize = 12;
const MIN_TOOTH_FACES: usize = 2 * RING_VERTICES * 2 + 8;
const GINGIVA_ROWS: usize = 10;
const MIN_GINGIVA_FACES: usize = 2 * GINGIVA_ROWS * 4;
const TOOTH_GAP: f64 = 0.4;

/// Mesiodistal width, buccolingual depth and crown height per tooth type
/// (1 = central incisor .. 8 = third molar), in millimeters.
const TOOTH_WIDTH: [f64; 8] = [8.5, 6.5, 7.5, 7.0, 6.5, 10.0, 9.0, 8.5];
const TOOTH_DEPTH: [f64; 8] = [7.0, 6.0, 8.0, 8.0, 8.0, 11.0, 10.0, 9.5];
const TOOTH_HEIGHT: [f64; 8] = [9.0, 8.5, 10.0, 8.0, 7.5, 7.0, 6.5, 6.0];

fn default_tooth_faces() -> usize {
    80
}

fn default_gingiva_faces() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub jaw: Jaw,
    /// Class ids 1..=16 to generate.
    pub teeth_present: Vec<u8>,
    /// Random shift of each tooth along the arch, as a fraction of its width.
    #[serde(default)]
    pub crowding_jitter: f64,
    #[serde(default = "default_tooth_faces")]
    pub tooth_faces: usize,
    #[serde(default = "default_gingiva_faces")]
    pub gingiva_faces: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(jaw: Jaw, teeth_present: Vec<u8>, seed: u64) -> Self {
        Self {
            jaw,
            teeth_present,
            crowding_jitter: 0.0,
            tooth_faces: default_tooth_faces(),
            gingiva_faces: default_gingiva_faces(),
            seed,
        }
    }

    /// All sixteen teeth.
    pub fn full(jaw: Jaw, seed: u64) -> Self {
        Self::new(jaw, (1..=16).collect(), seed)
    }

    /// Fourteen teeth, both third molars missing.
    pub fn without_third_molars(jaw: Jaw, seed: u64) -> Self {
        Self::new(jaw, (1..=16).filter(|&c| c != 8 && c != 16).collect(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teeth_present.is_empty() {
            return Err(Error::Config("teeth_present is empty".into()));
        }
        let mut seen = [false; NUM_CLASSES];
        for &t in &self.teeth_present {
            if !(1..=16).contains(&t) {
                return Err(Error::InvalidLabel(t as i64));
            }
            if std::mem::replace(&mut seen[t as usize], true) {
                return Err(Error::Config(format!("tooth {t} listed twice")));
            }
        }
        if !(0.0..0.5).contains(&self.crowding_jitter) {
            return Err(Error::Config(format!(
                "crowding_jitter {} must lie in [0, 0.5)",
                self.crowding_jitter
            )));
        }
        if self.tooth_faces < MIN_TOOTH_FACES {
            return Err(Error::Config(format!(
                "tooth_faces {} is below the minimum of {MIN_TOOTH_FACES}",
                self.tooth_faces
            )));
        }
        if self.gingiva_faces < MIN_GINGIVA_FACES {
            return Err(Error::Config(format!(
                "gingiva_faces {} is below the minimum of {MIN_GINGIVA_FACES}",
                self.gingiva_faces
            )));
        }
        Ok(())
    }

    /// Number of rings per tooth so that `2 * 12 * rings + 8` is close to the target.
    fn tooth_rings(&self) -> usize {
        let per_ring = 2 * RING_VERTICES;
        ((self.tooth_faces - 8 + per_ring / 2) / per_ring).max(2)
    }

    fn gingiva_columns(&self) -> usize {
        let per_column = 2 * GINGIVA_ROWS;
        ((self.gingiva_faces + per_column / 2) / per_column).max(4)
    }
}

fn curvature(jaw: Jaw) -> f64 {
    match jaw {
        Jaw::Upper => 0.025,
        Jaw::Lower => 0.03,
    }
}

/// Arc length of `y = a x^2` from 0 to `x`.
fn arc_length(a: f64, x: f64) -> f64 {
    let u = 2.0 * a * x;
    (x * (1.0 + u * u).sqrt()) / 2.0 + u.asinh() / (4.0 * a)
}

/// Inverse of [`arc_length`] by bisection.
fn x_at_arc(a: f64, s: f64) -> f64 {
    let (mut lo, mut hi) = (-s.abs() - 1.0, s.abs() + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if arc_length(a, mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Point and unit tangent of the arch at arc length `s` from the midline.
fn arch_frame(a: f64, s: f64) -> ([f64; 2], [f64; 2]) {
    let x = x_at_arc(a, s);
    let slope = 2.0 * a * x;
    let norm = (1.0 + slope * slope).sqrt();
    ([x, a * x * x], [1.0 / norm, slope / norm])
}

fn tooth_type(position: usize) -> usize {
    // positions 0..=7 run from third molar to central incisor
    if position < 8 {
        8 - position
    } else {
        position - 7
    }
}

/// Arc-length centers of the sixteen positions, midline at zero.
fn slot_centers() -> [f64; NUM_POSITIONS] {
    let widths: Vec<f64> = (0..NUM_POSITIONS)
        .map(|p| TOOTH_WIDTH[tooth_type(p) - 1])
        .collect();
    let mut centers = [0.0; NUM_POSITIONS];
    let mut s = 0.0;
    for p in 0..NUM_POSITIONS {
        centers[p] = s + widths[p] / 2.0;
        s += widths[p] + TOOTH_GAP;
    }
    let mid = 0.5 * (centers[7] + centers[8]);
    centers.iter_mut().for_each(|c| *c -= mid);
    centers
}

struct Blob {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

/// Closed tooth surface around the z axis, unit radius scaled by half the width
/// and depth. The occlusal cap triangle is sunk to the height where its face
/// center equals the mean of all face centers, so the tooth's face-center
/// centroid is itself a face center.
fn tooth_blob(width: f64, depth: f64, height: f64, rings: usize) -> Blob {
    let n = RING_VERTICES;
    let q = n / 3;
    let angle = |j: usize| 2.0 * std::f64::consts::PI * j as f64 / n as f64;
    let point = |rho: f64, j: usize, z: f64| -> Vec3 {
        let t = angle(j);
        [0.5 * width * rho * t.cos(), 0.5 * depth * rho * t.sin(), z]
    };

    let build = |top_z: f64| -> Blob {
        let mut vertices = Vec::with_capacity(n * rings + 6);
        for s in 0..3 {
            vertices.push(point(0.45, s * q, 0.0));
        }
        for k in 0..rings {
            let f = k as f64 / (rings - 1) as f64;
            let z = height * (0.1 + 0.9 * f);
            let rho = 0.85 + 0.15 * (std::f64::consts::PI * f).sin();
            for j in 0..n {
                vertices.push(point(rho, j, z));
            }
        }
        let top = vertices.len();
        for s in 0..3 {
            vertices.push(point(0.35, s * q, top_z));
        }
        let ring = |k: usize, j: usize| 3 + k * n + j % n;
        let bottom = |s: usize| s % 3;
        let cap = |s: usize| top + s % 3;

        let mut faces = Vec::with_capacity(2 * n * rings + 8);
        faces.push([bottom(0), bottom(2), bottom(1)]);
        for s in 0..3 {
            for j in s * q..(s + 1) * q {
                let c = if j < s * q + q / 2 {
                    bottom(s)
                } else {
                    bottom(s + 1)
                };
                faces.push([ring(0, j + 1), ring(0, j), c]);
            }
            faces.push([bottom(s), bottom(s + 1), ring(0, s * q + q / 2)]);
        }
        for k in 0..rings - 1 {
            for j in 0..n {
                let (a, b) = (ring(k, j), ring(k, j + 1));
                let (c, d) = (ring(k + 1, j + 1), ring(k + 1, j));
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
        let last = rings - 1;
        for s in 0..3 {
            for j in s * q..(s + 1) * q {
                let c = if j < s * q + q / 2 {
                    cap(s)
                } else {
                    cap(s + 1)
                };
                faces.push([ring(last, j), ring(last, j + 1), c]);
            }
            faces.push([cap(s + 1), cap(s), ring(last, s * q + q / 2)]);
        }
        faces.push([cap(0), cap(1), cap(2)]);
        Blob { vertices, faces }
    };

    let z_sum = |b: &Blob| -> f64 {
        b.faces
            .iter()
            .map(|f| (b.vertices[f[0]][2] + b.vertices[f[1]][2] + b.vertices[f[2]][2]) / 3.0)
            .sum()
    };
    let s0 = z_sum(&build(0.0));
    let s1 = z_sum(&build(1.0));
    let faces = build(0.0).faces.len() as f64;
    build(s0 / (faces - (s1 - s0)))
}

/// Generates the mesh and its per-class ground truth.
pub fn generate_arch(spec: &ArchSpec) -> Result<(LabeledMesh, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = curvature(spec.jaw);
    let slots = slot_centers();
    let jitter: Vec<f64> = (0..NUM_POSITIONS)
        .map(|_| rng.gen_range(-1.0..=1.0) * spec.crowding_jitter)
        .collect();

    let mut present: Vec<(usize, u8)> = spec
        .teeth_present
        .iter()
        .map(|&c| Ok((fdi_position(c, spec.jaw)?, c)))
        .collect::<Result<_>>()?;
    present.sort_unstable();

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut instances: Vec<i32> = Vec::new();
    let rings = spec.tooth_rings();
    for (instance, &(position, class)) in present.iter().enumerate() {
        let ty = tooth_type(position) - 1;
        let s = slots[position] + jitter[position] * TOOTH_WIDTH[ty];
        let ([px, py], [tx, ty_]) = arch_frame(a, s);
        let blob = tooth_blob(TOOTH_WIDTH[ty], TOOTH_DEPTH[ty], TOOTH_HEIGHT[ty], rings);
        let base = vertices.len();
        vertices.extend(
            blob.vertices
                .iter()
                .map(|&[lx, ly, lz]| [px + lx * tx - ly * ty_, py + lx * ty_ + ly * tx, lz]),
        );
        faces.extend(
            blob.faces
                .iter()
                .map(|f| [f[0] + base, f[1] + base, f[2] + base]),
        );
        labels.extend(std::iter::repeat_n(class, blob.faces.len()));
        instances.extend(std::iter::repeat_n(instance as i32, blob.faces.len()));
    }

    // gingiva strip under the full set of slots
    let first = slots[0] - TOOTH_WIDTH[7] / 2.0 - 2.0;
    let last = slots[NUM_POSITIONS - 1] + TOOTH_WIDTH[7] / 2.0 + 2.0;
    let cols = spec.gingiva_columns();
    let half = 7.0;
    let base = vertices.len();
    for i in 0..=cols {
        let s = first + (last - first) * i as f64 / cols as f64;
        let ([px, py], [tx, ty]) = arch_frame(a, s);
        for r in 0..=GINGIVA_ROWS {
            let v = -half + 2.0 * half * r as f64 / GINGIVA_ROWS as f64;
            let z = -0.6
                - 2.0 * (v / half).powi(2)
                - 0.3 * (3.0 * std::f64::consts::PI * v / half).cos();
            vertices.push([px - v * ty, py + v * tx, z]);
        }
    }
    let idx = |i: usize, r: usize| base + i * (GINGIVA_ROWS + 1) + r;
    for i in 0..cols {
        for r in 0..GINGIVA_ROWS {
            faces.push([idx(i, r), idx(i + 1, r), idx(i + 1, r + 1)]);
            faces.push([idx(i, r), idx(i + 1, r + 1), idx(i, r + 1)]);
        }
    }
    let gingiva = 2 * cols * GINGIVA_ROWS;
    labels.extend(std::iter::repeat_n(GINGIVA, gingiva));
    instances.extend(std::iter::repeat_n(BACKGROUND_INSTANCE, gingiva));

    let mesh = LabeledMesh::new(vertices, faces, labels, instances, spec.jaw)?;
    let geom = compute_geometry(&mesh)?;
    let gt = GroundTruth::from_mesh(&mesh, &geom)?;
    Ok((mesh, gt))
}

/// Saturated prediction reproducing the ground truth in its first `L` slots.
pub fn perfect_prediction(
    gt: &GroundTruth,
    geom: &FaceGeometry,
    cmap: &CoordinateMap,
) -> Result<InstancePrediction> {
    let l = gt.num_teeth();
    let m = gt.num_faces();
    if l > NUM_QUERIES {
        return Err(Error::Config(format!(
            "{l} teeth exceed {NUM_QUERIES} instance slots"
        )));
    }
    let mut mask_logits = Matrix::filled(NUM_QUERIES, m, -PERFECT_LOGIT);
    let mut class_logits = Matrix::zeros(NUM_QUERIES, NUM_CLASSES);
    let mut objectness = vec![-PERFECT_LOGIT; NUM_QUERIES];
    for (i, &label) in gt.labels.iter().enumerate() {
        for (v, &t) in mask_logits.row_mut(i).iter_mut().zip(gt.masks.row(i)) {
            if t > 0.5 {
                *v = PERFECT_LOGIT;
            }
        }
        class_logits.set(i, label as usize, PERFECT_LOGIT);
        objectness[i] = PERFECT_LOGIT;
    }
    let centers = cmr::derive_centers(&mask_logits, geom, cmap, DEFAULT_THRESHOLD)?;
    Ok(InstancePrediction {
        mask_logits,
        class_logits,
        objectness,
        centers3d: centers.centers3d,
        centers2d: centers.centers2d,
        valid: centers.valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfusion {
    pub from_class: u8,
    pub to_class: u8,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    #[serde(default)]
    pub mask_flip_rate: f64,
    /// Center offset as a fraction of the scene diagonal.
    #[serde(default)]
    pub center_drift: f64,
    #[serde(default)]
    pub class_confusion: Option<ClassConfusion>,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_flip_rate) {
            return Err(Error::Config(format!(
                "mask_flip_rate {} must lie in [0, 1)",
                self.mask_flip_rate
            )));
        }
        if !(self.center_drift >= 0.0 && self.center_drift.is_finite()) {
            return Err(Error::Config(format!(
                "center_drift {} must be >= 0",
                self.center_drift
            )));
        }
        if let Some(c) = &self.class_confusion {
            for l in [c.from_class, c.to_class] {
                if l as usize >= NUM_CLASSES {
                    return Err(Error::InvalidLabel(l as i64));
                }
            }
            if !(0.0..=1.0).contains(&c.probability) {
                return Err(Error::Config(format!(
                    "confusion probability {} must lie in [0, 1]",
                    c.probability
                )));
            }
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Seeded corruption of a prediction.
///
/// Mask flips touch only valid instances and are followed by re-deriving the
/// centers. Drifted centers are snapped to the active face nearest the
/// displaced point, so they stay on the mask. Class confusion swaps the logits
/// of the two classes for instances whose top class is `from_class`.
pub fn perturb(
    pred: &InstancePrediction,
    spec: &PerturbSpec,
    scene: &SceneFrame,
    geom: &FaceGeometry,
    cmap: &CoordinateMap,
) -> Result<InstancePrediction> {
    spec.validate()?;
    pred.validate()?;
    let mut out = pred.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    if spec.mask_flip_rate > 0.0 {
        for i in 0..out.num_instances() {
            if !pred.valid[i] {
                continue;
            }
            for v in out.mask_logits.row_mut(i) {
                if rng.gen_bool(spec.mask_flip_rate) {
                    *v = -*v;
                }
            }
        }
        let d = cmr::derive_centers(&out.mask_logits, geom, cmap, DEFAULT_THRESHOLD)?;
        out.centers3d = d.centers3d;
        out.centers2d = d.centers2d;
        out.valid = d.valid;
    }

    if spec.center_drift > 0.0 {
        let reach = spec.center_drift * scene.diagonal;
        for i in 0..out.num_instances() {
            if !out.valid[i] {
                continue;
            }
            let dir = loop {
                let v: Vec3 = [
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let c = out.centers3d[i];
            let target = [
                c[0] + reach * dir[0],
                c[1] + reach * dir[1],
                c[2] + reach * dir[2],
            ];
            let active = cmr::active_faces(out.mask_logits.row(i), DEFAULT_THRESHOLD);
            if let Some(p) = cmr::nearest_active(&active, geom, &target) {
                out.centers3d[i] = geom.centers[p];
                out.centers2d[i] = cmap.coords[p];
            }
        }
    }

    if let Some(conf) = spec.class_confusion {
        let (from, to) = (conf.from_class as usize, conf.to_class as usize);
        for i in 0..out.num_instances() {
            if argmax(out.class_logits.row(i)) != from || !rng.gen_bool(conf.probability) {
                continue;
            }
            let row = out.class_logits.row_mut(i);
            row.swap(from, to);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Per-face class embeddings splatted onto the grid, then smoothed with a
    /// normalized Gaussian of width `sigma` grid cells (0 disables smoothing).
    LabelOnehotSmoothed {
        sigma: f64,
    },
    Random {
        seed: u64,
    },
}

/// Fixed `17 x channels` table of class embeddings.
pub fn class_embeddings(channels: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7007);
    Matrix::random_uniform(NUM_CLASSES, channels, 1.0, &mut rng)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable convolution of a `h x w` plane with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if (0..w as isize).contains(&xx) {
                    acc += g * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if (0..h as isize).contains(&yy) {
                    acc += g * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Stand-in for an image encoder's feature grid.
pub fn synth_embedding_grid(
    mesh: &LabeledMesh,
    cmap: &CoordinateMap,
    grid_size: (usize, usize),
    channels: usize,
    mode: EmbeddingMode,
) -> Result<EmbeddingGrid> {
    let (h, w) = grid_size;
    if h < 2 || w < 2 {
        return Err(Error::Config(format!(
            "grid size {h}x{w} must be at least 2x2"
        )));
    }
    if channels == 0 {
        return Err(Error::Config("embedding channels must be positive".into()));
    }
    let cells = h * w;
    match mode {
        EmbeddingMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..channels * cells)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            EmbeddingGrid::new(channels, grid_size, values)
        }
        EmbeddingMode::LabelOnehotSmoothed { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "smoothing sigma {sigma} must be >= 0"
                )));
            }
            if cmap.len() != mesh.num_faces() {
                return Err(Error::shape(
                    "synth_embedding_grid coordinates",
                    mesh.num_faces(),
                    cmap.len(),
                ));
            }
            let table = class_embeddings(channels);
            let grid_coords = rescale_coords(cmap, grid_size)?;
            let mut sums = vec![0.0; channels * cells];
            let mut counts = vec![0.0; cells];
            for (&[y, x], &label) in grid_coords.coords.iter().zip(mesh.face_labels()) {
                let cy = (y.round() as usize).min(h - 1);
                let cx = (x.round() as usize).min(w - 1);
                let cell = cy * w + cx;
                counts[cell] += 1.0;
                for c in 0..channels {
                    sums[c * cells + cell] += table.get(label as usize, c);
                }
            }
            let mut values = vec![0.0; channels * cells];
            if sigma == 0.0 {
                for c in 0..channels {
                    for cell in 0..cells {
                        if counts[cell] > 0.0 {
                            values[c * cells + cell] = sums[c * cells + cell] / counts[cell];
                        }
                    }
                }
            } else {
                let kernel = gaussian_kernel(sigma);
                let weight = blur(&counts, h, w, &kernel);
                for c in 0..channels {
                    let smoothed = blur(&sums[c * cells..(c + 1) * cells], h, w, &kernel);
                    for cell in 0..cells {
                        if weight[cell] > 1e-12 {
                            values[c * cells + cell] = smoothed[cell] / weight[cell];
                        }
                    }
                }
            }
            EmbeddingGrid::new(channels, grid_size, values)
        }
    }
}

/// Logit of a face an ambiguous mask owns, just above the threshold.
const AMBIGUOUS_OWN: f64 = 0.05;
/// Logit of a neighbor face an ambiguous mask leaks onto; below the threshold.
const AMBIGUOUS_LEAK: f64 = -0.05;
const FRAGMENTS: usize = 3;
const FRAGMENT_FACES: usize = 4;

/// Inputs of the order-prior flip case: an upper arch missing its left third
/// molar, whose right third-molar prediction is confused with the second molar.
#[derive(Debug, Clone)]
pub struct FlipCase {
    pub mesh: LabeledMesh,
    pub geom: FaceGeometry,
    pub scene: SceneFrame,
    pub cmap: CoordinateMap,
    pub gt: GroundTruth,
    pub pred: InstancePrediction,
    /// Prediction slot that covers the third molar.
    pub third_molar_slot: usize,
    /// Prediction slot that covers the second molar.
    pub second_molar_slot: usize,
    /// Ground-truth rows of the third and second molar.
    pub third_molar_gt: usize,
    pub second_molar_gt: usize,
}

/// Builds the flip case from a perfect prediction:
///
/// * the third-molar slot's class is confused into second molar, and the
///   second-molar slot scores both classes equally high;
/// * both slots carry soft masks that only just cover their own tooth and
///   almost cover the neighbor, so Dice cannot tell the two apart;
/// * three small false-positive fragments on the gingiva behind the third
///   molar shift every arch rank, which is what lets the order prior separate
///   the two molars.
pub fn order_flip_case(seed: u64) -> Result<FlipCase> {
    let spec = ArchSpec::new(Jaw::Upper, (1..=15).collect(), seed);
    let (mesh, gt) = generate_arch(&spec)?;
    let geom = compute_geometry(&mesh)?;
    let scene = scene_frame(&mesh)?;
    let cmap = project_occlusal(&geom, (1024, 1024), DEFAULT_MARGIN)?;
    let perfect = perfect_prediction(&gt, &geom, &cmap)?;
    let confusion = PerturbSpec {
        mask_flip_rate: 0.0,
        center_drift: 0.0,
        class_confusion: Some(ClassConfusion {
            from_class: 8,
            to_class: 7,
            probability: 1.0,
        }),
        seed,
    };
    let mut pred = perturb(&perfect, &confusion, &scene, &geom, &cmap)?;

    let row_of = |label: u8| gt.labels.iter().position(|&l| l == label);
    let (Some(third), Some(second)) = (row_of(8), row_of(7)) else {
        return Err(Error::Config("flip case needs both right molars".into()));
    };
    let labels = mesh.face_labels();
    for (slot, own, other) in [(third, 8u8, 7u8), (second, 7, 8)] {
        for (v, &l) in pred.mask_logits.row_mut(slot).iter_mut().zip(labels) {
            *v = if l == own {
                AMBIGUOUS_OWN
            } else if l == other {
                AMBIGUOUS_LEAK
            } else {
                -PERFECT_LOGIT
            };
        }
    }
    pred.class_logits.set(second, 8, PERFECT_LOGIT);

    // fragments: gingiva faces beyond the distal end of the arch
    let distal = gt.centers3d[third][0] - TOOTH_WIDTH[7] / 2.0;
    let mut gingiva: Vec<usize> = (0..mesh.num_faces())
        .filter(|&p| labels[p] == GINGIVA && geom.centers[p][0] < distal)
        .collect();
    gingiva.sort_by(|&a, &b| {
        geom.centers[a][0]
            .total_cmp(&geom.centers[b][0])
            .then(a.cmp(&b))
    });
    if gingiva.len() < FRAGMENTS * FRAGMENT_FACES || gt.num_teeth() + FRAGMENTS > NUM_QUERIES {
        return Err(Error::Config(
            "not enough room for flip-case fragments".into(),
        ));
    }
    let stride = gingiva.len() / FRAGMENTS;
    for f in 0..FRAGMENTS {
        let slot = gt.num_teeth() + f;
        for &p in &gingiva[f * stride..f * stride + FRAGMENT_FACES] {
            pred.mask_logits.set(slot, p, PERFECT_LOGIT);
        }
    }

    let centers = cmr::derive_centers(&pred.mask_logits, &geom, &cmap, DEFAULT_THRESHOLD)?;
    pred.centers3d = centers.centers3d;
    pred.centers2d = centers.centers2d;
    pred.valid = centers.valid;
    Ok(FlipCase {
        mesh,
        geom,
        scene,
        cmap,
        gt,
        pred,
        third_molar_slot: third,
        second_molar_slot: second,
        third_molar_gt: third,
        second_molar_gt: second,
    })
}
