//! Dual-stream geometric encoder.
//!
//! Each face is described by 24 channels (center, three vertices, face normal
//! and three vertex normals). The coordinate half and the normal half each go
//! through a fixed feature-transform matrix and three k-NN attentive
//! aggregation stages; the two stream outputs are concatenated and mapped to
//! 128 channels by a linear fuse map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Linear, Matrix};
use crate::mesh::{FaceGeometry, LabeledMesh, Vec3};
use crate::par;

pub const INPUT_CHANNELS: usize = 24;
pub const STREAM_CHANNELS: usize = 12;
pub const FEATURE_CHANNELS: usize = 128;
pub const DEFAULT_K: usize = 32;
pub const DEFAULT_HIDDEN: usize = 64;
pub const STAGES: usize = 3;
pub const INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStage {
    Input24,
    StreamCoord,
    StreamNormal,
    Fused128,
}

/// Channels x faces feature matrix tagged with the pipeline stage it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFeatureSet {
    pub stage: FeatureStage,
    pub values: Matrix,
}

impl FaceFeatureSet {
    pub fn new(stage: FeatureStage, values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("face features"));
        }
        Ok(Self { stage, values })
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn num_faces(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnBasis {
    Coordinates,
    Normals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Row-major `M x k`; each row sorted by (distance, index).
    pub neighbors: Vec<usize>,
    pub built_on: KnnBasis,
}

impl KnnGraph {
    pub fn num_points(&self) -> usize {
        self.neighbors.len() / self.k.max(1)
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// One attentive aggregation stage: `phi` maps `[p_i - p_j, p_j]` to attention
/// logits, `psi` maps `p_j` to the aggregated values.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationLayer {
    pub phi: Linear,
    pub psi: Linear,
}

impl AggregationLayer {
    pub fn in_dim(&self) -> usize {
        self.psi.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.psi.out_dim()
    }

    fn check(&self) -> Result<()> {
        if self.phi.in_dim() != 2 * self.psi.in_dim() {
            return Err(Error::shape(
                "aggregation phi input",
                2 * self.psi.in_dim(),
                self.phi.in_dim(),
            ));
        }
        if self.phi.out_dim() != self.psi.out_dim() {
            return Err(Error::shape(
                "aggregation phi/psi output",
                self.psi.out_dim(),
                self.phi.out_dim(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub ftm: Matrix,
    pub stages: Vec<AggregationLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    File,
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub coord: StreamWeights,
    pub normal: StreamWeights,
    pub fuse: Linear,
    pub source: WeightSource,
}

impl EncoderWeights {
    /// Uniform(-0.1, 0.1) initialization from a ChaCha8 stream.
    pub fn seeded(seed: u64, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_rng(&mut rng, hidden, WeightSource::Seed(seed))
    }

    pub(crate) fn from_rng(rng: &mut ChaCha8Rng, hidden: usize, source: WeightSource) -> Self {
        let stream = |rng: &mut ChaCha8Rng| {
            let ftm = Matrix::random_uniform(STREAM_CHANNELS, STREAM_CHANNELS, INIT_BOUND, rng);
            let mut stages = Vec::with_capacity(STAGES);
            let mut width = STREAM_CHANNELS;
            for _ in 0..STAGES {
                let phi = Linear::random_uniform(hidden, 2 * width, INIT_BOUND, rng);
                let psi = Linear::random_uniform(hidden, width, INIT_BOUND, rng);
                stages.push(AggregationLayer { phi, psi });
                width = hidden;
            }
            StreamWeights { ftm, stages }
        };
        let coord = stream(rng);
        let normal = stream(rng);
        let fuse = Linear::random_uniform(FEATURE_CHANNELS, 2 * hidden, INIT_BOUND, rng);
        Self {
            coord,
            normal,
            fuse,
            source,
        }
    }

    pub fn hidden(&self) -> usize {
        self.coord
            .stages
            .last()
            .map_or(STREAM_CHANNELS, AggregationLayer::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for stream in [&self.coord, &self.normal] {
            if stream.ftm.shape() != (STREAM_CHANNELS, STREAM_CHANNELS) {
                return Err(Error::shape(
                    "feature transform",
                    "12x12",
                    format!("{:?}", stream.ftm.shape()),
                ));
            }
            let mut width = STREAM_CHANNELS;
            for layer in &stream.stages {
                layer.check()?;
                if layer.in_dim() != width {
                    return Err(Error::shape(
                        "aggregation stage input",
                        width,
                        layer.in_dim(),
                    ));
                }
                if !(layer.phi.is_finite() && layer.psi.is_finite()) {
                    return Err(Error::NonFinite("encoder weights"));
                }
                width = layer.out_dim();
            }
        }
        let concat = self
            .coord
            .stages
            .last()
            .map_or(STREAM_CHANNELS, |l| l.out_dim())
            + self
                .normal
                .stages
                .last()
                .map_or(STREAM_CHANNELS, |l| l.out_dim());
        if self.fuse.in_dim() != concat || self.fuse.out_dim() != FEATURE_CHANNELS {
            return Err(Error::shape(
                "encoder fuse map",
                format!("{FEATURE_CHANNELS}x{concat}"),
                format!("{}x{}", self.fuse.out_dim(), self.fuse.in_dim()),
            ));
        }
        Ok(())
    }
}

/// Per-face 24-channel input: center, v1, v2, v3, face normal, n1, n2, n3.
pub fn build_input_features(mesh: &LabeledMesh, geom: &FaceGeometry) -> Result<FaceFeatureSet> {
    let m = mesh.num_faces();
    if geom.num_faces() != m {
        return Err(Error::shape("build_input_features", m, geom.num_faces()));
    }
    let mut face_major = vec![0.0; m * INPUT_CHANNELS];
    par::for_each_chunk(&mut face_major, INPUT_CHANNELS, |i, row| {
        let f = mesh.faces()[i];
        let vn = &geom.vertex_normals;
        let groups: [Vec3; 8] = [
            geom.centers[i],
            mesh.vertices()[f[0]],
            mesh.vertices()[f[1]],
            mesh.vertices()[f[2]],
            geom.normals[i],
            vn[f[0]],
            vn[f[1]],
            vn[f[2]],
        ];
        for (g, v) in groups.iter().enumerate() {
            row[3 * g..3 * g + 3].copy_from_slice(v);
        }
    });
    let values = Matrix::from_vec(m, INPUT_CHANNELS, face_major)?.transpose();
    FaceFeatureSet::new(FeatureStage::Input24, values)
}

/// Exact Euclidean k-NN over face centers or face normals.
pub fn build_knn(geom: &FaceGeometry, k: usize, on: KnnBasis) -> Result<KnnGraph> {
    let points = match on {
        KnnBasis::Coordinates => &geom.centers,
        KnnBasis::Normals => &geom.normals,
    };
    Ok(KnnGraph {
        k,
        neighbors: knn_points(points, k)?,
        built_on: on,
    })
}

/// Uniform-grid k-NN search. Each row excludes the query itself and is
/// ordered by `(squared distance, index)`, so ties go to the lower index.
pub fn knn_points(points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if k == 0 || k >= m {
        return Err(Error::NeighborCount { k, points: m });
    }
    let grid = Grid::new(points);
    let rows = par::map_range(m, |i| grid.query(points, i, k));
    Ok(rows.into_iter().flatten().collect())
}

struct Grid {
    lo: Vec3,
    h: f64,
    dims: [usize; 3],
    /// Cell start offsets into `order` (CSR layout).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl Grid {
    fn new(points: &[Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 128);
        let h = if longest > 0.0 {
            longest / per_axis as f64
        } else {
            1.0
        };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / h).ceil() as usize).max(1);
        }
        let mut grid = Self {
            lo,
            h,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell(&self, p: &Vec3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.lo[a]) / self.h).floor();
            c[a] = if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn query(&self, points: &[Vec3], i: usize, k: usize) -> Vec<usize> {
        let q = points[i];
        let c = self.cell(&q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(4 * k);
        for r in 0..=max_ring {
            self.visit_ring(c, r, |j| {
                if j != i {
                    cand.push((crate::linalg::dist2(&q, &points[j]), j));
                }
            });
            if cand.len() >= k {
                cand.select_nth_unstable_by(k - 1, cmp_pair);
                cand.truncate(k);
                // anything outside ring r is at least r*h away
                let bound = (r as f64 * self.h).powi(2) * (1.0 - 1e-9);
                let kth = cand.iter().map(|p| p.0).fold(0.0, f64::max);
                if kth < bound {
                    break;
                }
            }
        }
        cand.sort_unstable_by(cmp_pair);
        cand.truncate(k);
        cand.into_iter().map(|(_, j)| j).collect()
    }

    /// Visits every point in cells at Chebyshev distance exactly `r` from `c`.
    fn visit_ring(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let range = |a: usize| {
            let lo = (c[a] as isize - r).max(0);
            let hi = (c[a] as isize + r).min(self.dims[a] as isize - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let d = (x - c[0] as isize)
                        .abs()
                        .max((y - c[1] as isize).abs())
                        .max((z - c[2] as isize).abs());
                    if d != r {
                        continue;
                    }
                    let cell = self.flat([x as usize, y as usize, z as usize]);
                    for &j in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                        f(j);
                    }
                }
            }
        }
    }
}

fn cmp_pair(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Per-face attention weights `alpha_ij` (k x out, one softmax per channel).
pub fn attention_weights(
    features: &Matrix,
    graph: &KnnGraph,
    layer: &AggregationLayer,
    face: usize,
) -> Result<Matrix> {
    let pre = Precomputed::new(features, graph, layer)?;
    let mut alpha = Matrix::zeros(graph.k, layer.out_dim());
    let mut g = vec![0.0; layer.out_dim()];
    pre.face(graph, layer, face, &mut g, Some(&mut alpha));
    Ok(alpha)
}

/// Local attentive aggregation over the k-NN graph:
/// `e_ij = phi([p_i - p_j, p_j])`, `alpha = softmax_j(e_ij)` per channel,
/// `g_i = sum_j alpha_ij * psi(p_j)`.
pub fn attentive_aggregate(
    features: &Matrix,
    graph: &KnnGraph,
    layer: &AggregationLayer,
) -> Result<Matrix> {
    let pre = Precomputed::new(features, graph, layer)?;
    let out = layer.out_dim();
    let m = features.cols();
    let mut face_major = vec![0.0; m * out];
    par::for_each_chunk(&mut face_major, out, |i, row| {
        pre.face(graph, layer, i, row, None)
    });
    Ok(Matrix::from_vec(m, out, face_major)?.transpose())
}

/// `phi([p_i - p_j, p_j]) = Wa p_i + (Wb - Wa) p_j + b`, so the per-face
/// products are computed once instead of once per edge.
struct Precomputed {
    /// face-major `M x out`
    own: Matrix,
    other: Matrix,
    values: Matrix,
}

impl Precomputed {
    fn new(features: &Matrix, graph: &KnnGraph, layer: &AggregationLayer) -> Result<Self> {
        layer.check()?;
        let d = layer.in_dim();
        if features.rows() != d {
            return Err(Error::shape(
                "attentive_aggregate features",
                d,
                features.rows(),
            ));
        }
        if graph.num_points() != features.cols() {
            return Err(Error::shape(
                "attentive_aggregate graph",
                features.cols(),
                graph.num_points(),
            ));
        }
        let out = layer.out_dim();
        let mut wa = Matrix::zeros(out, d);
        let mut wdiff = Matrix::zeros(out, d);
        for o in 0..out {
            for c in 0..d {
                let a = layer.phi.weight.get(o, c);
                let b = layer.phi.weight.get(o, d + c);
                wa.set(o, c, a);
                wdiff.set(o, c, b - a);
            }
        }
        Ok(Self {
            own: wa.matmul(features)?.transpose(),
            other: wdiff.matmul(features)?.transpose(),
            values: layer.psi.apply(features)?.transpose(),
        })
    }

    fn face(
        &self,
        graph: &KnnGraph,
        layer: &AggregationLayer,
        i: usize,
        out: &mut [f64],
        mut alpha_out: Option<&mut Matrix>,
    ) {
        let nbrs = graph.of(i);
        let own = self.own.row(i);
        let mut logits = vec![0.0; nbrs.len()];
        for (c, slot) in out.iter_mut().enumerate() {
            let base = own[c] + layer.phi.bias[c];
            let mut max = f64::NEG_INFINITY;
            for (e, &j) in logits.iter_mut().zip(nbrs) {
                *e = base + self.other.get(j, c);
                max = max.max(*e);
            }
            let mut total = 0.0;
            for e in logits.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            let mut acc = 0.0;
            for (t, (&w, &j)) in logits.iter().zip(nbrs).enumerate() {
                let a = w / total;
                if let Some(alpha) = alpha_out.as_deref_mut() {
                    alpha.set(t, c, a);
                }
                acc += a * self.values.get(j, c);
            }
            *slot = acc;
        }
    }
}

fn run_stream(input: &Matrix, stream: &StreamWeights, graph: &KnnGraph) -> Result<Matrix> {
    let mut x = stream.ftm.matmul(input)?;
    for layer in &stream.stages {
        x = attentive_aggregate(&x, graph, layer)?;
    }
    Ok(x)
}

/// Full encoder pass producing the 128 x M feature map.
pub fn encode(
    mesh: &LabeledMesh,
    geom: &FaceGeometry,
    weights: &EncoderWeights,
    k: usize,
) -> Result<FaceFeatureSet> {
    weights.validate()?;
    let input = build_input_features(mesh, geom)?;
    let coord_in = input.values.row_range(0, STREAM_CHANNELS);
    let normal_in = input.values.row_range(STREAM_CHANNELS, INPUT_CHANNELS);
    let coord_graph = build_knn(geom, k, KnnBasis::Coordinates)?;
    let normal_graph = build_knn(geom, k, KnnBasis::Normals)?;
    let coord = run_stream(&coord_in, &weights.coord, &coord_graph)?;
    let normal = run_stream(&normal_in, &weights.normal, &normal_graph)?;
    let joined = Matrix::vstack(&[&coord, &normal])?;
    FaceFeatureSet::new(FeatureStage::Fused128, weights.fuse.apply(&joined)?)
}
