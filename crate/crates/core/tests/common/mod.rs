//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use toothmatch::fhm::GroundTruth;
use toothmatch::mesh::{compute_geometry, scene_frame};
use toothmatch::projection::{project_occlusal, CoordinateMap, DEFAULT_MARGIN};
use toothmatch::synthgen::{generate_arch, ArchSpec};
use toothmatch::{FaceGeometry, Jaw, LabeledMesh, Matrix, SceneFrame, Vec3};

/// Minimum-cost maximum-cardinality assignment by exhaustive enumeration.
///
/// The total is summed over rows in ascending order, like the solver does.
pub fn brute_force_assignment(cost: &Matrix) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = cost.shape();
    let mut best = (f64::INFINITY, Vec::new());
    if n <= m {
        let mut cols = vec![usize::MAX; n];
        let mut used = vec![false; m];
        rows_to_cols(cost, 0, &mut cols, &mut used, &mut best);
    } else {
        let mut owner = vec![usize::MAX; n];
        let mut used = vec![false; n];
        cols_to_rows(cost, 0, &mut owner, &mut used, &mut best);
    }
    best
}

fn score(cost: &Matrix, col_of_row: &[usize]) -> (f64, Vec<(usize, usize)>) {
    let pairs: Vec<(usize, usize)> = col_of_row
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != usize::MAX)
        .map(|(r, &c)| (r, c))
        .collect();
    let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    (total, pairs)
}

fn rows_to_cols(
    cost: &Matrix,
    r: usize,
    cols: &mut [usize],
    used: &mut [bool],
    best: &mut (f64, Vec<(usize, usize)>),
) {
    if r == cols.len() {
        let s = score(cost, cols);
        if s.0 < best.0 {
            *best = s;
        }
        return;
    }
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            cols[r] = c;
            rows_to_cols(cost, r + 1, cols, used, best);
            used[c] = false;
        }
    }
    cols[r] = usize::MAX;
}

fn cols_to_rows(
    cost: &Matrix,
    c: usize,
    owner: &mut [usize],
    used: &mut [bool],
    best: &mut (f64, Vec<(usize, usize)>),
) {
    if c == cost.cols() {
        let s = score(cost, owner);
        if s.0 < best.0 {
            *best = s;
        }
        return;
    }
    for r in 0..used.len() {
        if !used[r] {
            used[r] = true;
            owner[r] = c;
            cols_to_rows(cost, c + 1, owner, used, best);
            owner[r] = usize::MAX;
            used[r] = false;
        }
    }
}

/// Exact minimum-cost maximum-cardinality assignment by dynamic programming
/// over subsets of the larger side. Usable up to about 20 on that side.
pub fn subset_dp_assignment(cost: &Matrix) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = cost.shape();
    let transposed = n > m;
    let (items, slots) = if transposed { (m, n) } else { (n, m) };
    let at = |item: usize, slot: usize| {
        if transposed {
            cost.get(slot, item)
        } else {
            cost.get(item, slot)
        }
    };
    assert!(
        slots <= 22,
        "subset oracle is exponential in the larger side"
    );
    let states = 1usize << slots;
    let mut dp = vec![f64::INFINITY; states];
    let mut parent = vec![usize::MAX; states];
    dp[0] = 0.0;
    for mask in 0..states {
        let k = mask.count_ones() as usize;
        if k >= items || !dp[mask].is_finite() {
            continue;
        }
        for s in 0..slots {
            if mask & (1 << s) == 0 {
                let next = mask | (1 << s);
                let v = dp[mask] + at(k, s);
                if v < dp[next] {
                    dp[next] = v;
                    parent[next] = s;
                }
            }
        }
    }
    let end = (0..states)
        .filter(|m| m.count_ones() as usize == items)
        .min_by(|&a, &b| dp[a].total_cmp(&dp[b]))
        .expect("at least one full assignment");
    let mut pairs = Vec::with_capacity(items);
    let mut mask = end;
    for item in (0..items).rev() {
        let s = parent[mask];
        pairs.push(if transposed { (s, item) } else { (item, s) });
        mask &= !(1 << s);
    }
    pairs.sort_unstable();
    (dp[end], pairs)
}

/// k nearest neighbors of every point by full sort on (squared distance, index).
pub fn brute_force_knn(points: &[Vec3], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| {
                (
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2),
                    j,
                )
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(d.iter().take(k).map(|&(_, j)| j));
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap()
}

/// Everything a matching or decoding test needs about one synthetic scan.
pub struct Scan {
    pub mesh: LabeledMesh,
    pub geom: FaceGeometry,
    pub scene: SceneFrame,
    pub cmap: CoordinateMap,
    pub gt: GroundTruth,
}

impl Scan {
    pub fn from_mesh(mesh: LabeledMesh) -> Self {
        let geom = compute_geometry(&mesh).unwrap();
        let scene = scene_frame(&mesh).unwrap();
        let cmap = project_occlusal(&geom, (1024, 1024), DEFAULT_MARGIN).unwrap();
        let gt = GroundTruth::from_mesh(&mesh, &geom).unwrap();
        Self {
            mesh,
            geom,
            scene,
            cmap,
            gt,
        }
    }

    pub fn generate(spec: &ArchSpec) -> Self {
        Self::from_mesh(generate_arch(spec).unwrap().0)
    }
}

/// Small arch: a handful of teeth on a short gingiva strip (a few hundred faces).
pub fn small_spec(jaw: Jaw, teeth: &[u8], seed: u64) -> ArchSpec {
    ArchSpec {
        gingiva_faces: 160,
        ..ArchSpec::new(jaw, teeth.to_vec(), seed)
    }
}

/// The arch of `spec` with every vertex jittered by up to `amplitude`, which
/// removes the exact distance ties of the regular synthetic layout.
pub fn noisy_mesh(spec: &ArchSpec, amplitude: f64, seed: u64) -> LabeledMesh {
    let (mesh, _) = generate_arch(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec3> = (0..mesh.vertices().len())
        .map(|_| std::array::from_fn(|_| rng.gen_range(-amplitude..amplitude)))
        .collect();
    let vertices: Vec<Vec3> = mesh
        .vertices()
        .iter()
        .zip(&noise)
        .map(|(v, n)| [v[0] + n[0], v[1] + n[1], v[2] + n[2]])
        .collect();
    LabeledMesh::new(
        vertices,
        mesh.faces().to_vec(),
        mesh.face_labels().to_vec(),
        mesh.face_instance_ids().to_vec(),
        mesh.jaw(),
    )
    .unwrap()
}

/// Random permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}
