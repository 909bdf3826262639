//! Scan loading and the individual pipeline stages.

use std::path::Path;
use std::time::Instant;

use toothmatch::cmr::{self, InstancePrediction, PredictionFile};
use toothmatch::encoder::{encode, FaceFeatureSet, FeatureStage};
use toothmatch::fhm::{GroundTruth, GroundTruthFile};
use toothmatch::io::{load_mesh, Tensor};
use toothmatch::mesh::{compute_geometry, scene_frame, NUM_CLASSES};
use toothmatch::model::{ModelDims, ModelWeights};
use toothmatch::prg::fuse;
use toothmatch::projection::{
    bilinear_sample, default_sigma, guidance_map, project_occlusal, rescale_coords, CoordinateMap,
    EmbeddingGrid, GuidanceMap, DEFAULT_MARGIN,
};
use toothmatch::synthgen::{perfect_prediction, synth_embedding_grid, EmbeddingMode};
use toothmatch::{FaceGeometry, LabeledMesh, Matrix, SceneFrame};

use crate::config::{read_json, Loaded};
use crate::error::{CliError, CliResult};

pub const FEATURES: &str = "features.tensor";
pub const COORDS: &str = "coords.tensor";
pub const EMBEDDINGS: &str = "embeddings.tensor";
pub const GUIDANCE: &str = "guidance.tensor";
pub const FUSED: &str = "fused.tensor";
pub const PREDICTION: &str = "prediction.json";

pub struct Scan {
    pub mesh: LabeledMesh,
    pub geom: FaceGeometry,
    pub scene: SceneFrame,
    pub cmap: CoordinateMap,
    pub gt: GroundTruth,
}

/// Runs `f`, printing its wall time to stderr and tagging errors with `name`.
pub fn timed<T>(scan: &str, name: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(name))?;
    eprintln!(
        "[{scan}] {name}: {:.1} ms",
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(out)
}

pub fn load_scan(l: &Loaded) -> CliResult<Scan> {
    let c = &l.config;
    let mesh = load_mesh(&l.resolve(&c.mesh), &l.resolve(&c.sidecar))?;
    let geom = compute_geometry(&mesh)?;
    let scene = scene_frame(&mesh)?;
    let cmap = project_occlusal(&geom, c.image_size, DEFAULT_MARGIN)?;
    let gt = match &c.ground_truth {
        Some(p) => {
            let file: GroundTruthFile = read_json(&l.resolve(p))?;
            GroundTruth::try_from(file)?
        }
        None => GroundTruth::from_mesh(&mesh, &geom)?,
    };
    if gt.num_faces() != mesh.num_faces() {
        return Err(CliError::schema(format!(
            "ground truth covers {} faces but the mesh has {}",
            gt.num_faces(),
            mesh.num_faces()
        )));
    }
    Ok(Scan {
        mesh,
        geom,
        scene,
        cmap,
        gt,
    })
}

/// Weight bundle from disk, or seeded from the config seed.
pub fn load_weights(l: &Loaded) -> CliResult<(ModelWeights, String)> {
    match &l.config.weights {
        Some(dir) => Ok((ModelWeights::load(&l.resolve(dir))?, "file".into())),
        None => Ok((
            ModelWeights::seeded(l.config.seed, &ModelDims::default()),
            format!("seeded:{}", l.config.seed),
        )),
    }
}

pub fn load_grid(l: &Loaded, scan: &Scan, channels: usize) -> CliResult<(EmbeddingGrid, String)> {
    match &l.config.embedding_grid {
        Some(p) => {
            let t = Tensor::read(&l.resolve(p))?;
            let [c, h, w] = t.shape[..] else {
                return Err(CliError::schema(format!(
                    "embedding grid must have rank 3, found shape {:?}",
                    t.shape
                )));
            };
            Ok((EmbeddingGrid::new(c, (h, w), t.to_f64())?, "file".into()))
        }
        None => {
            let mode = EmbeddingMode::LabelOnehotSmoothed {
                sigma: l.config.embed_smoothing,
            };
            let grid =
                synth_embedding_grid(&scan.mesh, &scan.cmap, l.config.grid_size, channels, mode)?;
            Ok((grid, "synthetic".into()))
        }
    }
}

pub fn features(scan: &Scan, w: &ModelWeights, k: usize) -> CliResult<FaceFeatureSet> {
    Ok(encode(&scan.mesh, &scan.geom, &w.encoder, k)?)
}

/// Sampled `C_e x M` embeddings at the rescaled face coordinates.
pub fn project(scan: &Scan, grid: &EmbeddingGrid) -> CliResult<Matrix> {
    let coords = rescale_coords(&scan.cmap, grid.grid_size)?;
    Ok(bilinear_sample(grid, &coords)?)
}

/// Guidance from the centers of a first decoding pass over the unfused features.
pub fn guidance(
    l: &Loaded,
    scan: &Scan,
    f3d: &FaceFeatureSet,
    w: &ModelWeights,
) -> CliResult<GuidanceMap> {
    let first = cmr::infer(f3d, &scan.geom, &scan.cmap, &w.decoder, l.config.threshold)?;
    let centers: Vec<[f64; 2]> = (0..first.num_instances())
        .filter(|&i| first.valid[i])
        .map(|i| first.centers2d[i])
        .collect();
    let sigma = l
        .config
        .sigma
        .unwrap_or_else(|| default_sigma(l.config.image_size));
    Ok(guidance_map(&centers, &scan.cmap, sigma)?)
}

pub fn fused(
    f3d: &FaceFeatureSet,
    ep: &Matrix,
    mp: &GuidanceMap,
    w: &ModelWeights,
) -> CliResult<FaceFeatureSet> {
    Ok(fuse(f3d, ep, mp, &w.gating)?)
}

pub fn decode(
    l: &Loaded,
    scan: &Scan,
    f: &FaceFeatureSet,
    w: &ModelWeights,
) -> CliResult<InstancePrediction> {
    Ok(cmr::infer(
        f,
        &scan.geom,
        &scan.cmap,
        &w.decoder,
        l.config.threshold,
    )?)
}

/// Prediction from `--perfect`, the configured file, or `prediction.json` in
/// the output directory.
pub fn load_prediction(
    l: &Loaded,
    scan: &Scan,
    perfect: bool,
) -> CliResult<(InstancePrediction, &'static str)> {
    if perfect {
        return Ok((
            perfect_prediction(&scan.gt, &scan.geom, &scan.cmap)?,
            "perfect",
        ));
    }
    let path = match &l.config.prediction {
        Some(p) => l.resolve(p),
        None => l.output(PREDICTION),
    };
    let file: PredictionFile = read_json(&path)?;
    Ok((InstancePrediction::try_from(file)?, "file"))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> CliResult<()> {
    Ok(Tensor::from_matrix(m).write(path)?)
}

pub fn read_features(path: &Path, faces: usize) -> CliResult<FaceFeatureSet> {
    let m = read_matrix(path, faces)?;
    Ok(FaceFeatureSet::new(FeatureStage::Fused128, m)?)
}

/// Reads a `rows x faces` tensor.
pub fn read_matrix(path: &Path, faces: usize) -> CliResult<Matrix> {
    let m = Tensor::read(path)?.to_matrix()?;
    if m.cols() != faces {
        return Err(CliError::schema(format!(
            "{} holds {} faces but the mesh has {faces}",
            path.display(),
            m.cols()
        )));
    }
    Ok(m)
}

/// Top tooth class of an instance; ties go to the lower class.
pub fn predicted_class(pred: &InstancePrediction, i: usize) -> u8 {
    let row = pred.class_logits.row(i);
    (1..NUM_CLASSES)
        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
        .unwrap_or(1) as u8
}
