use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use toothmatch::cmr::{derive_centers, InstancePrediction, PredictionFile, DEFAULT_THRESHOLD};
use toothmatch::eval::{aggregate, evaluate_prediction, AggregateReport, MetricReport};
use toothmatch::fhm::{
    fhm_match, Assignment, GroundTruth, GroundTruthFile, MatchConfig, TrailDump,
};
use toothmatch::io::{save_mesh, Tensor};
use toothmatch::losses::evaluate_losses;
use toothmatch::mesh::{compute_geometry, scene_frame};
use toothmatch::projection::{project_occlusal, CoordinateMap, DEFAULT_IMAGE_SIZE, DEFAULT_MARGIN};
use toothmatch::synthgen::{
    generate_arch, order_flip_case, perfect_prediction, perturb, ArchSpec, PerturbSpec,
};
use toothmatch::{FaceGeometry, LabeledMesh, SceneFrame};

use crate::config::{parse_json, read_json, write_json, Loaded, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::stages::{self, timed, Scan};

pub const ASSIGNMENT: &str = "assignment.json";
pub const EVAL_REPORT: &str = "report.json";
pub const PIPELINE_REPORT: &str = "pipeline_report.json";
pub const AGGREGATE: &str = "aggregate.json";

/// Config-file flags shared by the per-scan commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda_ord: Option<f64>,
    pub lambda_cent: Option<f64>,
}

impl Overrides {
    pub fn load(&self, path: &Path) -> CliResult<Loaded> {
        let mut l = Loaded::read(path)?;
        if let Some(s) = self.seed {
            l.config.seed = s;
        }
        if let Some(v) = self.lambda_ord {
            l.config.matching.lambda_ord = v;
        }
        if let Some(v) = self.lambda_cent {
            l.config.matching.lambda_cent = v;
        }
        l.config.validate()?;
        Ok(l)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// A config file, or every `*/config.json` under a directory in name order.
pub fn collect_configs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| CliError::io(path, e))? {
        let entry = entry.map_err(|e| CliError::io(path, e))?;
        let candidate = entry.path().join("config.json");
        if candidate.is_file() {
            out.push(candidate);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::schema(format!(
            "no */config.json under {}",
            path.display()
        )));
    }
    Ok(out)
}

// synth

pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub perturb: Option<PathBuf>,
    pub flip_case: bool,
}

pub const SCAN_MESH: &str = "scan.ply";
pub const SCAN_SIDECAR: &str = "scan.labels.json";
pub const SCAN_GT: &str = "ground_truth.json";

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    // everything downstream sees the f32 vertices the mesh file stores
    let (mesh, pred, seed, scan_id) = if a.flip_case {
        let seed = a.seed.unwrap_or(0);
        let case = order_flip_case(seed)?;
        let mesh = as_stored(&case.mesh)?;
        let (geom, _, cmap) = frames(&mesh)?;
        let c = derive_centers(&case.pred.mask_logits, &geom, &cmap, DEFAULT_THRESHOLD)?;
        let pred = InstancePrediction {
            centers3d: c.centers3d,
            centers2d: c.centers2d,
            valid: c.valid,
            ..case.pred
        };
        (mesh, Some(pred), seed, format!("flip-{seed}"))
    } else {
        let path = a
            .config
            .as_deref()
            .ok_or_else(|| CliError::schema("synth needs --config <arch spec> or --flip-case"))?;
        let mut spec: ArchSpec = read_json(path)?;
        if let Some(s) = a.seed {
            spec.seed = s;
        }
        let (mesh, _) = generate_arch(&spec)?;
        let mesh = as_stored(&mesh)?;
        let pred = match &a.perturb {
            Some(p) => {
                let ps: PerturbSpec = read_json(p)?;
                ps.validate()?;
                Some(perturbed(&mesh, &ps)?)
            }
            None => None,
        };
        (mesh, pred, spec.seed, format!("seed-{}", spec.seed))
    };
    let gt = GroundTruth::from_mesh(&mesh, &compute_geometry(&mesh)?)?;

    create_dir(&a.out)?;
    save_mesh(&a.out.join(SCAN_MESH), &a.out.join(SCAN_SIDECAR), &mesh)?;
    write_json(&a.out.join(SCAN_GT), &GroundTruthFile::from(&gt))?;
    if let Some(p) = &pred {
        write_json(&a.out.join(stages::PREDICTION), &PredictionFile::from(p))?;
    }
    let config: PipelineConfig = parse_json(
        &serde_json::json!({
            "scan_id": scan_id,
            "mesh": SCAN_MESH,
            "sidecar": SCAN_SIDECAR,
            "ground_truth": SCAN_GT,
            "output_dir": ".",
            "seed": seed,
        })
        .to_string(),
        "synth config",
    )?;
    write_json(&a.out.join("config.json"), &config)?;
    println!(
        "synth: M={} L={} seed={} -> {}",
        mesh.num_faces(),
        gt.num_teeth(),
        seed,
        a.out.display()
    );
    Ok(())
}

fn as_stored(mesh: &LabeledMesh) -> CliResult<LabeledMesh> {
    Ok(mesh.map_vertices(|v| v.map(|x| x as f32 as f64))?)
}

fn frames(mesh: &LabeledMesh) -> CliResult<(FaceGeometry, SceneFrame, CoordinateMap)> {
    let geom = compute_geometry(mesh)?;
    let scene = scene_frame(mesh)?;
    let cmap = project_occlusal(&geom, DEFAULT_IMAGE_SIZE, DEFAULT_MARGIN)?;
    Ok((geom, scene, cmap))
}

fn perturbed(mesh: &LabeledMesh, ps: &PerturbSpec) -> CliResult<InstancePrediction> {
    let (geom, scene, cmap) = frames(mesh)?;
    let gt = GroundTruth::from_mesh(mesh, &geom)?;
    let perfect = perfect_prediction(&gt, &geom, &cmap)?;
    Ok(perturb(&perfect, ps, &scene, &geom, &cmap)?)
}

// stage commands

pub fn features(path: &Path, o: &Overrides) -> CliResult<()> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (w, _) = timed(&id, "weights", || stages::load_weights(&l))?;
    let f = timed(&id, "encode", || stages::features(&scan, &w, l.config.k))?;
    create_dir(&l.output_dir())?;
    let out = l.output(stages::FEATURES);
    stages::write_matrix(&out, &f.values)?;
    println!(
        "features: {}x{} -> {}",
        f.channels(),
        f.num_faces(),
        out.display()
    );
    Ok(())
}

pub fn project(path: &Path, o: &Overrides) -> CliResult<()> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (w, _) = timed(&id, "weights", || stages::load_weights(&l))?;
    let (grid, _) = timed(&id, "grid", || {
        stages::load_grid(&l, &scan, w.gating.embed_channels())
    })?;
    let ep = timed(&id, "sample", || stages::project(&scan, &grid))?;
    create_dir(&l.output_dir())?;
    let coords: Vec<f32> = scan
        .cmap
        .coords
        .iter()
        .flat_map(|c| [c[0] as f32, c[1] as f32])
        .collect();
    Tensor::new(vec![scan.cmap.len(), 2], coords)?.write(&l.output(stages::COORDS))?;
    stages::write_matrix(&l.output(stages::EMBEDDINGS), &ep)?;
    println!(
        "project: {} faces, {}x{} embeddings -> {}",
        scan.cmap.len(),
        ep.rows(),
        ep.cols(),
        l.output_dir().display()
    );
    Ok(())
}

pub fn fuse(path: &Path, o: &Overrides, skip_fusion: bool) -> CliResult<()> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let m = scan.mesh.num_faces();
    let f3d = stages::read_features(&l.output(stages::FEATURES), m)?;
    let out = l.output(stages::FUSED);
    if skip_fusion {
        stages::write_matrix(&out, &f3d.values)?;
        println!("fuse: skipped, features copied -> {}", out.display());
        return Ok(());
    }
    let (w, _) = timed(&id, "weights", || stages::load_weights(&l))?;
    let ep = stages::read_matrix(&l.output(stages::EMBEDDINGS), m)?;
    let mp = timed(&id, "guidance", || stages::guidance(&l, &scan, &f3d, &w))?;
    let fused = timed(&id, "fuse", || stages::fused(&f3d, &ep, &mp, &w))?;
    Tensor::from_vec(&mp.weights).write(&l.output(stages::GUIDANCE))?;
    stages::write_matrix(&out, &fused.values)?;
    println!(
        "fuse: {}x{} -> {}",
        fused.channels(),
        fused.num_faces(),
        out.display()
    );
    Ok(())
}

pub fn infer(path: &Path, o: &Overrides, skip_fusion: bool) -> CliResult<()> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (w, _) = timed(&id, "weights", || stages::load_weights(&l))?;
    let source = if skip_fusion {
        stages::FEATURES
    } else {
        stages::FUSED
    };
    let f = stages::read_features(&l.output(source), scan.mesh.num_faces())?;
    let pred = timed(&id, "decode", || stages::decode(&l, &scan, &f, &w))?;
    let out = l.output(stages::PREDICTION);
    write_json(&out, &PredictionFile::from(&pred))?;
    println!(
        "infer: {} instances, {} valid -> {}",
        pred.num_instances(),
        pred.num_valid(),
        out.display()
    );
    Ok(())
}

// match

#[derive(Debug, Clone, Serialize)]
pub struct PairEntry {
    pub prediction: usize,
    pub ground_truth: usize,
    pub label: u8,
    pub predicted_class: u8,
}

fn pair_entries(pred: &InstancePrediction, gt: &GroundTruth, a: &Assignment) -> Vec<PairEntry> {
    a.pairs
        .iter()
        .map(|&(i, l)| PairEntry {
            prediction: i,
            ground_truth: l,
            label: gt.labels[l],
            predicted_class: stages::predicted_class(pred, i),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct MatchReport {
    config_hash: String,
    scan_id: String,
    prediction_source: &'static str,
    matching: MatchConfig,
    num_valid: usize,
    num_teeth: usize,
    total_cost: f64,
    pairs: Vec<PairEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trail: Option<TrailDump>,
}

pub struct MatchArgs {
    pub perfect: bool,
    pub dump_similarity: bool,
    pub out: Option<PathBuf>,
}

pub fn match_cmd(path: &Path, o: &Overrides, a: &MatchArgs) -> CliResult<()> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (pred, source) = timed(&id, "prediction", || {
        stages::load_prediction(&l, &scan, a.perfect)
    })?;
    let cfg = l.config.matching;
    let (asg, trail) = timed(&id, "match", || {
        Ok(fhm_match(&pred, &scan.gt, &scan.scene, &cfg)?)
    })?;
    let pairs = pair_entries(&pred, &scan.gt, &asg);
    info!(
        "{id}: lambda_ord={} lambda_cent={} cost={:.6}",
        cfg.lambda_ord, cfg.lambda_cent, asg.total_cost
    );
    for p in &pairs {
        info!(
            "{id}: prediction {} -> tooth {} (row {}, predicted class {})",
            p.prediction, p.label, p.ground_truth, p.predicted_class
        );
    }
    let report = MatchReport {
        config_hash: l.config.hash(),
        scan_id: id,
        prediction_source: source,
        matching: cfg,
        num_valid: pred.num_valid(),
        num_teeth: scan.gt.num_teeth(),
        total_cost: asg.total_cost,
        pairs,
        trail: a.dump_similarity.then(|| TrailDump::from(&trail)),
    };
    let out = match &a.out {
        Some(p) => p.clone(),
        None => {
            create_dir(&l.output_dir())?;
            l.output(ASSIGNMENT)
        }
    };
    write_json(&out, &report)?;
    let agree = report
        .pairs
        .iter()
        .filter(|p| p.label == p.predicted_class)
        .count();
    println!(
        "match: {} pairs, {} with the predicted class, cost {:.6} -> {}",
        report.pairs.len(),
        agree,
        report.total_cost,
        out.display()
    );
    Ok(())
}

// eval

#[derive(Debug, Serialize)]
struct EvalReport {
    config_hash: String,
    prediction_source: &'static str,
    pairs: Vec<PairEntry>,
    metrics: MetricReport,
}

#[derive(Debug, Serialize)]
struct AggregateOut {
    config_hash: String,
    aggregate: AggregateReport,
}

fn evaluate(
    l: &Loaded,
    scan: &Scan,
    pred: &InstancePrediction,
) -> CliResult<(Vec<PairEntry>, MetricReport)> {
    let (asg, _) = fhm_match(pred, &scan.gt, &scan.scene, &l.config.matching)?;
    let mut metrics = evaluate_prediction(
        &l.scan_id(),
        pred,
        &scan.gt,
        &asg,
        &scan.scene,
        l.config.threshold,
    )?;
    metrics.losses = Some(evaluate_losses(
        pred,
        &scan.gt,
        &asg,
        &scan.cmap,
        l.config.threshold,
    )?);
    Ok((pair_entries(pred, &scan.gt, &asg), metrics))
}

fn eval_one(path: &Path, o: &Overrides, perfect: bool) -> CliResult<EvalReport> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (pred, source) = timed(&id, "prediction", || {
        stages::load_prediction(&l, &scan, perfect)
    })?;
    let (pairs, metrics) = timed(&id, "evaluate", || evaluate(&l, &scan, &pred))?;
    Ok(EvalReport {
        config_hash: l.config.hash(),
        prediction_source: source,
        pairs,
        metrics,
    })
}

pub fn eval(path: &Path, o: &Overrides, perfect: bool, out: Option<&Path>) -> CliResult<()> {
    let configs = collect_configs(path)?;
    if !path.is_dir() {
        let report = eval_one(path, o, perfect)?;
        let out = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let l = o.load(path)?;
                create_dir(&l.output_dir())?;
                l.output(EVAL_REPORT)
            }
        };
        write_json(&out, &report)?;
        println!(
            "eval: oa={:.6} miou={:.6} center_error={:.6} -> {}",
            report.metrics.oa,
            report.metrics.miou,
            report.metrics.center_error,
            out.display()
        );
        return Ok(());
    }
    let reports = configs
        .par_iter()
        .map(|c| eval_one(c, o, perfect).map_err(|e| e.in_stage(&c.display().to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let mut hasher = Sha256::new();
    for r in &reports {
        hasher.update(r.config_hash.as_bytes());
    }
    let agg = aggregate(reports.into_iter().map(|r| r.metrics).collect())?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.join(AGGREGATE));
    println!(
        "eval: {} scans, oa={:.6} miou={:.6} center_error={:.6} -> {}",
        agg.num_scans,
        agg.oa,
        agg.miou,
        agg.center_error,
        out.display()
    );
    write_json(
        &out,
        &AggregateOut {
            config_hash: format!("{:x}", hasher.finalize()),
            aggregate: agg,
        },
    )
}

// pipeline

#[derive(Debug, Serialize)]
struct PipelineReport {
    config_hash: String,
    scan_id: String,
    num_faces: usize,
    num_teeth: usize,
    weights: String,
    embedding_grid: String,
    fusion: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<&'static str>,
    num_instances: usize,
    num_valid: usize,
    total_cost: f64,
    pairs: Vec<PairEntry>,
    metrics: MetricReport,
}

fn pipeline_one(path: &Path, o: &Overrides, skip_fusion: bool) -> CliResult<PathBuf> {
    let l = o.load(path)?;
    let id = l.scan_id();
    let scan = timed(&id, "load", || stages::load_scan(&l))?;
    let (w, weights) = timed(&id, "weights", || stages::load_weights(&l))?;
    create_dir(&l.output_dir())?;
    let f3d = timed(&id, "encode", || stages::features(&scan, &w, l.config.k))?;
    stages::write_matrix(&l.output(stages::FEATURES), &f3d.values)?;

    let (f, grid_source) = if skip_fusion {
        (f3d, "unused".to_string())
    } else {
        let (grid, source) = timed(&id, "grid", || {
            stages::load_grid(&l, &scan, w.gating.embed_channels())
        })?;
        let ep = timed(&id, "sample", || stages::project(&scan, &grid))?;
        stages::write_matrix(&l.output(stages::EMBEDDINGS), &ep)?;
        let mp = timed(&id, "guidance", || stages::guidance(&l, &scan, &f3d, &w))?;
        Tensor::from_vec(&mp.weights).write(&l.output(stages::GUIDANCE))?;
        let fused = timed(&id, "fuse", || stages::fused(&f3d, &ep, &mp, &w))?;
        stages::write_matrix(&l.output(stages::FUSED), &fused.values)?;
        (fused, source)
    };

    let pred = timed(&id, "decode", || stages::decode(&l, &scan, &f, &w))?;
    write_json(&l.output(stages::PREDICTION), &PredictionFile::from(&pred))?;
    let (asg, _) = timed(&id, "match", || {
        Ok(fhm_match(&pred, &scan.gt, &scan.scene, &l.config.matching)?)
    })?;
    let mut metrics = timed(&id, "metrics", || {
        Ok(evaluate_prediction(
            &id,
            &pred,
            &scan.gt,
            &asg,
            &scan.scene,
            l.config.threshold,
        )?)
    })?;
    metrics.losses = Some(timed(&id, "losses", || {
        Ok(evaluate_losses(
            &pred,
            &scan.gt,
            &asg,
            &scan.cmap,
            l.config.threshold,
        )?)
    })?);

    let report = PipelineReport {
        config_hash: l.config.hash(),
        scan_id: id,
        num_faces: scan.mesh.num_faces(),
        num_teeth: scan.gt.num_teeth(),
        weights,
        embedding_grid: grid_source,
        fusion: if skip_fusion { "skipped" } else { "gated" },
        ablation: skip_fusion.then_some("skip_fusion"),
        num_instances: pred.num_instances(),
        num_valid: pred.num_valid(),
        total_cost: asg.total_cost,
        pairs: pair_entries(&pred, &scan.gt, &asg),
        metrics,
    };
    let out = l.output(PIPELINE_REPORT);
    write_json(&out, &report)?;
    println!(
        "pipeline: {} M={} valid={} oa={:.6} miou={:.6} -> {}",
        report.scan_id,
        report.num_faces,
        report.num_valid,
        report.metrics.oa,
        report.metrics.miou,
        out.display()
    );
    Ok(out)
}

pub fn pipeline(path: &Path, o: &Overrides, skip_fusion: bool) -> CliResult<()> {
    let configs = collect_configs(path)?;
    configs
        .par_iter()
        .map(|c| pipeline_one(c, o, skip_fusion).map_err(|e| e.in_stage(&c.display().to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(())
}
