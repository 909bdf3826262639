//! Center-guided mask refinement: attention pooling into instance slots,
//! decoder heads, mask-derived instance centers, class-consistent
//! pseudo-masks and the center regularizer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FaceFeatureSet, FEATURE_CHANNELS, INIT_BOUND};
use crate::error::{Error, Result};
use crate::linalg::{bce_with_logits, dist2, sigmoid, Linear, Matrix};
use crate::mesh::{FaceGeometry, Vec3, NUM_CLASSES};
use crate::par;
use crate::projection::CoordinateMap;

pub const NUM_SLOTS: usize = 120;
pub const NUM_QUERIES: usize = 30;
pub const DEFAULT_MASK_DIM: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Raw attention mass below which a slot falls back to uniform pooling.
pub const ATTENTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `128 -> K` attention logits.
    pub attn_proj: Linear,
    /// `K -> N`, mixes slots into queries (bias broadcast over channels).
    pub bottleneck: Linear,
    /// `128 -> D` dynamic mask kernels.
    pub kernel_head: Linear,
    /// `128 -> 17`.
    pub class_head: Linear,
    /// `128 -> 1`.
    pub obj_head: Linear,
    /// `128 -> D` face features the kernels are applied to.
    pub mask_proj: Linear,
}

impl DecoderWeights {
    pub fn seeded_from(
        rng: &mut ChaCha8Rng,
        slots: usize,
        queries: usize,
        mask_dim: usize,
    ) -> Self {
        let f = FEATURE_CHANNELS;
        Self {
            attn_proj: Linear::random_uniform(slots, f, INIT_BOUND, rng),
            bottleneck: Linear::random_uniform(queries, slots, INIT_BOUND, rng),
            kernel_head: Linear::random_uniform(mask_dim, f, INIT_BOUND, rng),
            class_head: Linear::random_uniform(NUM_CLASSES, f, INIT_BOUND, rng),
            obj_head: Linear::random_uniform(1, f, INIT_BOUND, rng),
            mask_proj: Linear::random_uniform(mask_dim, f, INIT_BOUND, rng),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.attn_proj.out_dim()
    }

    pub fn num_queries(&self) -> usize {
        self.bottleneck.out_dim()
    }

    pub fn mask_dim(&self) -> usize {
        self.mask_proj.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.attn_proj.in_dim();
        let checks: [(&'static str, usize, usize); 8] = [
            (
                "bottleneck input",
                self.num_slots(),
                self.bottleneck.in_dim(),
            ),
            ("kernel head input", f, self.kernel_head.in_dim()),
            ("class head input", f, self.class_head.in_dim()),
            ("class head output", NUM_CLASSES, self.class_head.out_dim()),
            ("objectness head input", f, self.obj_head.in_dim()),
            ("objectness head output", 1, self.obj_head.out_dim()),
            ("mask projection input", f, self.mask_proj.in_dim()),
            (
                "mask kernel width",
                self.mask_dim(),
                self.kernel_head.out_dim(),
            ),
        ];
        for (ctx, want, got) in checks {
            if want != got {
                return Err(Error::shape(ctx, want, got));
            }
        }
        let all = [
            &self.attn_proj,
            &self.bottleneck,
            &self.kernel_head,
            &self.class_head,
            &self.obj_head,
            &self.mask_proj,
        ];
        if !all.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite("decoder weights"));
        }
        Ok(())
    }
}

/// Decoder output plus the mask-derived centers.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// `N x M`
    pub mask_logits: Matrix,
    /// `N x 17`
    pub class_logits: Matrix,
    pub objectness: Vec<f64>,
    pub centers3d: Vec<Vec3>,
    pub centers2d: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl InstancePrediction {
    pub fn num_instances(&self) -> usize {
        self.mask_logits.rows()
    }

    pub fn num_faces(&self) -> usize {
        self.mask_logits.cols()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn mask_probs(&self) -> Matrix {
        self.mask_logits.map(sigmoid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_instances();
        if self.class_logits.shape() != (n, NUM_CLASSES) {
            return Err(Error::shape(
                "prediction class logits",
                format!("{n}x{NUM_CLASSES}"),
                format!("{:?}", self.class_logits.shape()),
            ));
        }
        for (ctx, len) in [
            ("prediction objectness", self.objectness.len()),
            ("prediction centers3d", self.centers3d.len()),
            ("prediction centers2d", self.centers2d.len()),
            ("prediction valid flags", self.valid.len()),
        ] {
            if len != n {
                return Err(Error::shape(ctx, n, len));
            }
        }
        if !(self.mask_logits.is_finite() && self.class_logits.is_finite())
            || self.objectness.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("prediction logits"));
        }
        Ok(())
    }
}

/// JSON form of an [`InstancePrediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub num_faces: usize,
    pub mask_logits: Vec<Vec<f64>>,
    pub class_logits: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
    pub centers3d: Vec<Vec3>,
    pub centers2d: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl From<&InstancePrediction> for PredictionFile {
    fn from(p: &InstancePrediction) -> Self {
        Self {
            num_faces: p.num_faces(),
            mask_logits: p.mask_logits.to_rows(),
            class_logits: p.class_logits.to_rows(),
            objectness: p.objectness.clone(),
            centers3d: p.centers3d.clone(),
            centers2d: p.centers2d.clone(),
            valid: p.valid.clone(),
        }
    }
}

impl TryFrom<PredictionFile> for InstancePrediction {
    type Error = Error;

    fn try_from(f: PredictionFile) -> Result<Self> {
        let mask_logits = if f.mask_logits.is_empty() {
            Matrix::zeros(0, f.num_faces)
        } else {
            Matrix::from_rows(&f.mask_logits)?
        };
        if mask_logits.cols() != f.num_faces {
            return Err(Error::shape(
                "prediction mask logits",
                f.num_faces,
                mask_logits.cols(),
            ));
        }
        let class_logits = if f.class_logits.is_empty() {
            Matrix::zeros(0, NUM_CLASSES)
        } else {
            Matrix::from_rows(&f.class_logits)?
        };
        let p = InstancePrediction {
            mask_logits,
            class_logits,
            objectness: f.objectness,
            centers3d: f.centers3d,
            centers2d: f.centers2d,
            valid: f.valid,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Logistic attention maps `A = sigmoid(attn_proj(f))`, `K x M`.
pub fn attention_maps(f: &Matrix, w: &DecoderWeights) -> Result<Matrix> {
    Ok(w.attn_proj.apply(f)?.map(sigmoid))
}

/// Normalizes each row to sum to one; rows with almost no mass become uniform.
pub fn normalize_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    let m = a.cols();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        if total < ATTENTION_EPS {
            row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
        } else {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

/// `F_inst = normalize_rows(A) * f^T`, `K x C`.
pub fn pool_instances(a: &Matrix, f: &Matrix) -> Result<Matrix> {
    if a.cols() != f.cols() {
        return Err(Error::shape("pool_instances faces", f.cols(), a.cols()));
    }
    normalize_rows(a).matmul(&f.transpose())
}

/// Attention maps and pooled instance descriptors.
pub fn attention_pool(f: &FaceFeatureSet, w: &DecoderWeights) -> Result<(Matrix, Matrix)> {
    let a = attention_maps(&f.values, w)?;
    let inst = pool_instances(&a, &f.values)?;
    Ok((a, inst))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHeads {
    pub mask_logits: Matrix,
    pub class_logits: Matrix,
    pub objectness: Vec<f64>,
}

/// Applies a linear map to each row of `x` (rows are samples).
fn apply_rows(l: &Linear, x: &Matrix) -> Result<Matrix> {
    Ok(l.apply(&x.transpose())?.transpose())
}

pub fn decode_instances(
    inst: &Matrix,
    f: &FaceFeatureSet,
    w: &DecoderWeights,
) -> Result<DecodedHeads> {
    w.validate()?;
    if inst.rows() != w.num_slots() || inst.cols() != w.attn_proj.in_dim() {
        return Err(Error::shape(
            "decode_instances slots",
            format!("{}x{}", w.num_slots(), w.attn_proj.in_dim()),
            format!("{}x{}", inst.rows(), inst.cols()),
        ));
    }
    if f.channels() != w.mask_proj.in_dim() {
        return Err(Error::shape(
            "decode_instances features",
            w.mask_proj.in_dim(),
            f.channels(),
        ));
    }
    // queries: N x C, slot mixing with one bias per query
    let queries = w.bottleneck.apply(inst)?;
    let kernels = apply_rows(&w.kernel_head, &queries)?;
    let projected = w.mask_proj.apply(&f.values)?;
    let mask_logits = kernels.matmul(&projected)?;
    let class_logits = apply_rows(&w.class_head, &queries)?;
    let objectness = apply_rows(&w.obj_head, &queries)?.into_vec();
    Ok(DecodedHeads {
        mask_logits,
        class_logits,
        objectness,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedCenters {
    pub centers3d: Vec<Vec3>,
    pub centers2d: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    /// Face chosen as the center of each valid instance.
    pub faces: Vec<Option<usize>>,
}

/// Center of an instance: the active face closest to the active-face centroid.
///
/// Returns `None` for an empty mask. Only active faces are candidates; ties go
/// to the lowest face index.
pub fn center_face(active: &[usize], geom: &FaceGeometry) -> Option<usize> {
    if active.is_empty() {
        return None;
    }
    let mut sum = [0.0; 3];
    for &p in active {
        for k in 0..3 {
            sum[k] += geom.centers[p][k];
        }
    }
    let n = active.len() as f64;
    let centroid = [sum[0] / n, sum[1] / n, sum[2] / n];
    nearest_active(active, geom, &centroid)
}

/// Active face whose center is nearest `target` (ties to the lower index).
pub fn nearest_active(active: &[usize], geom: &FaceGeometry, target: &Vec3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &p in active {
        let d = dist2(&geom.centers[p], target);
        match best {
            Some((bd, bp)) if d > bd || (d == bd && p > bp) => {}
            _ => best = Some((d, p)),
        }
    }
    best.map(|(_, p)| p)
}

pub fn active_faces(logits: &[f64], threshold: f64) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &x)| sigmoid(x) > threshold)
        .map(|(p, _)| p)
        .collect()
}

pub fn derive_centers(
    mask_logits: &Matrix,
    geom: &FaceGeometry,
    cmap: &CoordinateMap,
    threshold: f64,
) -> Result<DerivedCenters> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let m = mask_logits.cols();
    if geom.num_faces() != m || cmap.len() != m {
        return Err(Error::shape(
            "derive_centers faces",
            m,
            format!("{} geometry / {} coordinates", geom.num_faces(), cmap.len()),
        ));
    }
    let faces = par::map_range(mask_logits.rows(), |i| {
        center_face(&active_faces(mask_logits.row(i), threshold), geom)
    });
    Ok(DerivedCenters {
        centers3d: faces
            .iter()
            .map(|f| f.map_or([0.0; 3], |p| geom.centers[p]))
            .collect(),
        centers2d: faces
            .iter()
            .map(|f| f.map_or([0.0; 2], |p| cmap.coords[p]))
            .collect(),
        valid: faces.iter().map(Option::is_some).collect(),
        faces,
    })
}

/// Binary `N x M` class-consistent pseudo-mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub rows: Matrix,
}

/// Each valid instance takes the label of the face nearest its 2D center
/// (ties to the lowest index) and expands it to every face with that label.
pub fn pseudo_mask(
    centers2d: &[[f64; 2]],
    valid: &[bool],
    cmap: &CoordinateMap,
    labels: &[u8],
) -> Result<PseudoMask> {
    let m = labels.len();
    if cmap.len() != m {
        return Err(Error::shape("pseudo_mask coordinates", m, cmap.len()));
    }
    if centers2d.len() != valid.len() {
        return Err(Error::shape(
            "pseudo_mask centers",
            valid.len(),
            centers2d.len(),
        ));
    }
    let mut rows = Matrix::zeros(valid.len(), m);
    for (i, (&[cy, cx], &ok)) in centers2d.iter().zip(valid).enumerate() {
        if !ok || m == 0 {
            continue;
        }
        let mut best = (f64::INFINITY, 0usize);
        for (p, &[y, x]) in cmap.coords.iter().enumerate() {
            let d = (y - cy).powi(2) + (x - cx).powi(2);
            if d < best.0 {
                best = (d, p);
            }
        }
        let class = labels[best.1];
        for (v, &l) in rows.row_mut(i).iter_mut().zip(labels) {
            if l == class {
                *v = 1.0;
            }
        }
    }
    Ok(PseudoMask { rows })
}

/// Mean binary cross-entropy with logits over all `N x M` entries.
pub fn pseudo_mask_loss(mask_logits: &Matrix, pm: &PseudoMask) -> Result<f64> {
    if mask_logits.shape() != pm.rows.shape() {
        return Err(Error::shape(
            "pseudo_mask_loss",
            format!("{:?}", pm.rows.shape()),
            format!("{:?}", mask_logits.shape()),
        ));
    }
    let n = mask_logits.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = mask_logits
        .as_slice()
        .iter()
        .zip(pm.rows.as_slice())
        .map(|(&x, &y)| bce_with_logits(x, y))
        .sum();
    Ok(total / n as f64)
}

/// Smooth-L1 with transition at `beta`.
#[inline]
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean over matched pairs of the xyz-summed Smooth-L1 (beta = 1) distance.
pub fn center_loss(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("center_loss pairs", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (0..3).map(|k| smooth_l1(a[k] - b[k], 1.0)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Attention pooling, decoding and center derivation in one pass.
pub fn infer(
    f: &FaceFeatureSet,
    geom: &FaceGeometry,
    cmap: &CoordinateMap,
    w: &DecoderWeights,
    threshold: f64,
) -> Result<InstancePrediction> {
    let (_, inst) = attention_pool(f, w)?;
    let heads = decode_instances(&inst, f, w)?;
    let centers = derive_centers(&heads.mask_logits, geom, cmap, threshold)?;
    Ok(InstancePrediction {
        mask_logits: heads.mask_logits,
        class_logits: heads.class_logits,
        objectness: heads.objectness,
        centers3d: centers.centers3d,
        centers2d: centers.centers2d,
        valid: centers.valid,
    })
}
