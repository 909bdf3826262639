//! Order-aware Hungarian matching between predicted instances and
//! ground-truth teeth.

use serde::{Deserialize, Serialize};

use crate::cmr::InstancePrediction;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Matrix};
use crate::mesh::{FaceGeometry, Jaw, LabeledMesh, SceneFrame, Vec3, GINGIVA, NUM_CLASSES};

pub const DICE_EPS: f64 = 1e-6;
/// Cost standing in for an excluded (minus infinity similarity) entry.
pub const EXCLUDED_COST: f64 = 1e9;
pub const NUM_POSITIONS: usize = 16;

/// Per-class ground truth of one scan. Rows follow ascending label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `L x M` binary.
    pub masks: Matrix,
    pub labels: Vec<u8>,
    /// Mean face center of each class.
    pub centers3d: Vec<Vec3>,
    pub jaw: Jaw,
}

impl GroundTruth {
    pub fn from_mesh(mesh: &LabeledMesh, geom: &FaceGeometry) -> Result<Self> {
        let m = mesh.num_faces();
        if geom.num_faces() != m {
            return Err(Error::shape("ground truth geometry", m, geom.num_faces()));
        }
        let mut present = [false; NUM_CLASSES];
        for &l in mesh.face_labels() {
            present[l as usize] = true;
        }
        let labels: Vec<u8> = (1..NUM_CLASSES as u8)
            .filter(|&l| present[l as usize])
            .collect();
        if labels.is_empty() {
            return Err(Error::Empty("ground truth teeth"));
        }
        let mut masks = Matrix::zeros(labels.len(), m);
        let mut centers3d = Vec::with_capacity(labels.len());
        for (row, &l) in labels.iter().enumerate() {
            let mut sum = [0.0; 3];
            let mut count = 0usize;
            for (p, &fl) in mesh.face_labels().iter().enumerate() {
                if fl == l {
                    masks.set(row, p, 1.0);
                    for k in 0..3 {
                        sum[k] += geom.centers[p][k];
                    }
                    count += 1;
                }
            }
            let n = count as f64;
            centers3d.push([sum[0] / n, sum[1] / n, sum[2] / n]);
        }
        Ok(Self {
            masks,
            labels,
            centers3d,
            jaw: mesh.jaw(),
        })
    }

    pub fn num_teeth(&self) -> usize {
        self.labels.len()
    }

    pub fn num_faces(&self) -> usize {
        self.masks.cols()
    }

    /// Face labels implied by the masks (faces outside every mask are gingiva).
    pub fn face_labels(&self) -> Vec<u8> {
        let mut out = vec![GINGIVA; self.num_faces()];
        for (row, &l) in self.labels.iter().enumerate() {
            for (p, &v) in self.masks.row(row).iter().enumerate() {
                if v > 0.5 {
                    out[p] = l;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels.len();
        if l == 0 || l > NUM_POSITIONS {
            return Err(Error::Schema {
                context: "ground truth".into(),
                message: format!("expected 1..=16 teeth, found {l}"),
            });
        }
        if self.masks.rows() != l {
            return Err(Error::shape("ground truth masks", l, self.masks.rows()));
        }
        if self.centers3d.len() != l {
            return Err(Error::shape(
                "ground truth centers",
                l,
                self.centers3d.len(),
            ));
        }
        let mut seen = [false; NUM_CLASSES];
        for (row, &label) in self.labels.iter().enumerate() {
            if label == GINGIVA || label as usize >= NUM_CLASSES {
                return Err(Error::InvalidLabel(label as i64));
            }
            if std::mem::replace(&mut seen[label as usize], true) {
                return Err(Error::Schema {
                    context: "ground truth labels".into(),
                    message: format!("label {label} repeated"),
                });
            }
            let r = self.masks.row(row);
            if r.iter().any(|&v| v != 0.0 && v != 1.0) || !r.contains(&1.0) {
                return Err(Error::Schema {
                    context: "ground truth masks".into(),
                    message: format!("row {row} must be binary and nonempty"),
                });
            }
        }
        if self.centers3d.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ground truth centers"));
        }
        Ok(())
    }
}

/// JSON form of [`GroundTruth`]: masks are stored as sorted face index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub jaw: Jaw,
    pub num_faces: usize,
    pub labels: Vec<u8>,
    pub centers3d: Vec<Vec3>,
    pub faces: Vec<Vec<usize>>,
}

impl From<&GroundTruth> for GroundTruthFile {
    fn from(gt: &GroundTruth) -> Self {
        Self {
            jaw: gt.jaw,
            num_faces: gt.num_faces(),
            labels: gt.labels.clone(),
            centers3d: gt.centers3d.clone(),
            faces: (0..gt.num_teeth())
                .map(|r| {
                    gt.masks
                        .row(r)
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v > 0.5)
                        .map(|(p, _)| p)
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<GroundTruthFile> for GroundTruth {
    type Error = Error;

    fn try_from(f: GroundTruthFile) -> Result<Self> {
        if f.faces.len() != f.labels.len() {
            return Err(Error::shape(
                "ground truth face lists",
                f.labels.len(),
                f.faces.len(),
            ));
        }
        let mut masks = Matrix::zeros(f.labels.len(), f.num_faces);
        for (row, list) in f.faces.iter().enumerate() {
            for &p in list {
                if p >= f.num_faces {
                    return Err(Error::InvalidFace {
                        face: p,
                        message: format!("ground truth index beyond {} faces", f.num_faces),
                    });
                }
                masks.set(row, p, 1.0);
            }
        }
        let gt = GroundTruth {
            masks,
            labels: f.labels,
            centers3d: f.centers3d,
            jaw: f.jaw,
        };
        gt.validate()?;
        Ok(gt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cent: f64,
    pub delta_drift: f64,
    pub lambda_ord: f64,
    pub delta_ord: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.2,
            lambda_cent: 0.5,
            delta_drift: 0.10,
            lambda_ord: 4.0,
            delta_ord: 0.15,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_cent", self.lambda_cent),
            ("lambda_ord", self.lambda_ord),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        for (name, v) in [
            ("delta_drift", self.delta_drift),
            ("delta_ord", self.delta_ord),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityStage {
    Base,
    CenterRefined,
    OrderRefined,
}

/// `N x L` similarities. Excluded predictions hold minus infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub stage: SimilarityStage,
}

/// Audit form of a similarity matrix; excluded entries become `null`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityDump {
    pub stage: SimilarityStage,
    pub values: Vec<Vec<Option<f64>>>,
}

impl From<&SimilarityMatrix> for SimilarityDump {
    fn from(s: &SimilarityMatrix) -> Self {
        Self {
            stage: s.stage,
            values: s
                .values
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.is_finite().then_some(v)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn gt_for_prediction(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(p, _)| p == i).map(|&(_, g)| g)
    }

    pub fn prediction_for_gt(&self, l: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, g)| g == l).map(|&(p, _)| p)
    }
}

fn dice(probs: &[f64], mask: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in probs.iter().zip(mask) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

/// Smoothed Dice between every probability row and every ground-truth mask.
pub fn dice_matrix(mask_probs: &Matrix, gt: &GroundTruth) -> Result<Matrix> {
    if mask_probs.cols() != gt.num_faces() {
        return Err(Error::shape(
            "dice_matrix faces",
            gt.num_faces(),
            mask_probs.cols(),
        ));
    }
    let (n, l) = (mask_probs.rows(), gt.num_teeth());
    let mut out = Matrix::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            out.set(i, j, dice(mask_probs.row(i), gt.masks.row(j)));
        }
    }
    Ok(out)
}

/// `S_mask^alpha * sigmoid(class_logit[y_l])^beta`.
pub fn base_similarity(
    s_mask: &Matrix,
    class_logits: &Matrix,
    gt: &GroundTruth,
    cfg: &MatchConfig,
) -> Result<SimilarityMatrix> {
    let (n, l) = s_mask.shape();
    if class_logits.shape() != (n, NUM_CLASSES) {
        return Err(Error::shape(
            "base_similarity class logits",
            format!("{n}x{NUM_CLASSES}"),
            format!("{:?}", class_logits.shape()),
        ));
    }
    if gt.num_teeth() != l {
        return Err(Error::shape("base_similarity teeth", l, gt.num_teeth()));
    }
    if let Some(&bad) = gt
        .labels
        .iter()
        .find(|&&y| y == GINGIVA || y as usize >= NUM_CLASSES)
    {
        return Err(Error::InvalidLabel(bad as i64));
    }
    let mut values = Matrix::zeros(n, l);
    for i in 0..n {
        for (j, &y) in gt.labels.iter().enumerate() {
            let s_cls = sigmoid(class_logits.get(i, y as usize));
            values.set(
                i,
                j,
                s_mask.get(i, j).powf(cfg.alpha) * s_cls.powf(cfg.beta),
            );
        }
    }
    Ok(SimilarityMatrix {
        values,
        stage: SimilarityStage::Base,
    })
}

#[inline]
fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

fn l1(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Subtracts the drift penalty; invalid predictions become minus infinity.
pub fn center_refine(
    c: &SimilarityMatrix,
    pred_centers: &[Vec3],
    valid: &[bool],
    gt: &GroundTruth,
    scene: &SceneFrame,
    cfg: &MatchConfig,
) -> Result<SimilarityMatrix> {
    let (n, l) = c.values.shape();
    if pred_centers.len() != n || valid.len() != n {
        return Err(Error::shape(
            "center_refine predictions",
            n,
            pred_centers.len().min(valid.len()),
        ));
    }
    if gt.centers3d.len() != l {
        return Err(Error::shape("center_refine teeth", l, gt.centers3d.len()));
    }
    if !(scene.diagonal > 0.0 && scene.diagonal.is_finite()) {
        return Err(Error::ZeroExtent("scene diagonal"));
    }
    let mut values = c.values.clone();
    for i in 0..n {
        if !valid[i] {
            values
                .row_mut(i)
                .iter_mut()
                .for_each(|v| *v = f64::NEG_INFINITY);
            continue;
        }
        if pred_centers[i].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted center"));
        }
        for j in 0..l {
            let d = l1(&pred_centers[i], &gt.centers3d[j]) / scene.diagonal;
            let penalty = cfg.lambda_cent * hinge(d - cfg.delta_drift);
            values.set(i, j, values.get(i, j) - penalty);
        }
    }
    Ok(SimilarityMatrix {
        values,
        stage: SimilarityStage::CenterRefined,
    })
}

/// Normalized arch ranks of the valid predictions; `None` for invalid ones.
///
/// Ties on the arch axis fall back to the y coordinate, then the index.
pub fn order_ranks(centers: &[Vec3], valid: &[bool], arch_axis: Vec3) -> Result<Vec<Option<f64>>> {
    if centers.len() != valid.len() {
        return Err(Error::shape("order_ranks", valid.len(), centers.len()));
    }
    let proj = |c: &Vec3| c[0] * arch_axis[0] + c[1] * arch_axis[1] + c[2] * arch_axis[2];
    let mut idx: Vec<usize> = (0..centers.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoValidPredictions);
    }
    idx.sort_by(|&a, &b| {
        proj(&centers[a])
            .total_cmp(&proj(&centers[b]))
            .then(centers[a][1].total_cmp(&centers[b][1]))
            .then(a.cmp(&b))
    });
    let n = idx.len();
    let mut out = vec![None; centers.len()];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = Some(if n == 1 {
            0.5
        } else {
            rank as f64 / (n - 1) as f64
        });
    }
    Ok(out)
}

/// Position 0..=15 along the arch, patient's right third molar first.
///
/// Classes 1..=8 and 9..=16 are the two quadrants, each running from the
/// central incisor to the third molar. The upper jaw's first quadrant and the
/// lower jaw's second quadrant lie on the patient's right.
pub fn fdi_position(label: u8, jaw: Jaw) -> Result<usize> {
    if !(1..=16).contains(&label) {
        return Err(Error::InvalidLabel(label as i64));
    }
    let c = label as usize;
    let (right, left) = match jaw {
        Jaw::Upper => (1..=8, 9..=16),
        Jaw::Lower => (9..=16, 1..=8),
    };
    Ok(if right.contains(&c) {
        right.end() - c
    } else {
        c - left.start() + 8
    })
}

pub fn fdi_to_ordinal(label: u8, jaw: Jaw) -> Result<f64> {
    Ok(fdi_position(label, jaw)? as f64 / 15.0)
}

/// Class occupying an arch position, the inverse of [`fdi_position`].
pub fn label_at_position(position: usize, jaw: Jaw) -> Result<u8> {
    (1..=16u8)
        .find(|&l| fdi_position(l, jaw).ok() == Some(position))
        .ok_or_else(|| Error::Config(format!("arch position {position} out of range")))
}

pub fn order_refine(
    c_cent: &SimilarityMatrix,
    ranks: &[Option<f64>],
    targets: &[f64],
    cfg: &MatchConfig,
) -> Result<SimilarityMatrix> {
    let (n, l) = c_cent.values.shape();
    if ranks.len() != n || targets.len() != l {
        return Err(Error::shape(
            "order_refine",
            format!("{n} ranks / {l} targets"),
            format!("{} / {}", ranks.len(), targets.len()),
        ));
    }
    let mut values = c_cent.values.clone();
    for (i, r) in ranks.iter().enumerate() {
        let Some(r) = r else {
            values
                .row_mut(i)
                .iter_mut()
                .for_each(|v| *v = f64::NEG_INFINITY);
            continue;
        };
        for (j, t) in targets.iter().enumerate() {
            let penalty = cfg.lambda_ord * hinge((r - t).abs() - cfg.delta_ord);
            values.set(i, j, values.get(i, j) - penalty);
        }
    }
    Ok(SimilarityMatrix {
        values,
        stage: SimilarityStage::OrderRefined,
    })
}

/// Minimum-cost assignment for `rows <= cols`. Returns the column of each row.
fn solve_wide(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    // potentials method, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum total cost of a `min(n, m)` matching over the given rows and columns.
fn optimum(cost: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let (wide, n, m) = if rows.len() <= cols.len() {
        let c: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| cols.iter().map(|&j| cost.get(i, j)).collect())
            .collect();
        (c, rows.len(), cols.len())
    } else {
        let c: Vec<Vec<f64>> = cols
            .iter()
            .map(|&j| rows.iter().map(|&i| cost.get(i, j)).collect())
            .collect();
        (c, cols.len(), rows.len())
    };
    solve_wide(&wide, n, m)
        .iter()
        .enumerate()
        .map(|(r, &c)| wide[r][c])
        .sum()
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs.
///
/// Non-finite costs are replaced by [`EXCLUDED_COST`]. Among optimal
/// assignments the lexicographically smallest one is returned, comparing the
/// column chosen for each row in row order with "unassigned" ranked last.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    let cost = cost.map(|c| if c.is_finite() { c } else { EXCLUDED_COST });
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(&cost, &all_rows, &all_cols);
    let tol = 1e-12 * (1.0 + cost.max_abs()) * n.max(m) as f64;

    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(n.min(m));
    let mut skipped = 0usize;
    for i in 0..n {
        let rest: Vec<usize> = ((i + 1)..n).collect();
        let mut chosen = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let others: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            // the remaining rows must still complete a maximum-size matching
            if rest.len().min(others.len()) + pairs.len() + 1 != n.min(m) {
                continue;
            }
            let total = fixed + cost.get(i, j) + optimum(&cost, &rest, &others);
            if total <= best + tol {
                chosen = Some(slot);
                break;
            }
        }
        match chosen {
            Some(slot) => {
                let j = free_cols.remove(slot);
                fixed += cost.get(i, j);
                pairs.push((i, j));
            }
            None => skipped += 1,
        }
    }
    debug_assert_eq!(pairs.len() + skipped, n);
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// All intermediate matrices of one matching run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTrail {
    pub s_mask: Matrix,
    pub base: SimilarityMatrix,
    pub center: SimilarityMatrix,
    pub order: SimilarityMatrix,
    pub ranks: Vec<Option<f64>>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrailDump {
    pub s_mask: Vec<Vec<f64>>,
    pub base: SimilarityDump,
    pub center: SimilarityDump,
    pub order: SimilarityDump,
    pub ranks: Vec<Option<f64>>,
    pub targets: Vec<f64>,
}

impl From<&MatchTrail> for TrailDump {
    fn from(t: &MatchTrail) -> Self {
        Self {
            s_mask: t.s_mask.to_rows(),
            base: (&t.base).into(),
            center: (&t.center).into(),
            order: (&t.order).into(),
            ranks: t.ranks.clone(),
            targets: t.targets.clone(),
        }
    }
}

/// Dice, base similarity, center and order refinement, then Hungarian on the
/// negated similarities of the valid predictions.
pub fn fhm_match(
    pred: &InstancePrediction,
    gt: &GroundTruth,
    scene: &SceneFrame,
    cfg: &MatchConfig,
) -> Result<(Assignment, MatchTrail)> {
    cfg.validate()?;
    pred.validate()?;
    gt.validate()?;
    if pred.num_valid() == 0 {
        return Err(Error::NoValidPredictions);
    }
    let s_mask = dice_matrix(&pred.mask_probs(), gt)?;
    let base = base_similarity(&s_mask, &pred.class_logits, gt, cfg)?;
    let center = center_refine(&base, &pred.centers3d, &pred.valid, gt, scene, cfg)?;
    let ranks = order_ranks(&pred.centers3d, &pred.valid, scene.arch_axis)?;
    let targets = gt
        .labels
        .iter()
        .map(|&y| fdi_to_ordinal(y, gt.jaw))
        .collect::<Result<Vec<_>>>()?;
    let order = order_refine(&center, &ranks, &targets, cfg)?;

    let valid_rows: Vec<usize> = (0..pred.num_instances())
        .filter(|&i| pred.valid[i])
        .collect();
    let cost = order.values.select_rows(&valid_rows).map(|s| -s);
    let local = hungarian(&cost)?;
    let assignment = Assignment {
        pairs: local
            .pairs
            .iter()
            .map(|&(r, l)| (valid_rows[r], l))
            .collect(),
        total_cost: local.total_cost,
    };
    Ok((
        assignment,
        MatchTrail {
            s_mask,
            base,
            center,
            order,
            ranks,
            targets,
        },
    ))
}
