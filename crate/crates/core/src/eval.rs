//! Face-level segmentation metrics, pairwise confusion rates and normalized
//! center error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmr::InstancePrediction;
use crate::error::{Error, Result};
use crate::fhm::{Assignment, GroundTruth};
use crate::linalg::Matrix;
use crate::losses::LossBreakdown;
use crate::mesh::{SceneFrame, Vec3, GINGIVA, NUM_CLASSES};

/// Confusable tooth groups, as per-quadrant class offsets 1..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToothPair {
    /// Second molar versus third molar.
    Pair2nd3rd,
    /// Premolars versus first molar.
    PairPreMo,
    /// Central versus lateral incisor.
    PairCenLat,
}

impl ToothPair {
    pub const ALL: [ToothPair; 3] = [
        ToothPair::Pair2nd3rd,
        ToothPair::PairPreMo,
        ToothPair::PairCenLat,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ToothPair::Pair2nd3rd => "pair_2nd3rd",
            ToothPair::PairPreMo => "pair_pre_mo",
            ToothPair::PairCenLat => "pair_cen_lat",
        }
    }

    fn offsets(self) -> (&'static [u8], &'static [u8]) {
        match self {
            ToothPair::Pair2nd3rd => (&[7], &[8]),
            ToothPair::PairPreMo => (&[4, 5], &[6]),
            ToothPair::PairCenLat => (&[1], &[2]),
        }
    }

    /// The competing group of `label`, or `None` if the label is outside the pair.
    pub fn other_group(self, label: u8) -> Option<Vec<u8>> {
        if !(1..=16).contains(&label) {
            return None;
        }
        let quadrant = if label > 8 { 8 } else { 0 };
        let offset = label - quadrant;
        let (a, b) = self.offsets();
        let other = if a.contains(&offset) {
            b
        } else if b.contains(&offset) {
            a
        } else {
            return None;
        };
        Some(other.iter().map(|o| o + quadrant).collect())
    }
}

pub fn class_name(c: usize) -> String {
    if c == GINGIVA as usize {
        "BG".to_string()
    } else {
        format!("T{c}")
    }
}

fn check_labels(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("label vectors", gt.len(), pred.len()));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::InvalidLabel(bad as i64));
    }
    Ok(())
}

pub fn overall_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_labels(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::Empty("label vectors"));
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    /// `None` when the class is absent from both prediction and ground truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

pub fn class_counts(pred: &[u8], gt: &[u8]) -> Result<[ClassCounts; NUM_CLASSES]> {
    check_labels(pred, gt)?;
    let mut counts = [ClassCounts::default(); NUM_CLASSES];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            counts[p as usize].tp += 1;
        } else {
            counts[p as usize].fp += 1;
            counts[g as usize].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Mean IoU over classes present in either labeling, with the per-class table.
pub fn mean_iou(pred: &[u8], gt: &[u8]) -> Result<(f64, [Option<f64>; NUM_CLASSES])> {
    let counts = class_counts(pred, gt)?;
    let per_class = counts.map(|c| c.iou());
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Empty("label vectors"));
    }
    Ok((
        present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    ))
}

/// Majority predicted label of a face set, ties to the lowest label.
fn majority(pred: &[u8], faces: &[usize]) -> u8 {
    let mut votes = [0usize; NUM_CLASSES];
    for &p in faces {
        votes[pred[p] as usize] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best as u8
}

/// Fraction of ground-truth teeth in the pair whose majority prediction is the
/// competing group. `None` when no tooth of the pair is present.
pub fn pairwise_confusion(pred: &[u8], gt: &[u8], pair: ToothPair) -> Result<Option<f64>> {
    check_labels(pred, gt)?;
    let mut faces: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (p, &g) in gt.iter().enumerate() {
        if g != GINGIVA {
            faces.entry(g).or_default().push(p);
        }
    }
    let mut total = 0usize;
    let mut confused = 0usize;
    for (&label, members) in &faces {
        let Some(other) = pair.other_group(label) else {
            continue;
        };
        total += 1;
        if other.contains(&majority(pred, members)) {
            confused += 1;
        }
    }
    Ok((total > 0).then(|| confused as f64 / total as f64))
}

/// Mean L1 center distance over matched pairs, divided by the scene diagonal.
pub fn center_error(pred: &[Vec3], gt: &[Vec3], scene: &SceneFrame) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("center_error pairs", gt.len(), pred.len()));
    }
    if !(scene.diagonal > 0.0 && scene.diagonal.is_finite()) {
        return Err(Error::ZeroExtent("scene diagonal"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / scene.diagonal
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Face labels from matched instances: each face takes the class of the
/// matched instance with the highest mask probability above `threshold`;
/// uncovered faces stay gingiva.
pub fn labels_from_prediction(
    pred: &InstancePrediction,
    assignment: &Assignment,
    threshold: f64,
) -> Vec<u8> {
    let probs: Matrix = pred.mask_probs();
    let mut best = vec![(threshold, GINGIVA); pred.num_faces()];
    for &(i, _) in &assignment.pairs {
        let row = pred.class_logits.row(i);
        let class = (1..NUM_CLASSES)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(1) as u8;
        for (p, &prob) in probs.row(i).iter().enumerate() {
            if prob > best[p].0 {
                best[p] = (prob, class);
            }
        }
    }
    best.into_iter().map(|(_, c)| c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scan_id: String,
    pub oa: f64,
    pub miou: f64,
    /// Keys `T1..T16` and `BG`; `null` when the class is absent from both.
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub pair_confusion: BTreeMap<String, Option<f64>>,
    pub center_error: f64,
    pub counts: BTreeMap<String, ClassCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossBreakdown>,
}

pub fn evaluate_labels(
    scan_id: &str,
    pred: &[u8],
    gt: &[u8],
    pred_centers: &[Vec3],
    gt_centers: &[Vec3],
    scene: &SceneFrame,
) -> Result<MetricReport> {
    let oa = overall_accuracy(pred, gt)?;
    let (miou, per_class) = mean_iou(pred, gt)?;
    let counts = class_counts(pred, gt)?;
    let mut pair_confusion = BTreeMap::new();
    for pair in ToothPair::ALL {
        pair_confusion.insert(pair.key().to_string(), pairwise_confusion(pred, gt, pair)?);
    }
    Ok(MetricReport {
        scan_id: scan_id.to_string(),
        oa,
        miou,
        per_class_iou: (0..NUM_CLASSES)
            .map(|c| (class_name(c), per_class[c]))
            .collect(),
        pair_confusion,
        center_error: center_error(pred_centers, gt_centers, scene)?,
        counts: (0..NUM_CLASSES)
            .map(|c| (class_name(c), counts[c]))
            .collect(),
        losses: None,
    })
}

/// Metrics of a matched prediction against its ground truth.
pub fn evaluate_prediction(
    scan_id: &str,
    pred: &InstancePrediction,
    gt: &GroundTruth,
    assignment: &Assignment,
    scene: &SceneFrame,
    threshold: f64,
) -> Result<MetricReport> {
    let labels = labels_from_prediction(pred, assignment, threshold);
    let pred_centers: Vec<Vec3> = assignment
        .pairs
        .iter()
        .map(|&(i, _)| pred.centers3d[i])
        .collect();
    let gt_centers: Vec<Vec3> = assignment
        .pairs
        .iter()
        .map(|&(_, l)| gt.centers3d[l])
        .collect();
    evaluate_labels(
        scan_id,
        &labels,
        &gt.face_labels(),
        &pred_centers,
        &gt_centers,
        scene,
    )
}

/// Macro aggregate over scans: per-scan values averaged, per-class IoU
/// averaged over the scans where the class occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub aggregation: String,
    pub num_scans: usize,
    pub oa: f64,
    pub miou: f64,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub pair_confusion: BTreeMap<String, Option<f64>>,
    pub center_error: f64,
    pub scans: Vec<MetricReport>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(scans: Vec<MetricReport>) -> Result<AggregateReport> {
    if scans.is_empty() {
        return Err(Error::Empty("scan reports"));
    }
    let n = scans.len() as f64;
    let keyed = |pick: fn(&MetricReport) -> &BTreeMap<String, Option<f64>>| {
        let mut keys: Vec<&String> = scans.iter().flat_map(|s| pick(s).keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                (
                    k.clone(),
                    mean_of(scans.iter().map(|s| pick(s).get(k).copied().flatten())),
                )
            })
            .collect::<BTreeMap<_, _>>()
    };
    let per_class_iou = keyed(|s| &s.per_class_iou);
    let pair_confusion = keyed(|s| &s.pair_confusion);
    Ok(AggregateReport {
        aggregation: "macro".to_string(),
        num_scans: scans.len(),
        oa: scans.iter().map(|s| s.oa).sum::<f64>() / n,
        miou: scans.iter().map(|s| s.miou).sum::<f64>() / n,
        per_class_iou,
        pair_confusion,
        center_error: scans.iter().map(|s| s.center_error).sum::<f64>() / n,
        scans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(d: f64) -> SceneFrame {
        SceneFrame {
            bbox_min: [0.0; 3],
            bbox_max: [d, 0.0, 0.0],
            diagonal: d,
            arch_axis: [1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(overall_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(
            overall_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(),
            0.75
        );
        assert_eq!(overall_accuracy(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert!(overall_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn iou_examples() {
        let (m, per) = mean_iou(&[1, 1, 2, 2], &[1, 2, 2, 2]).unwrap();
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(per[0], None);
        assert_eq!(per[5], None);
        assert_eq!(mean_iou(&[3, 4], &[3, 4]).unwrap().0, 1.0);
        assert!(mean_iou(&[17], &[1]).is_err());
    }

    #[test]
    fn pair_groups() {
        assert_eq!(ToothPair::Pair2nd3rd.other_group(8), Some(vec![7]));
        assert_eq!(ToothPair::Pair2nd3rd.other_group(15), Some(vec![16]));
        assert_eq!(ToothPair::PairPreMo.other_group(14), Some(vec![12, 13]));
        assert_eq!(ToothPair::PairPreMo.other_group(4), Some(vec![6]));
        assert_eq!(ToothPair::PairCenLat.other_group(9), Some(vec![10]));
        assert_eq!(ToothPair::PairCenLat.other_group(3), None);
        assert_eq!(ToothPair::PairCenLat.other_group(0), None);
    }

    #[test]
    fn confusion_examples() {
        // two third molars (8 and 16); the second is predicted as 15
        let gt = [8, 8, 16, 16, 16, 0];
        let pred = [8, 8, 15, 15, 16, 0];
        assert_eq!(
            pairwise_confusion(&pred, &gt, ToothPair::Pair2nd3rd).unwrap(),
            Some(0.5)
        );
        assert_eq!(
            pairwise_confusion(&gt, &gt, ToothPair::Pair2nd3rd).unwrap(),
            Some(0.0)
        );
        assert_eq!(
            pairwise_confusion(&pred, &gt, ToothPair::PairCenLat).unwrap(),
            None
        );
        // a wrong label outside the competing group is not a pair confusion
        assert_eq!(
            pairwise_confusion(&[3, 3], &[8, 8], ToothPair::Pair2nd3rd).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn center_error_examples() {
        assert_eq!(
            center_error(&[[1.0; 3]], &[[1.0; 3]], &scene(2.0)).unwrap(),
            0.0
        );
        assert!(
            (center_error(&[[0.3, 0.0, 0.0]], &[[0.0; 3]], &scene(7.0)).unwrap() - 0.3 / 7.0).abs()
                < 1e-15
        );
        assert!(center_error(&[], &[], &scene(0.0)).is_err());
    }

    #[test]
    fn aggregate_is_macro() {
        let a = evaluate_labels("a", &[1, 1], &[1, 1], &[], &[], &scene(1.0)).unwrap();
        let b = evaluate_labels("b", &[1, 2], &[2, 2], &[], &[], &scene(1.0)).unwrap();
        let agg = aggregate(vec![a, b]).unwrap();
        assert_eq!(agg.num_scans, 2);
        assert!((agg.oa - 0.75).abs() < 1e-15);
        assert_eq!(agg.per_class_iou["T1"], Some(0.5));
        assert_eq!(agg.per_class_iou["T2"], Some(0.5));
        assert_eq!(agg.per_class_iou["T3"], None);
    }
}
