//! Loss evaluators over a matched prediction set. Values only, no gradients.

use serde::{Deserialize, Serialize};

use crate::cmr::{active_faces, center_loss, pseudo_mask, pseudo_mask_loss, InstancePrediction};
use crate::error::{Error, Result};
use crate::fhm::{Assignment, GroundTruth, DICE_EPS};
use crate::linalg::{bce_with_logits, sigmoid, Matrix};
use crate::projection::CoordinateMap;

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 0.25;
pub const MASK_WEIGHT: f64 = 2.0;
pub const LAMBDA_CENT: f64 = 0.5;
pub const PSEUDO_MASK_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask_weight: f64,
    pub lambda_cent: f64,
    pub w_pm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask_weight: MASK_WEIGHT,
            lambda_cent: LAMBDA_CENT,
            w_pm: PSEUDO_MASK_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_mask: f64,
    pub l_obj: f64,
    pub l_cent: f64,
    pub l_pm: f64,
    pub l_main: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

/// Numerically stable `log softmax(logits)[y]`.
fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

/// Mean of `-alpha (1 - p_y)^gamma ln p_y` over rows of softmax probabilities.
pub fn focal_loss(logits: &Matrix, labels: &[u8], gamma: f64, alpha: f64) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("focal_loss rows", labels.len(), logits.rows()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= logits.cols() {
            return Err(Error::InvalidLabel(y as i64));
        }
        let log_p = log_softmax_at(logits.row(i), y as usize);
        let p = log_p.exp();
        let modulation = if gamma == 0.0 {
            1.0
        } else {
            (1.0 - p).powf(gamma)
        };
        total += -alpha * modulation * log_p;
    }
    Ok(total / labels.len() as f64)
}

fn soft_dice(logits: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        inter += p * t;
        sp += p;
        st += t;
    }
    (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

/// Mean over rows of `(1 - Dice) + mean BCE`.
pub fn mask_loss(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "mask_loss",
            format!("{:?}", targets.shape()),
            format!("{:?}", logits.shape()),
        ));
    }
    let (n, m) = logits.shape();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let (x, t) = (logits.row(i), targets.row(i));
        let bce = if m == 0 {
            0.0
        } else {
            x.iter()
                .zip(t)
                .map(|(&x, &t)| bce_with_logits(x, t))
                .sum::<f64>()
                / m as f64
        };
        total += (1.0 - soft_dice(x, t)) + bce;
    }
    Ok(total / n as f64)
}

/// IoU between a thresholded prediction and a binary mask.
pub fn mask_iou(logits: &[f64], target: &[f64], threshold: f64) -> f64 {
    let active = active_faces(logits, threshold);
    let inter = active.iter().filter(|&&p| target[p] > 0.5).count();
    let gt = target.iter().filter(|&&t| t > 0.5).count();
    let union = active.len() + gt - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean BCE with logits against soft targets, over every instance.
pub fn objectness_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape("objectness_loss", targets.len(), logits.len()));
    }
    if let Some(&t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!(
            "objectness target {t} outside [0, 1]"
        )));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| bce_with_logits(x, t))
        .sum();
    Ok(total / logits.len() as f64)
}

/// Combines the per-term values with the fixed weights.
pub fn total_loss(
    l_cls: f64,
    l_mask: f64,
    l_obj: f64,
    l_cent: f64,
    l_pm: f64,
) -> Result<LossBreakdown> {
    for (name, value) in [
        ("l_cls", l_cls),
        ("l_mask", l_mask),
        ("l_obj", l_obj),
        ("l_cent", l_cent),
        ("l_pm", l_pm),
    ] {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidLoss { name, value });
        }
    }
    let weights = LossWeights::default();
    let l_main = l_cls + weights.mask_weight * l_mask + l_obj + weights.lambda_cent * l_cent;
    Ok(LossBreakdown {
        l_cls,
        l_mask,
        l_obj,
        l_cent,
        l_pm,
        l_main,
        l_total: l_main + weights.w_pm * l_pm,
        weights,
    })
}

/// Evaluates every term for a matched prediction.
pub fn evaluate_losses(
    pred: &InstancePrediction,
    gt: &GroundTruth,
    assignment: &Assignment,
    cmap: &CoordinateMap,
    threshold: f64,
) -> Result<LossBreakdown> {
    let pred_rows: Vec<usize> = assignment.pairs.iter().map(|&(i, _)| i).collect();
    let gt_rows: Vec<usize> = assignment.pairs.iter().map(|&(_, l)| l).collect();
    if pred_rows.iter().any(|&i| i >= pred.num_instances())
        || gt_rows.iter().any(|&l| l >= gt.num_teeth())
    {
        return Err(Error::Schema {
            context: "assignment".into(),
            message: "pair index out of range".into(),
        });
    }
    let labels: Vec<u8> = gt_rows.iter().map(|&l| gt.labels[l]).collect();
    let l_cls = focal_loss(
        &pred.class_logits.select_rows(&pred_rows),
        &labels,
        DEFAULT_GAMMA,
        DEFAULT_FOCAL_ALPHA,
    )?;
    let l_mask = mask_loss(
        &pred.mask_logits.select_rows(&pred_rows),
        &gt.masks.select_rows(&gt_rows),
    )?;

    let mut targets = vec![0.0; pred.num_instances()];
    for &(i, l) in &assignment.pairs {
        targets[i] = mask_iou(pred.mask_logits.row(i), gt.masks.row(l), threshold);
    }
    let l_obj = objectness_loss(&pred.objectness, &targets)?;

    let matched_centers: Vec<_> = pred_rows.iter().map(|&i| pred.centers3d[i]).collect();
    let gt_centers: Vec<_> = gt_rows.iter().map(|&l| gt.centers3d[l]).collect();
    let l_cent = center_loss(&matched_centers, &gt_centers)?;

    let pm = pseudo_mask(&pred.centers2d, &pred.valid, cmap, &gt.face_labels())?;
    let l_pm = pseudo_mask_loss(&pred.mask_logits, &pm)?;
    total_loss(l_cls, l_mask, l_obj, l_cent, l_pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_confident_correct() {
        let mut l = Matrix::zeros(1, 17);
        l.set(0, 4, 30.0);
        assert!(focal_loss(&l, &[4], 2.0, 0.25).unwrap() < 1e-10);
        assert_eq!(
            focal_loss(&Matrix::zeros(0, 17), &[], 2.0, 0.25).unwrap(),
            0.0
        );
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let l = Matrix::zeros(1, 17);
        assert!((focal_loss(&l, &[3], 0.0, 1.0).unwrap() - 17f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_two_class_toy() {
        // p_y = 0.6 with two classes
        let l = Matrix::from_rows(&[vec![(0.6f64 / 0.4).ln(), 0.0]]).unwrap();
        let expect = 0.25 * 0.16 * -(0.6f64.ln());
        assert!((focal_loss(&l, &[0], 2.0, 0.25).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.02043).abs() < 1e-5);
    }

    #[test]
    fn mask_loss_examples() {
        let t = Matrix::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        let zero = Matrix::zeros(1, 4);
        let expect = 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS) + std::f64::consts::LN_2;
        assert!((mask_loss(&zero, &t).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.1931).abs() < 1e-4);
        let sat = Matrix::from_rows(&[vec![30.0, 30.0, -30.0, -30.0]]).unwrap();
        assert!(mask_loss(&sat, &t).unwrap() < 1e-5);
        assert!(mask_loss(&zero, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn mask_loss_matches_per_term_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = [1.0, 0.0, 1.0, 1.0, 0.0];
        let p: Vec<f64> = x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let dice = (2.0 * inter + DICE_EPS) / (p.iter().sum::<f64>() + 3.0 + DICE_EPS);
        let bce: f64 = p
            .iter()
            .zip(&t)
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 5.0;
        let got = mask_loss(
            &Matrix::from_rows(&[x]).unwrap(),
            &Matrix::from_rows(&[t.to_vec()]).unwrap(),
        )
        .unwrap();
        assert!((got - (1.0 - dice + bce)).abs() < 1e-12);
    }

    #[test]
    fn objectness_examples() {
        assert!(objectness_loss(&[30.0], &[1.0]).unwrap() < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        assert!((objectness_loss(&[0.0], &[0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!((objectness_loss(&[0.0], &[0.8]).unwrap() - ln2).abs() < 1e-15);
        assert!(objectness_loss(&[0.0], &[1.5]).is_err());
    }

    #[test]
    fn iou_of_thresholded_mask() {
        assert_eq!(mask_iou(&[5.0, 5.0, -5.0], &[1.0, 0.0, 0.0], 0.5), 0.5);
        assert_eq!(mask_iou(&[-5.0; 3], &[0.0; 3], 0.5), 0.0);
    }

    #[test]
    fn total_examples() {
        let z = total_loss(0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!((z.l_main, z.l_total), (0.0, 0.0));
        let o = total_loss(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((o.l_main - 4.5).abs() < 1e-12);
        assert!((o.l_total - 4.7).abs() < 1e-12);
        assert!(matches!(
            total_loss(-1.0, 0.0, 0.0, 0.0, 0.0),
            Err(Error::InvalidLoss { name: "l_cls", .. })
        ));
        assert!(total_loss(0.0, f64::NAN, 0.0, 0.0, 0.0).is_err());
    }
}
