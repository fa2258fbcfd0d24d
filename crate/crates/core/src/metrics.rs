//! Recall at IoU thresholds, VOC-style average precision, and the matched
//! statistics used to judge overfitting and refinement.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::LossConfig;
use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::matching::{match_detections, GroundTruthSet};

/// Pairs `(pred, gt, iou)` with IoU ≥ `min_iou`, highest IoU first. Ties keep
/// index order so results are reproducible.
fn ranked_pairs(
    preds: &[RotatedBox],
    gts: &[RotatedBox],
    min_iou: f64,
) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let iou = rotated_iou(pb, gb);
            if iou >= min_iou && iou > 0.0 {
                pairs.push((p, g, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    pairs
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    match thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        Some(t) => Err(Error::Config(format!("IoU threshold {t} outside (0, 1]"))),
        None => Ok(()),
    }
}

/// Number of ground truths recalled at each threshold by greedy one-to-one
/// matching in descending IoU order.
pub fn recalled_counts(
    preds: &[RotatedBox],
    gts: &[RotatedBox],
    thresholds: &[f64],
) -> Result<Vec<usize>> {
    check_thresholds(thresholds)?;
    let lowest = thresholds.iter().copied().fold(1.0, f64::min);
    let pairs = ranked_pairs(preds, gts, lowest);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut pred_used = vec![false; preds.len()];
            let mut gt_used = vec![false; gts.len()];
            let mut n = 0;
            for &(p, g, _) in pairs.iter().take_while(|x| x.2 >= t) {
                if !pred_used[p] && !gt_used[g] {
                    pred_used[p] = true;
                    gt_used[g] = true;
                    n += 1;
                }
            }
            n
        })
        .collect())
}

/// Fraction of ground truths recalled at each threshold; `recalled / max(M, 1)`.
pub fn recall_at_iou(
    preds: &DetectionSet,
    gts: &GroundTruthSet,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let m = gts.len().max(1) as f64;
    Ok(recalled_counts(&preds.boxes, &gts.boxes, thresholds)?
        .into_iter()
        .map(|n| n as f64 / m)
        .collect())
}

/// One scored detection, tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: RotatedBox,
    pub class: usize,
    pub score: f64,
}

/// Detections of every query, labelled by their best real class.
pub fn scored_boxes(image: usize, preds: &DetectionSet) -> Vec<ScoredBox> {
    preds
        .labels_scores()
        .into_iter()
        .zip(&preds.boxes)
        .map(|((class, score), &bbox)| ScoredBox {
            image,
            bbox,
            class,
            score,
        })
        .collect()
}

/// All-points interpolated area under a precision/recall sequence.
pub fn integrate_pr(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mpre: Vec<f64> = std::iter::once(0.0)
        .chain(precision.iter().copied())
        .chain([0.0])
        .collect();
    let mrec: Vec<f64> = std::iter::once(0.0)
        .chain(recall.iter().copied())
        .chain([1.0])
        .collect();
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Average precision of one class pooled over images: detections ranked by
/// score (stable), each matched to the highest-IoU ground truth of its
/// image; a hit needs IoU ≥ `iou_threshold` on a not-yet-claimed truth.
/// `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[ScoredBox],
    gts: &[GroundTruthSet],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let npos: usize = gts
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<&ScoredBox> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for d in ranked {
        let gt = &gts[d.image];
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, &l)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
            if l != class {
                continue;
            }
            let iou = rotated_iou(&d.bbox, b);
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= iou_threshold && !claimed[d.image][g] => {
                claimed[d.image][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(integrate_pr(&recall, &precision))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// `(threshold, recall)`.
    pub recall: Vec<(f64, f64)>,
    pub ap_threshold: f64,
    /// Per class; `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
    pub mean_ap: f64,
    /// Share of Hungarian-matched predictions whose best class is right.
    pub class_accuracy: f64,
    pub mean_matched_iou: f64,
    pub num_scenes: usize,
    pub num_gts: usize,
    pub num_preds: usize,
}

impl MetricReport {
    pub fn recall_at(&self, t: f64) -> Option<f64> {
        self.recall.iter().find(|(x, _)| *x == t).map(|&(_, r)| r)
    }

    /// Rows `metric,threshold_or_class,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,threshold_or_class,value\n");
        for (t, r) in &self.recall {
            let _ = writeln!(s, "recall,{t},{r}");
        }
        for (k, ap) in self.ap.iter().enumerate() {
            if let Some(ap) = ap {
                let _ = writeln!(s, "ap@{},class_{k},{ap}", self.ap_threshold);
            }
        }
        let _ = writeln!(s, "map,{},{}", self.ap_threshold, self.mean_ap);
        let _ = writeln!(s, "class_accuracy,all,{}", self.class_accuracy);
        let _ = writeln!(s, "mean_matched_iou,all,{}", self.mean_matched_iou);
        let _ = writeln!(s, "num_gts,all,{}", self.num_gts);
        let _ = writeln!(s, "num_preds,all,{}", self.num_preds);
        s
    }
}

/// Pools every metric over a set of scenes. Recall uses all predictions as
/// proposals; accuracy and matched IoU use the Hungarian assignment under
/// the training cost.
pub fn evaluate_predictions(
    preds: &[DetectionSet],
    gts: &[GroundTruthSet],
    thresholds: &[f64],
    ap_threshold: f64,
    coeffs: &LossConfig,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} prediction sets for {} scenes",
            preds.len(),
            gts.len()
        )));
    }
    check_thresholds(thresholds)?;
    check_thresholds(&[ap_threshold])?;
    let num_gts: usize = gts.iter().map(GroundTruthSet::len).sum();
    let mut recalled = vec![0usize; thresholds.len()];
    let mut scored = Vec::new();
    let (mut correct, mut matched, mut iou_sum) = (0usize, 0usize, 0.0);
    let mut num_classes = 0;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        for (acc, n) in recalled
            .iter_mut()
            .zip(recalled_counts(&p.boxes, &g.boxes, thresholds)?)
        {
            *acc += n;
        }
        scored.extend(scored_boxes(i, p));
        num_classes = num_classes.max(p.num_classes());
        let labels = p.labels_scores();
        for (q, t) in match_detections(p, g, coeffs)?.pairs {
            matched += 1;
            correct += usize::from(labels[q].0 == g.labels[t]);
            iou_sum += rotated_iou(&p.boxes[q], &g.boxes[t]);
        }
    }
    let ap: Vec<Option<f64>> = (0..num_classes)
        .map(|k| average_precision(&scored, gts, k, ap_threshold))
        .collect();
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let m = num_gts.max(1) as f64;
    Ok(MetricReport {
        recall: thresholds
            .iter()
            .copied()
            .zip(recalled.iter().map(|&n| n as f64 / m))
            .collect(),
        ap_threshold,
        mean_ap: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        ap,
        class_accuracy: if matched == 0 {
            0.0
        } else {
            correct as f64 / matched as f64
        },
        mean_matched_iou: if matched == 0 {
            0.0
        } else {
            iou_sum / matched as f64
        },
        num_scenes: preds.len(),
        num_gts,
        num_preds: preds.iter().map(DetectionSet::len).sum(),
    })
}
