use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::LossConfig;
use crate::detection::{DetectionSet, DetectionVars};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, rotated_iou, RotatedBox};
use crate::tensor::Tensor;

use super::assign::{hungarian_match, CostMatrix, MatchAssignment};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub boxes: Vec<RotatedBox>,
    pub labels: Vec<usize>,
}

impl GroundTruthSet {
    pub fn new(boxes: Vec<RotatedBox>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {l} out of range {num_classes}"
            )));
        }
        Ok(Self { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Period-aware box distance: L1 over `(cx, cy, w, h)` plus
/// `min(|Δα|, π − |Δα|) / π`.
pub fn box_l1(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    let lin: f64 = (0..4).map(|i| (a[i] - b[i]).abs()).sum();
    lin + normalize_angle(a[4] - b[4]).abs() / PI
}

/// `c_cls·(−p_label) + c_l1·L1 + c_iou·(1 − IoU)`.
pub fn pair_cost(
    pred: &RotatedBox,
    probs: &[f64],
    gt: &RotatedBox,
    label: usize,
    coeffs: &LossConfig,
) -> f64 {
    coeffs.cls * -probs[label]
        + coeffs.l1 * box_l1(&pred.to_array(), &gt.to_array())
        + coeffs.iou * (1.0 - rotated_iou(pred, gt))
}

pub fn cost_matrix(
    preds: &DetectionSet,
    gts: &GroundTruthSet,
    coeffs: &LossConfig,
) -> Result<CostMatrix> {
    let probs = preds.probs();
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for (q, pb) in preds.boxes.iter().enumerate() {
        for (gb, &label) in gts.boxes.iter().zip(&gts.labels) {
            data.push(pair_cost(pb, probs.row(q), gb, label, coeffs));
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

pub fn match_detections(
    preds: &DetectionSet,
    gts: &GroundTruthSet,
    coeffs: &LossConfig,
) -> Result<MatchAssignment> {
    Ok(hungarian_match(&cost_matrix(preds, gts, coeffs)?))
}

/// Weighted loss terms of one decoder layer, before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct SetLoss {
    pub total: Var,
    pub assignments: Vec<MatchAssignment>,
    pub terms: Vec<LossTerms>,
}

/// Set-prediction loss summed over the given layers (one layer when
/// auxiliary supervision is off). Each layer is matched independently
/// unless `fixed` supplies the assignments; matching is not differentiated.
///
/// Per layer: `(c_cls·Σ_q w_q·CE_q + c_l1·Σ L1 + c_iou·Σ(1 − IoU)) / max(M, 1)`
/// with unmatched queries targeting no-object at weight `no_object_weight`.
pub fn set_loss(
    tape: &mut Tape,
    layers: &[DetectionVars],
    gts: &GroundTruthSet,
    coeffs: &LossConfig,
    fixed: Option<&[MatchAssignment]>,
) -> Result<SetLoss> {
    if let Some(f) = fixed {
        if f.len() != layers.len() {
            return Err(Error::Contract(format!(
                "{} fixed assignments for {} layers",
                f.len(),
                layers.len()
            )));
        }
    }
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut totals = Vec::with_capacity(layers.len());
    let mut assignments = Vec::with_capacity(layers.len());
    let mut terms = Vec::with_capacity(layers.len());
    for (i, d) in layers.iter().enumerate() {
        let assignment = match fixed {
            Some(f) => f[i].clone(),
            None => match_detections(&DetectionSet::from_tape(tape, *d)?, gts, coeffs)?,
        };
        let (n, k1) = tape.value(d.logits).dims2()?;
        let no_object = k1 - 1;

        // classification
        let logp = tape.log_softmax(d.logits);
        let targets = assignment.gt_of_query(n);
        let idx: Vec<usize> = targets
            .iter()
            .enumerate()
            .map(|(q, g)| q * k1 + g.map_or(no_object, |g| gts.labels[g]))
            .collect();
        let weights: Vec<f64> = targets
            .iter()
            .map(|g| {
                if g.is_some() {
                    1.0
                } else {
                    coeffs.no_object_weight
                }
            })
            .collect();
        let picked = tape.gather(logp, &idx)?;
        let w = tape.constant(Tensor::new(&[n], weights)?);
        let ce = tape.mul(picked, w)?;
        let ce = tape.sum(ce);
        let ce = tape.scale(ce, -1.0);
        let mut parts = vec![tape.scale(ce, coeffs.cls)];
        let mut t = LossTerms {
            cls: tape.value(ce).item(),
            l1: 0.0,
            iou: 0.0,
        };

        if !assignment.pairs.is_empty() {
            let p = assignment.pairs.len();
            let rows: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
            let gt_boxes: Vec<RotatedBox> = assignment
                .pairs
                .iter()
                .map(|&(_, g)| gts.boxes[g])
                .collect();

            let lin_idx: Vec<usize> = rows
                .iter()
                .flat_map(|&q| (0..4).map(move |j| q * 5 + j))
                .collect();
            let lin = tape.gather(d.boxes, &lin_idx)?;
            let target: Vec<f64> = gt_boxes
                .iter()
                .flat_map(|b| b.to_array()[..4].to_vec())
                .collect();
            let target = tape.constant(Tensor::new(&[4 * p], target)?);
            let diff = tape.sub(lin, target)?;
            let diff = tape.abs(diff);
            let lin_sum = tape.sum(diff);

            let ang_idx: Vec<usize> = rows.iter().map(|&q| q * 5 + 4).collect();
            let ang = tape.gather(d.boxes, &ang_idx)?;
            let ang_t = tape.constant(Tensor::new(
                &[p],
                gt_boxes.iter().map(|b| b.alpha).collect(),
            )?);
            let da = tape.sub(ang, ang_t)?;
            let da = tape.wrap_angle(da);
            let da = tape.abs(da);
            let da = tape.sum(da);
            let da = tape.scale(da, 1.0 / PI);
            let l1 = tape.add(lin_sum, da)?;

            let pairs: Vec<(usize, RotatedBox)> = rows.iter().copied().zip(gt_boxes).collect();
            let ious = tape.rotated_iou(d.boxes, &pairs)?;
            let iou_sum = tape.sum(ious);
            let iou_loss = tape.scale(iou_sum, -1.0);
            let iou_loss = tape.add_scalar(iou_loss, p as f64);

            t.l1 = tape.value(l1).item();
            t.iou = tape.value(iou_loss).item();
            parts.push(tape.scale(l1, coeffs.l1));
            parts.push(tape.scale(iou_loss, coeffs.iou));
        }
        let mut layer_total = parts[0];
        for &q in &parts[1..] {
            layer_total = tape.add(layer_total, q)?;
        }
        totals.push(tape.scale(layer_total, norm));
        assignments.push(assignment);
        terms.push(t);
    }
    let mut total = totals[0];
    for &x in &totals[1..] {
        total = tape.add(total, x)?;
    }
    Ok(SetLoss {
        total,
        assignments,
        terms,
    })
}
