use crate::autodiff::ops::softmax_in_place;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geometry::RotatedBox;
use crate::tensor::Tensor;

/// Tape handles of one set of predictions: boxes `[N, 5]` and class logits
/// `[N, K+1]`, the last column being no-object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionVars {
    pub boxes: Var,
    pub logits: Var,
}

/// Value-level predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<RotatedBox>,
    pub logits: Tensor,
}

impl DetectionSet {
    pub fn from_tape(tape: &Tape, d: DetectionVars) -> Result<Self> {
        let bv = tape.value(d.boxes);
        let boxes = (0..bv.shape()[0])
            .map(|i| {
                let r = bv.row(i);
                RotatedBox::new(r[0], r[1], r[2], r[3], r[4])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            boxes,
            logits: tape.value(d.logits).clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Number of real classes (excludes no-object).
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1] - 1
    }

    /// Row-wise softmax probabilities `[N, K+1]`.
    pub fn probs(&self) -> Tensor {
        let mut p = self.logits.clone();
        let k = p.shape()[1];
        for row in p.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        p
    }

    /// Best real class and its probability for each prediction.
    pub fn labels_scores(&self) -> Vec<(usize, f64)> {
        let p = self.probs();
        let k = self.num_classes();
        (0..self.len())
            .map(|i| {
                let row = &p.row(i)[..k];
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                (best, row[best])
            })
            .collect()
    }
}
