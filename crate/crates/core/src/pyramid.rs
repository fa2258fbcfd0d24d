use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-level `[H_l, W_l, C]` feature maps on a tape, ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// Downsample factor of each level relative to the input image.
    pub ratios: Vec<usize>,
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn new(tape: &Tape, levels: Vec<Var>, ratios: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.len() != ratios.len() {
            return Err(Error::Config(format!(
                "pyramid needs one ratio per level, got {} levels and {} ratios",
                levels.len(),
                ratios.len()
            )));
        }
        if ratios.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "ratios must be strictly decreasing, got {ratios:?}"
            )));
        }
        let (h0, w0, channels) = tape.value(levels[0]).dims3()?;
        let (img_h, img_w) = (h0 * ratios[0], w0 * ratios[0]);
        for (&v, &r) in levels.iter().zip(&ratios) {
            let (h, w, c) = tape.value(v).dims3()?;
            if c != channels {
                return Err(Error::Dimension(format!(
                    "pyramid levels must share channels: {c} vs {channels}"
                )));
            }
            if h * r != img_h || w * r != img_w {
                return Err(Error::Config(format!(
                    "level {h}x{w} at ratio {r} inconsistent with image {img_h}x{img_w}"
                )));
            }
        }
        Ok(Self {
            levels,
            ratios,
            channels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn extent(&self, tape: &Tape, level: usize) -> (usize, usize) {
        let s = tape.shape(self.levels[level]);
        (s[0], s[1])
    }

    pub fn image_extent(&self, tape: &Tape) -> (usize, usize) {
        let (h, w) = self.extent(tape, 0);
        (h * self.ratios[0], w * self.ratios[0])
    }

    pub fn total_tokens(&self, tape: &Tape) -> usize {
        (0..self.levels.len())
            .map(|l| {
                let (h, w) = self.extent(tape, l);
                h * w
            })
            .sum()
    }

    pub fn tensors(&self, tape: &Tape) -> Vec<Tensor> {
        self.levels.iter().map(|&v| tape.value(v).clone()).collect()
    }

    /// Same-shaped pyramid with new level handles.
    pub fn with_levels(&self, levels: Vec<Var>) -> Self {
        debug_assert_eq!(levels.len(), self.levels.len());
        Self {
            levels,
            ratios: self.ratios.clone(),
            channels: self.channels,
        }
    }
}
