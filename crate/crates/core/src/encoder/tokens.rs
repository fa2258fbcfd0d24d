//! Flattening a pyramid into one token sequence, and the fixed positional
//! signals attached to those tokens.

use std::f64::consts::PI;

use crate::autodiff::{SparseMap, Tape, Var};
use crate::error::Result;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

const POS_TEMPERATURE: f64 = 10_000.0;

/// Per-level extents of a pyramid; tokens are level-major, row-major inside
/// each level.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub extents: Vec<(usize, usize)>,
    pub channels: usize,
}

impl TokenLayout {
    pub fn of(tape: &Tape, pyr: &FeaturePyramid) -> Self {
        let extents = (0..pyr.num_levels()).map(|l| pyr.extent(tape, l)).collect();
        Self {
            extents,
            channels: pyr.channels,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.extents.iter().map(|(h, w)| h * w).sum()
    }

    pub fn level_of_token(&self) -> Vec<usize> {
        self.extents
            .iter()
            .enumerate()
            .flat_map(|(l, (h, w))| std::iter::repeat_n(l, h * w))
            .collect()
    }

    /// Pixel centers in normalized `(x, y)` image coordinates.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for &(h, w) in &self.extents {
            for i in 0..h {
                for j in 0..w {
                    out.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
                }
            }
        }
        out
    }

    /// Fixed 2-D sinusoidal encoding `[T, C]`. The first half of the channels
    /// encodes y, the second half x, each as interleaved sin/cos pairs.
    pub fn sinusoidal(&self) -> Tensor {
        let c = self.channels;
        let half = c / 2;
        let mut data = vec![0.0; self.num_tokens() * c];
        for (t, [x, y]) in self.centers().into_iter().enumerate() {
            let row = &mut data[t * c..(t + 1) * c];
            for (block, coord) in [(0, y), (half, x)] {
                for k in 0..half {
                    let freq = POS_TEMPERATURE.powf(-((2 * (k / 2)) as f64) / half.max(1) as f64);
                    let a = 2.0 * PI * coord * freq;
                    row[block + k] = if k % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
        }
        Tensor::new(&[self.num_tokens(), c], data).expect("token encoding shape")
    }

    /// Broadcasts a per-level scalar `[L]` to every channel of its tokens.
    pub fn level_embed_map(&self) -> SparseMap {
        let c = self.channels;
        let rows = self
            .level_of_token()
            .into_iter()
            .flat_map(|l| std::iter::repeat_n(vec![(l, 1.0)], c))
            .collect();
        SparseMap::new(self.extents.len(), &[self.num_tokens(), c], rows)
    }

    /// `[T, C]` token matrix of a pyramid.
    pub fn flatten(&self, tape: &mut Tape, pyr: &FeaturePyramid) -> Result<Var> {
        let mut parts = Vec::with_capacity(pyr.num_levels());
        for (&v, &(h, w)) in pyr.levels.iter().zip(&self.extents) {
            parts.push(tape.reshape(v, &[h * w, self.channels])?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_rows(&parts)
    }

    pub fn unflatten(
        &self,
        tape: &mut Tape,
        tokens: Var,
        like: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(self.extents.len());
        let mut offset = 0;
        for &(h, w) in &self.extents {
            levels.push(tape.narrow(tokens, offset, &[h, w, self.channels])?);
            offset += h * w * self.channels;
        }
        Ok(like.with_levels(levels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut tape = Tape::default();
        let a = tape.constant(Tensor::full(&[1, 1, 2], 1.0));
        let b = tape.constant(Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let pyr = FeaturePyramid::new(&tape, vec![a, b], vec![4, 2]).unwrap();
        let lay = TokenLayout::of(&tape, &pyr);
        assert_eq!(lay.num_tokens(), 5);
        assert_eq!(lay.level_of_token(), vec![0, 1, 1, 1, 1]);
        let x = lay.flatten(&mut tape, &pyr).unwrap();
        assert_eq!(tape.shape(x), &[5, 2]);
        let back = lay.unflatten(&mut tape, x, &pyr).unwrap();
        assert_eq!(tape.value(back.levels[1]), tape.value(b));
        assert_eq!(lay.centers()[0], [0.5, 0.5]);
        assert_eq!(lay.centers()[4], [0.75, 0.75]);
    }

    #[test]
    fn encoding_is_bounded_and_distinct() {
        let lay = TokenLayout {
            extents: vec![(2, 2)],
            channels: 8,
        };
        let pe = lay.sinusoidal();
        assert!(pe.max_abs() <= 1.0);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
    }
}
