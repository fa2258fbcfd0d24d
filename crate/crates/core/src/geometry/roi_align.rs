//! Rotated ROIAlign: a `P×P` grid of bin-center samples laid out in the
//! box frame, each bilinearly read from a single pyramid level.

use crate::autodiff::{SparseMap, Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;

use super::RotatedBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignConfig {
    pub out_size: usize,
    /// Box side (pixels) that maps onto the finest level; each doubling
    /// above it moves one level coarser.
    pub canonical_px: f64,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            out_size: 7,
            canonical_px: 64.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPatch {
    /// `[P, P, C]`; rows run along the `h` edge, columns along the `w` edge.
    pub patch: Var,
    pub level: usize,
    /// Fraction of sample points inside the feature map.
    pub coverage: f64,
}

/// Level for a box of side `√(w·h)·S` pixels: `floor(log2(side / canonical))`
/// doublings above the finest ratio, clamped to the available levels.
pub fn select_level(
    ratios: &[usize],
    image_hw: (usize, usize),
    b: &RotatedBox,
    canonical_px: f64,
) -> usize {
    let finest = ratios.len() - 1;
    let side = b.area().sqrt() * ((image_hw.0 * image_hw.1) as f64).sqrt();
    let doublings = (side / canonical_px).log2().floor();
    if !doublings.is_finite() || doublings <= 0.0 {
        return finest;
    }
    let target = ratios[finest] as f64 * 2f64.powf(doublings);
    // nearest available ratio in log space, favouring the finer one on ties
    (0..ratios.len())
        .rev()
        .min_by(|&a, &b| {
            let da = ((ratios[a] as f64).log2() - target.log2()).abs();
            let db = ((ratios[b] as f64).log2() - target.log2()).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(finest)
}

/// Sample points in normalized image coordinates, row-major over the grid.
pub fn sample_points(b: &RotatedBox, p: usize) -> Vec<[f64; 2]> {
    let (s, c) = b.alpha.sin_cos();
    let mut pts = Vec::with_capacity(p * p);
    for r in 0..p {
        let v = ((r as f64 + 0.5) / p as f64 - 0.5) * b.h;
        for col in 0..p {
            let u = ((col as f64 + 0.5) / p as f64 - 0.5) * b.w;
            pts.push([b.cx + u * c - v * s, b.cy + u * s + v * c]);
        }
    }
    pts
}

/// Bilinear sampling map from a `[H, W, C]` level to `[P, P, C]`, with zero
/// padding outside the map.
pub fn roi_sampling_map(
    level_hw: (usize, usize),
    channels: usize,
    b: &RotatedBox,
    p: usize,
) -> (SparseMap, f64) {
    let (h, w) = level_hw;
    let pts = sample_points(b, p);
    let mut rows = Vec::with_capacity(p * p * channels);
    let mut inside = 0usize;
    for [x, y] in pts {
        if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
            inside += 1;
        }
        let taps = bilinear_taps(x * w as f64 - 0.5, y * h as f64 - 0.5, h, w);
        for ch in 0..channels {
            rows.push(
                taps.iter()
                    .map(|&(pix, wt)| (pix * channels + ch, wt))
                    .collect(),
            );
        }
    }
    let map = SparseMap::new(h * w * channels, &[p, p, channels], rows);
    (map, inside as f64 / (p * p) as f64)
}

/// In-bounds bilinear taps `(pixel index, weight)` at pixel coordinates
/// `(px, py)`, where integer coordinates are pixel centers.
pub(crate) fn bilinear_taps(px: f64, py: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let wt = wy * wx;
            if wt == 0.0 || yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            taps.push((yy as usize * w + xx as usize, wt));
        }
    }
    taps
}

/// Pools a `[P, P, C]` patch for `b` from the level chosen by its scale.
pub fn rotated_roi_align(
    tape: &mut Tape,
    pyramid: &FeaturePyramid,
    b: &RotatedBox,
    cfg: &RoiAlignConfig,
) -> Result<RoiPatch> {
    if cfg.out_size == 0 {
        return Err(Error::Parameter(
            "ROI output size must be at least 1".into(),
        ));
    }
    let level = select_level(
        &pyramid.ratios,
        pyramid.image_extent(tape),
        b,
        cfg.canonical_px,
    );
    let (map, coverage) = roi_sampling_map(
        pyramid.extent(tape, level),
        pyramid.channels,
        b,
        cfg.out_size,
    );
    let patch = tape.sparse(pyramid.levels[level], map)?;
    Ok(RoiPatch {
        patch,
        level,
        coverage,
    })
}
