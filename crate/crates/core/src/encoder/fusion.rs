use crate::autodiff::{SparseMap, Tape, Var};
use crate::error::Result;

/// Bilinear resampling map `[h, w, C] → [H, W, C]` with half-pixel centers
/// and edge clamping. A 2× downsample averages 2×2 blocks.
pub fn resample_map(src: (usize, usize), dst: (usize, usize), channels: usize) -> SparseMap {
    let axis = |n_src: usize, n_dst: usize| -> Vec<[(usize, f64); 2]> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                let f = s - i0 as f64;
                [(i0, 1.0 - f), (i1, f)]
            })
            .collect()
    };
    let ys = axis(src.0, dst.0);
    let xs = axis(src.1, dst.1);
    let mut rows = Vec::with_capacity(dst.0 * dst.1 * channels);
    for y in &ys {
        for x in &xs {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(yi, wy) in y {
                for &(xi, wx) in x {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    let pix = yi * src.1 + xi;
                    match taps.iter_mut().find(|t| t.0 == pix) {
                        Some(t) => t.1 += wt,
                        None => taps.push((pix, wt)),
                    }
                }
            }
            for ch in 0..channels {
                rows.push(taps.iter().map(|&(p, w)| (p * channels + ch, w)).collect());
            }
        }
    }
    SparseMap::new(src.0 * src.1 * channels, &[dst.0, dst.1, channels], rows)
}

pub fn resample(tape: &mut Tape, x: Var, dst: (usize, usize)) -> Result<Var> {
    let (h, w, c) = tape.value(x).dims3()?;
    if (h, w) == dst {
        return Ok(x);
    }
    tape.sparse(x, resample_map((h, w), dst, c))
}

/// Adjacent-level fusion: level `l` becomes
/// `x_l + Dropout(resample(x_{l−1}) + resample(x_{l+1}))`, with missing
/// neighbours contributing nothing. A lone level passes through.
pub fn fuse_adjacent_levels(tape: &mut Tape, levels: &[Var], rate: f64) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(levels.len());
    for l in 0..levels.len() {
        let (h, w, _) = tape.value(levels[l]).dims3()?;
        let mut neighbours = Vec::with_capacity(2);
        if l > 0 {
            neighbours.push(resample(tape, levels[l - 1], (h, w))?);
        }
        if l + 1 < levels.len() {
            neighbours.push(resample(tape, levels[l + 1], (h, w))?);
        }
        let fused = match neighbours[..] {
            [] => {
                out.push(levels[l]);
                continue;
            }
            [a] => a,
            [a, b] => tape.add(a, b)?,
            _ => unreachable!(),
        };
        let dropped = tape.dropout(fused, rate)?;
        out.push(tape.add(levels[l], dropped)?);
    }
    Ok(out)
}
