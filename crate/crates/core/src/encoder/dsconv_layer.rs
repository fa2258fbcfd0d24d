use rand::Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;

use super::fusion::fuse_adjacent_levels;

pub fn init_dsconv_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    kernel: usize,
    rng: &mut R,
) {
    let c = channels;
    store.init_glorot(
        &format!("{prefix}.dw"),
        &[kernel, kernel, c],
        kernel * kernel,
        kernel * kernel,
        rng,
    );
    store.init_glorot(&format!("{prefix}.pw"), &[c, c], c, c, rng);
    store.init_zeros(&format!("{prefix}.pw_b"), &[c]);
    store.init_ones(&format!("{prefix}.ln_g"), &[c]);
    store.init_zeros(&format!("{prefix}.ln_b"), &[c]);
}

/// One encoder layer: the same depthwise-separable convolution on every
/// level, optional adjacent-level fusion at `fusion_rate`, then residual
/// and post-normalization. Extents are preserved (`padding = K/2`).
pub fn dsconv_encoder_layer(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    pyr: &FeaturePyramid,
    fusion_rate: Option<f64>,
) -> Result<FeaturePyramid> {
    let dw = p.get(&format!("{prefix}.dw"));
    let pw = p.get(&format!("{prefix}.pw"));
    let pw_b = p.get(&format!("{prefix}.pw_b"));
    let ln_g = p.get(&format!("{prefix}.ln_g"));
    let ln_b = p.get(&format!("{prefix}.ln_b"));
    let pad = tape.shape(dw)[0] / 2;

    let mut blocks = Vec::with_capacity(pyr.num_levels());
    for &x in &pyr.levels {
        let d = tape.dsconv(x, dw, pw, 1, pad)?;
        blocks.push(tape.add_row(d, pw_b)?);
    }
    if let Some(rate) = fusion_rate {
        blocks = fuse_adjacent_levels(tape, &blocks, rate)?;
    }
    let mut out = Vec::with_capacity(blocks.len());
    for (&x, &b) in pyr.levels.iter().zip(&blocks) {
        let r = tape.add(x, b)?;
        out.push(tape.layer_norm(r, ln_g, ln_b)?);
    }
    Ok(pyr.with_levels(out))
}
