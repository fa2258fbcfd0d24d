use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::DecoderConfig;
use crate::detection::DetectionVars;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::{column, stack_columns};

pub(super) fn init_head<R: Rng + ?Sized>(
    store: &mut ParamStore,
    c: usize,
    num_classes: usize,
    rng: &mut R,
) {
    store.init_glorot("head.w1", &[c, c], c, c, rng);
    store.init_zeros("head.b1", &[c]);
    store.init_glorot("head.w2", &[c, c], c, c, rng);
    store.init_zeros("head.b2", &[c]);
    // small last layer: initial boxes start near their references
    store.init_uniform("head.w3", &[c, 5], 0.1 * (6.0 / (c + 5) as f64).sqrt(), rng);
    store.init_zeros("head.b3", &[5]);
    store.init_glorot("cls.w", &[c, num_classes + 1], c, num_classes + 1, rng);
    store.init_zeros("cls.b", &[num_classes + 1]);
}

/// Reference boxes `[N, 5]` from query embeddings: a linear map to five
/// values, sigmoid on `(cx, cy, w, h)` and `σ·π − π/2` on the angle.
pub fn predict_reference_points(tape: &mut Tape, p: &Bound, embeddings: Var) -> Result<Var> {
    let r = tape.linear(embeddings, p.get("dec.ref.w"), p.get("dec.ref.b"))?;
    let s = tape.sigmoid(r);
    let n = tape.shape(s)[0];
    let scale = tape.constant(Tensor::new(&[n, 5], [1.0, 1.0, 1.0, 1.0, PI].repeat(n))?);
    let shift = tape.constant(Tensor::new(&[5], vec![0.0, 0.0, 0.0, 0.0, -FRAC_PI_2])?);
    let s = tape.mul(s, scale)?;
    tape.add_row(s, shift)
}

/// Maps `[N, 5]` deltas in `(−1, 1)` onto reference boxes: centers move by
/// `δ·extent·center_range`, sizes scale by `exp(δ·log_size_range)`, angles
/// shift by `δ·angle_range` and are wrapped. Zero deltas return the
/// references unchanged.
pub fn decode_deltas(tape: &mut Tape, refs: Var, deltas: Var, cfg: &DecoderConfig) -> Result<Var> {
    let r: Vec<Var> = (0..5)
        .map(|j| column(tape, refs, j))
        .collect::<Result<_>>()?;
    let d: Vec<Var> = (0..5)
        .map(|j| column(tape, deltas, j))
        .collect::<Result<_>>()?;

    let shift_x = tape.mul(d[0], r[2])?;
    let shift_x = tape.scale(shift_x, cfg.center_range);
    let cx = tape.add(r[0], shift_x)?;
    let shift_y = tape.mul(d[1], r[3])?;
    let shift_y = tape.scale(shift_y, cfg.center_range);
    let cy = tape.add(r[1], shift_y)?;

    let gw = tape.scale(d[2], cfg.log_size_range);
    let gw = tape.exp(gw);
    let w = tape.mul(r[2], gw)?;
    let gh = tape.scale(d[3], cfg.log_size_range);
    let gh = tape.exp(gh);
    let h = tape.mul(r[3], gh)?;

    let turn = tape.scale(d[4], cfg.angle_range);
    let a = tape.add(r[4], turn)?;
    let a = tape.wrap_angle(a);
    stack_columns(tape, &[cx, cy, w, h, a])
}

/// Three-layer MLP to box deltas `2σ(·) − 1` decoded against the
/// references, and one linear layer to class logits.
pub fn detection_head(
    tape: &mut Tape,
    p: &Bound,
    d: Var,
    refs: Var,
    cfg: &DecoderConfig,
) -> Result<DetectionVars> {
    let h = tape.linear(d, p.get("head.w1"), p.get("head.b1"))?;
    let h = tape.relu(h);
    let h = tape.linear(h, p.get("head.w2"), p.get("head.b2"))?;
    let h = tape.relu(h);
    let o = tape.linear(h, p.get("head.w3"), p.get("head.b3"))?;
    let s = tape.sigmoid(o);
    let s = tape.scale(s, 2.0);
    let deltas = tape.add_scalar(s, -1.0);
    let boxes = decode_deltas(tape, refs, deltas, cfg)?;
    let logits = tape.linear(d, p.get("cls.w"), p.get("cls.b"))?;
    Ok(DetectionVars { boxes, logits })
}
