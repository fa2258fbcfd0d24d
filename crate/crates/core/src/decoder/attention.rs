use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::columns;

pub(super) fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    rng: &mut R,
) {
    for m in ["q", "k", "v"] {
        store.init_glorot(&format!("{prefix}.w{m}"), &[c, c], c, c, rng);
        store.init_zeros(&format!("{prefix}.b{m}"), &[c]);
    }
    store.init_ones(&format!("{prefix}.ln_g"), &[c]);
    store.init_zeros(&format!("{prefix}.ln_b"), &[c]);
}

pub(super) fn init_ffn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    f: usize,
    rng: &mut R,
) {
    store.init_glorot(&format!("{prefix}.w1"), &[c, f], c, f, rng);
    store.init_zeros(&format!("{prefix}.b1"), &[f]);
    store.init_glorot(&format!("{prefix}.w2"), &[f, c], f, c, rng);
    store.init_zeros(&format!("{prefix}.b2"), &[c]);
    store.init_ones(&format!("{prefix}.ln_g"), &[c]);
    store.init_zeros(&format!("{prefix}.ln_b"), &[c]);
}

/// Encoder memory flattened for cross-attention.
#[derive(Debug, Clone)]
pub struct Memory {
    /// `[T, C]` value source.
    pub tokens: Var,
    /// `[T, C]` key source: tokens plus positional and level signals.
    pub keyed: Var,
    /// Normalized `(x, y)` token centers.
    pub locations: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    /// `LN(tgt + A·V)`, before the feed-forward block.
    pub attended: Var,
    /// Block output after the feed-forward block.
    pub out: Var,
    /// `[N, T]` weights, rows summing to one.
    pub weights: Var,
}

/// `softmax(QKᵀ/√C + bias)·V` and the weights.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let c = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    let w = tape.softmax(logits);
    Ok((tape.matmul(w, v)?, w))
}

fn proj(tape: &mut Tape, p: &Bound, prefix: &str, m: &str, x: Var) -> Result<Var> {
    tape.linear(
        x,
        p.get(&format!("{prefix}.w{m}")),
        p.get(&format!("{prefix}.b{m}")),
    )
}

fn post_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, delta: Var) -> Result<Var> {
    let r = tape.add(x, delta)?;
    tape.layer_norm(
        r,
        p.get(&format!("{prefix}.ln_g")),
        p.get(&format!("{prefix}.ln_b")),
    )
}

pub(super) fn ffn(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(
        x,
        p.get(&format!("{prefix}.w1")),
        p.get(&format!("{prefix}.b1")),
    )?;
    let h = tape.relu(h);
    let y = tape.linear(
        h,
        p.get(&format!("{prefix}.w2")),
        p.get(&format!("{prefix}.b2")),
    )?;
    post_norm(tape, p, prefix, x, y)
}

/// Self-attention among queries with residual and post-normalization.
pub fn query_self_attention(tape: &mut Tape, p: &Bound, prefix: &str, tgt: Var) -> Result<Var> {
    let q = proj(tape, p, prefix, "q", tgt)?;
    let k = proj(tape, p, prefix, "k", tgt)?;
    let v = proj(tape, p, prefix, "v", tgt)?;
    let (agg, _) = attend(tape, q, k, v, None)?;
    post_norm(tape, p, prefix, tgt, agg)
}

/// Additive bias `−‖loc − c‖² / (2σ²)` with `2σ² = (w² + h²)/4`, so each
/// query favours memory tokens inside its reference box.
pub fn spatial_bias(tape: &mut Tape, refs: Var, locations: &[[f64; 2]]) -> Result<Var> {
    let t = locations.len();
    let n = tape.shape(refs)[0];
    let centers = columns(tape, refs, &[0, 1])?;
    let centers = tape.reshape(centers, &[n, 2])?;
    let mut loc_t = vec![0.0; 2 * t];
    for (k, l) in locations.iter().enumerate() {
        loc_t[k] = l[0];
        loc_t[t + k] = l[1];
    }
    let loc_t = tape.constant(Tensor::new(&[2, t], loc_t)?);
    let loc_sq = tape.constant(Tensor::new(
        &[t],
        locations
            .iter()
            .map(|l| l[0] * l[0] + l[1] * l[1])
            .collect(),
    )?);

    let cross = tape.matmul(centers, loc_t)?;
    let cross = tape.scale(cross, -2.0);
    let c_sq = tape.mul(centers, centers)?;
    let c_sq = tape.sum_rows(c_sq);
    let d2 = tape.add_col(cross, c_sq)?;
    let d2 = tape.add_row(d2, loc_sq)?;

    let wh = columns(tape, refs, &[2, 3])?;
    let wh = tape.reshape(wh, &[n, 2])?;
    let wh_sq = tape.mul(wh, wh)?;
    let wh_sq = tape.sum_rows(wh_sq);
    let inv = tape.recip(wh_sq);
    let inv = tape.scale(inv, -4.0);
    tape.mul_col(d2, inv)
}

/// Multi-scale cross-attention of queries over all memory tokens, then a
/// feed-forward block; each sub-block is residual and post-normalized.
pub fn ms_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    tgt: Var,
    refs: Option<Var>,
    memory: &Memory,
) -> Result<CrossAttention> {
    let (cq, cm) = (tape.shape(tgt)[1], tape.shape(memory.tokens)[1]);
    if cq != cm {
        return dim_err(format!("query width {cq} vs memory channels {cm}"));
    }
    let ca = format!("{prefix}.ca");
    let q = proj(tape, p, &ca, "q", tgt)?;
    let k = proj(tape, p, &ca, "k", memory.keyed)?;
    let v = proj(tape, p, &ca, "v", memory.tokens)?;
    let bias = match refs {
        Some(r) => Some(spatial_bias(tape, r, &memory.locations)?),
        None => None,
    };
    let (agg, weights) = attend(tape, q, k, v, bias)?;
    let attended = post_norm(tape, p, &ca, tgt, agg)?;
    let out = ffn(tape, p, &format!("{prefix}.ffn"), attended)?;
    Ok(CrossAttention {
        attended,
        out,
        weights,
    })
}
