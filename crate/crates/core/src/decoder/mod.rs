//! Object queries, multi-scale cross-attention and the box/class head.

mod attention;
mod head;

pub use attention::{
    ms_cross_attention, query_self_attention, spatial_bias, CrossAttention, Memory,
};
pub use head::{decode_deltas, detection_head, predict_reference_points};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::DecoderConfig;
use crate::detection::DetectionVars;
use crate::encoder::TokenLayout;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;

/// Column `j` of a 2-D tensor as a 1-D tensor.
pub(crate) fn column(tape: &mut Tape, x: Var, j: usize) -> Result<Var> {
    columns(tape, x, &[j])
}

/// Selected columns, flattened row by row.
pub(crate) fn columns(tape: &mut Tape, x: Var, cols: &[usize]) -> Result<Var> {
    let (n, m) = tape.value(x).dims2()?;
    let idx: Vec<usize> = (0..n)
        .flat_map(|i| cols.iter().map(move |&j| i * m + j))
        .collect();
    tape.gather(x, &idx)
}

/// Equal-length 1-D tensors as the columns of `[N, K]`.
pub(crate) fn stack_columns(tape: &mut Tape, cols: &[Var]) -> Result<Var> {
    let n = tape.value(cols[0]).len();
    let t = tape.concat(cols, &[cols.len(), n])?;
    tape.transpose(t)
}

pub fn init_decoder_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &DecoderConfig,
    channels: usize,
    num_levels: usize,
    num_classes: usize,
    rng: &mut R,
) {
    let c = channels;
    store.init_uniform("dec.query", &[cfg.num_queries, c], 1.0, rng);
    store.init_glorot("dec.ref.w", &[c, 5], c, 5, rng);
    store.init_zeros("dec.ref.b", &[5]);
    store.init_zeros("dec.level_embed", &[num_levels]);
    for i in 0..cfg.num_layers {
        if i > 0 {
            attention::init_attention(store, &format!("dec.{i}.sa"), c, rng);
        }
        attention::init_attention(store, &format!("dec.{i}.ca"), c, rng);
        attention::init_ffn(store, &format!("dec.{i}.ffn"), c, cfg.ffn_dim, rng);
    }
    head::init_head(store, c, num_classes, rng);
}

/// Flattens the encoded pyramid once; keys carry position and level signals.
pub fn prepare_memory(tape: &mut Tape, p: &Bound, pyr: &FeaturePyramid) -> Result<Memory> {
    let layout = TokenLayout::of(tape, pyr);
    let tokens = layout.flatten(tape, pyr)?;
    let pos = tape.constant(layout.sinusoidal());
    let lvl = tape.sparse(p.get("dec.level_embed"), layout.level_embed_map())?;
    let keyed = tape.add(tokens, pos)?;
    let keyed = tape.add(keyed, lvl)?;
    Ok(Memory {
        tokens,
        keyed,
        locations: layout.centers(),
    })
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Detections of every layer when auxiliary outputs are requested,
    /// otherwise only the last layer's.
    pub layers: Vec<DetectionVars>,
    pub refs: Var,
    /// Cross-attention weights of the last layer.
    pub weights: Var,
}

impl DecoderOutput {
    pub fn last(&self) -> DetectionVars {
        *self.layers.last().unwrap()
    }
}

/// Layer 0 is a cross-attention block; later layers run query
/// self-attention first. References stay fixed across layers and the head is
/// shared.
pub fn decode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DecoderConfig,
    memory: &FeaturePyramid,
    aux: bool,
) -> Result<DecoderOutput> {
    let mem = prepare_memory(tape, p, memory)?;
    let mut tgt = p.get("dec.query");
    let refs = predict_reference_points(tape, p, tgt)?;
    let bias_refs = cfg.spatial_bias.then_some(refs);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut weights = None;
    for i in 0..cfg.num_layers {
        if i > 0 {
            tgt = query_self_attention(tape, p, &format!("dec.{i}.sa"), tgt)?;
        }
        let ca = ms_cross_attention(tape, p, &format!("dec.{i}"), tgt, bias_refs, &mem)?;
        tgt = ca.out;
        weights = Some(ca.weights);
        if aux || i + 1 == cfg.num_layers {
            layers.push(detection_head(tape, p, tgt, refs, cfg)?);
        }
    }
    Ok(DecoderOutput {
        layers,
        refs,
        weights: weights.expect("at least one decoder layer"),
    })
}
