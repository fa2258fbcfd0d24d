//! Backbone pyramid and the two interchangeable encoder stacks.

mod attention;
mod complexity;
mod dsconv_layer;
mod fusion;
mod pyramid;
mod tokens;

pub use attention::{attention_encoder_layer, init_attention_layer, AttentionOutput};
pub use complexity::{core_ratio, count_ops, OpCount};
pub use dsconv_layer::{dsconv_encoder_layer, init_dsconv_layer};
pub use fusion::{fuse_adjacent_levels, resample, resample_map};
pub use pyramid::{build_pyramid, init_backbone_params, init_pyramid_params, stem, STEM_RATIO};
pub use tokens::TokenLayout;

use rand::Rng;

use crate::autodiff::Tape;
use crate::config::{EncoderConfig, EncoderKind};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;

pub fn init_encoder_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    num_levels: usize,
    rng: &mut R,
) {
    for i in 0..cfg.num_layers {
        let prefix = format!("enc.{i}");
        match cfg.kind {
            EncoderKind::Dsconv => init_dsconv_layer(store, &prefix, cfg.channels, cfg.kernel, rng),
            EncoderKind::Attention => init_attention_layer(store, &prefix, cfg.channels, rng),
        }
    }
    if cfg.kind == EncoderKind::Attention {
        store.init_zeros("enc.level_embed", &[num_levels]);
    }
}

/// Runs the configured encoder stack over a pyramid.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    pyr: &FeaturePyramid,
) -> Result<FeaturePyramid> {
    let mut cur = pyr.clone();
    for i in 0..cfg.num_layers {
        let prefix = format!("enc.{i}");
        cur = match cfg.kind {
            EncoderKind::Dsconv => {
                let fusion = cfg.fuse_levels.then_some(cfg.dropout_rate);
                dsconv_encoder_layer(tape, p, &prefix, &cur, fusion)?
            }
            EncoderKind::Attention => {
                let lvl = p.get("enc.level_embed");
                attention_encoder_layer(tape, p, &prefix, lvl, &cur, cfg.max_tokens)?.pyramid
            }
        };
    }
    Ok(cur)
}
