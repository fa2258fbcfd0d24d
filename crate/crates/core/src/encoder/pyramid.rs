//! Convolutional stem and multi-scale pyramid construction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::PyramidConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;

/// Stride of the stem relative to the input image.
pub const STEM_RATIO: usize = 2;

/// Number of stride-2 convolutions between the stem and the coarsest level.
fn num_downsamples(stem_ratio: usize, ratios: &[usize]) -> Result<usize> {
    let coarsest = ratios[0];
    let finest = *ratios.last().unwrap();
    if finest < stem_ratio
        || !coarsest.is_multiple_of(stem_ratio)
        || !(coarsest / stem_ratio).is_power_of_two()
    {
        return Err(Error::Config(format!(
            "ratios {ratios:?} not reachable by stride-2 steps from stem ratio {stem_ratio}"
        )));
    }
    Ok((coarsest / stem_ratio).trailing_zeros() as usize)
}

fn chain_channels(stem_c: usize, channels: usize, k: usize) -> usize {
    (stem_c << (k + 1).min(16)).min(channels.max(stem_c))
}

pub fn init_backbone_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &PyramidConfig,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    let sc = cfg.stem_channels;
    store.init_glorot("stem.w", &[3, 3, 3, sc], 27, 9 * sc, rng);
    store.init_zeros("stem.b", &[sc]);
    init_pyramid_params(store, sc, STEM_RATIO, &cfg.ratios, channels, rng)
}

/// Parameters for [`build_pyramid`] on a stem of `stem_c` channels.
pub fn init_pyramid_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    stem_c: usize,
    stem_ratio: usize,
    ratios: &[usize],
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    let downs = num_downsamples(stem_ratio, ratios)?;
    let mut c_in = stem_c;
    let mut chain = vec![(stem_ratio, stem_c)];
    for k in 0..downs {
        let c_out = chain_channels(stem_c, channels, k);
        // He-style bound for the ReLU chain
        let bound = (6.0 / (9 * c_in) as f64).sqrt();
        store.init_uniform(&format!("pyr.down.{k}.w"), &[3, 3, c_in, c_out], bound, rng);
        store.init_zeros(&format!("pyr.down.{k}.b"), &[c_out]);
        chain.push((chain.last().unwrap().0 * 2, c_out));
        c_in = c_out;
    }
    for (l, &r) in ratios.iter().enumerate() {
        let c_tap = chain.iter().find(|(cr, _)| *cr == r).map(|x| x.1).unwrap();
        store.init_glorot(
            &format!("pyr.proj.{l}.w"),
            &[c_tap, channels],
            c_tap,
            channels,
            rng,
        );
        store.init_zeros(&format!("pyr.proj.{l}.b"), &[channels]);
    }
    Ok(())
}

/// Image `[H, W, 3]` → stem features at [`STEM_RATIO`].
pub fn stem(tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
    let y = tape.conv2d(image, p.get("stem.w"), 2, 1)?;
    let y = tape.add_row(y, p.get("stem.b"))?;
    Ok(tape.relu(y))
}

/// Builds the pyramid from stem features by a chain of 3×3 stride-2
/// convolutions, tapping the chain at each configured ratio and projecting
/// every tap to a shared channel count. Each coarser tap is one more stride-2
/// convolution of the previous one.
pub fn build_pyramid(
    tape: &mut Tape,
    p: &Bound,
    stem_features: Var,
    stem_ratio: usize,
    ratios: &[usize],
) -> Result<FeaturePyramid> {
    if ratios.is_empty() {
        return Err(Error::Config("need at least one pyramid level".into()));
    }
    let downs = num_downsamples(stem_ratio, ratios)?;
    let (h, w, _) = tape.value(stem_features).dims3()?;
    let span = 1usize << downs;
    if h % span != 0 || w % span != 0 {
        return Err(Error::Config(format!(
            "stem extent {h}x{w} not divisible by {span} (ratios {ratios:?}, stem ratio {stem_ratio})"
        )));
    }
    let mut taps = vec![(stem_ratio, stem_features)];
    let mut cur = stem_features;
    for k in 0..downs {
        let y = tape.conv2d(cur, p.get(&format!("pyr.down.{k}.w")), 2, 1)?;
        let y = tape.add_row(y, p.get(&format!("pyr.down.{k}.b")))?;
        cur = tape.relu(y);
        taps.push((stem_ratio << (k + 1), cur));
    }
    let mut levels = Vec::with_capacity(ratios.len());
    for (l, &r) in ratios.iter().enumerate() {
        let src = taps
            .iter()
            .find(|(tr, _)| *tr == r)
            .map(|x| x.1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "ratio {r} is not a stride-2 multiple of {stem_ratio}"
                ))
            })?;
        let y = tape.pointwise_conv2d(src, p.get(&format!("pyr.proj.{l}.w")))?;
        levels.push(tape.add_row(y, p.get(&format!("pyr.proj.{l}.b")))?);
    }
    FeaturePyramid::new(tape, levels, ratios.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extents_follow_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ratios = [64, 32, 16, 8];
        init_pyramid_params(&mut store, 4, 1, &ratios, 6, &mut rng).unwrap();
        let mut tape = Tape::default();
        let p = store.bind(&mut tape, false);
        let stem = tape.constant(Tensor::uniform(&[64, 64, 4], -1.0, 1.0, &mut rng));
        let pyr = build_pyramid(&mut tape, &p, stem, 1, &ratios).unwrap();
        let ext: Vec<_> = (0..4).map(|l| pyr.extent(&tape, l)).collect();
        assert_eq!(ext, vec![(1, 1), (2, 2), (4, 4), (8, 8)]);
        assert!(pyr.levels.iter().all(|&v| tape.shape(v)[2] == 6));
    }

    #[test]
    fn single_level_is_projected_stem() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, 3, 2, &[2], 3, &mut rng).unwrap();
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.insert("pyr.proj.0.w", eye);
        let mut tape = Tape::default();
        let p = store.bind(&mut tape, false);
        let sv = Tensor::uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let stem = tape.constant(sv.clone());
        let pyr = build_pyramid(&mut tape, &p, stem, 2, &[2]).unwrap();
        assert_eq!(tape.value(pyr.levels[0]), &sv);
    }

    #[test]
    fn identity_projection_exposes_strided_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, c, 1, &[4, 2], c, &mut rng).unwrap();
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        store.insert("pyr.proj.0.w", eye.clone());
        store.insert("pyr.proj.1.w", eye);
        let mut tape = Tape::default();
        let p = store.bind(&mut tape, false);
        let stem = tape.constant(Tensor::uniform(&[8, 8, c], -1.0, 1.0, &mut rng));
        let pyr = build_pyramid(&mut tape, &p, stem, 1, &[4, 2]).unwrap();

        // explicit chain: relu(conv_s2(x) + b), twice
        let d0 = tape.conv2d(stem, p.get("pyr.down.0.w"), 2, 1).unwrap();
        let d0 = tape.add_row(d0, p.get("pyr.down.0.b")).unwrap();
        let d0 = tape.relu(d0);
        let d1 = tape.conv2d(d0, p.get("pyr.down.1.w"), 2, 1).unwrap();
        let d1 = tape.add_row(d1, p.get("pyr.down.1.b")).unwrap();
        let d1 = tape.relu(d1);
        assert_eq!(tape.value(pyr.levels[1]), tape.value(d0));
        assert_eq!(tape.value(pyr.levels[0]), tape.value(d1));
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_pyramid_params(&mut store, 2, 1, &[8, 4], 2, &mut rng).unwrap();
        let mut tape = Tape::default();
        let p = store.bind(&mut tape, false);
        let stem = tape.constant(Tensor::ones(&[12, 12, 2]));
        assert!(matches!(
            build_pyramid(&mut tape, &p, stem, 1, &[8, 4]),
            Err(Error::Config(_))
        ));
    }
}
