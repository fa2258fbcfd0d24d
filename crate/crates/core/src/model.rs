//! The full detector: stem, pyramid, encoder, decoder and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::config::ExperimentConfig;
use crate::decoder::{decode, init_decoder_params, DecoderOutput};
use crate::detection::DetectionSet;
use crate::encoder::{
    build_pyramid, encode, init_backbone_params, init_encoder_params, stem, STEM_RATIO,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// Parameter name prefixes that belong to the detector itself.
pub const TRUNK_PREFIXES: [&str; 6] = ["stem.", "pyr.", "enc.", "dec.", "head.", "cls."];

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Projected pyramid before encoding; the fine-tune head pools from it.
    pub backbone: FeaturePyramid,
    pub memory: FeaturePyramid,
    pub decoder: DecoderOutput,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded by `cfg.seed`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let c = cfg.encoder.channels;
        let levels = cfg.pyramid.ratios.len();
        init_backbone_params(&mut params, &cfg.pyramid, c, &mut rng)?;
        init_encoder_params(&mut params, &cfg.encoder, levels, &mut rng);
        init_decoder_params(
            &mut params,
            &cfg.decoder,
            c,
            levels,
            cfg.num_classes(),
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Rebuilds a model around loaded parameters, checking their layout
    /// against a fresh initialization.
    pub fn from_params(cfg: &ExperimentConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::init(cfg)?;
        let trunk: ParamStore = filter_prefixes(&params, &TRUNK_PREFIXES);
        fresh.params.check_layout(&trunk)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: trunk,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: Var,
        aux: bool,
    ) -> Result<ForwardOutput> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Dimension(format!(
                "image must be [H, W, 3], got {s:?}"
            )));
        }
        let feats = stem(tape, p, image)?;
        let backbone = build_pyramid(tape, p, feats, STEM_RATIO, &self.cfg.pyramid.ratios)?;
        let memory = encode(tape, p, &self.cfg.encoder, &backbone)?;
        let decoder = decode(tape, p, &self.cfg.decoder, &memory, aux)?;
        Ok(ForwardOutput {
            backbone,
            memory,
            decoder,
        })
    }

    /// Eval-mode final-layer detections for one image.
    pub fn predict(&self, image: &Tensor) -> Result<DetectionSet> {
        let mut tape = Tape::new(self.cfg.seed, Mode::Eval);
        let p = self.params.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let out = self.forward(&mut tape, &p, img, false)?;
        DetectionSet::from_tape(&tape, out.decoder.last())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

pub(crate) fn filter_prefixes(params: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, t) in params.iter() {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            out.insert(k.clone(), t.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_on_toy_config() {
        let cfg = ExperimentConfig::gradcheck_preset();
        let m = Model::init(&cfg).unwrap();
        let s = cfg.image_size();
        let img = Tensor::full(&[s, s, 3], 0.5);
        let d = m.predict(&img).unwrap();
        assert_eq!(d.len(), cfg.decoder.num_queries);
        assert_eq!(
            d.logits.shape(),
            &[cfg.decoder.num_queries, cfg.num_classes() + 1]
        );
        assert_eq!(m.predict(&img).unwrap(), d);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ExperimentConfig::gradcheck_preset();
        assert_eq!(
            Model::init(&cfg).unwrap().checksum(),
            Model::init(&cfg).unwrap().checksum()
        );
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(
            Model::init(&cfg).unwrap().checksum(),
            Model::init(&other).unwrap().checksum()
        );
    }

    #[test]
    fn every_parameter_is_a_trunk_parameter() {
        let m = Model::init(&ExperimentConfig::default()).unwrap();
        assert_eq!(filter_prefixes(&m.params, &TRUNK_PREFIXES), m.params);
    }
}
