//! Refinement stage on a frozen detector: its final detections become
//! proposals, backbone features are pooled under each proposal with rotated
//! ROIAlign, and a small head predicts bounded residuals and fresh scores.

use std::f64::consts::LN_2;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::config::FinetuneConfig;
use crate::decoder::{column, stack_columns};
use crate::detection::{DetectionSet, DetectionVars};
use crate::error::{Error, Result};
use crate::geometry::{rotated_roi_align, RoiAlignConfig, RotatedBox};
use crate::matching::set_loss;
use crate::metrics::{evaluate_predictions, MetricReport};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;
use crate::train::{step_seed, Optimizer, StepLog};

/// A trained detector whose parameters must not change.
#[derive(Debug, Clone)]
pub struct FrozenTrunk {
    model: Model,
    checksum: String,
}

impl FrozenTrunk {
    pub fn new(model: Model) -> Self {
        let checksum = model.checksum();
        Self { model, checksum }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Fails with [`Error::FreezeViolation`] if the parameters moved.
    pub fn verify(&self) -> Result<()> {
        let now = self.model.checksum();
        if now != self.checksum {
            return Err(Error::FreezeViolation {
                before: self.checksum.clone(),
                after: now,
            });
        }
        Ok(())
    }
}

/// Proposals of one image together with the backbone maps they were pooled
/// from, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub detections: DetectionSet,
    pub backbone: Vec<Tensor>,
    pub ratios: Vec<usize>,
}

impl Proposals {
    /// Places the backbone maps on `tape` as constants.
    pub fn pyramid(&self, tape: &mut Tape) -> Result<FeaturePyramid> {
        let levels = self
            .backbone
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        FeaturePyramid::new(tape, levels, self.ratios.clone())
    }
}

/// Eval-mode forward of the trunk with its parameters as constants. Every
/// final-layer detection is a proposal; nothing is filtered or suppressed.
pub fn propose(trunk: &FrozenTrunk, image: &Tensor) -> Result<Proposals> {
    let m = trunk.model();
    let mut tape = Tape::new(m.cfg.seed, Mode::Eval);
    let p = m.params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let out = m.forward(&mut tape, &p, img, false)?;
    Ok(Proposals {
        detections: DetectionSet::from_tape(&tape, out.decoder.last())?,
        backbone: out.backbone.tensors(&tape),
        ratios: out.backbone.ratios.clone(),
    })
}

/// Flattened ROI feature length.
pub fn feature_len(cfg: &FinetuneConfig, channels: usize) -> usize {
    cfg.roi_size * cfg.roi_size * channels
}

/// Head parameters, all under `ft.`. The box output layer starts at zero so
/// the first refinement returns the proposals.
pub fn init_refine_head<R: Rng + ?Sized>(
    cfg: &FinetuneConfig,
    channels: usize,
    num_classes: usize,
    rng: &mut R,
) -> ParamStore {
    let f = feature_len(cfg, channels);
    let mut s = ParamStore::new();
    s.init_glorot("ft.w1", &[f, cfg.hidden], f, cfg.hidden, rng);
    s.init_zeros("ft.b1", &[cfg.hidden]);
    s.init_zeros("ft.w_out", &[cfg.hidden, 5]);
    s.init_zeros("ft.b_out", &[5]);
    s.init_glorot("ft.cls.w", &[f, num_classes + 1], f, num_classes + 1, rng);
    s.init_zeros("ft.cls.b", &[num_classes + 1]);
    s
}

/// `[N, P²C]` features, one flattened ROI patch per proposal.
pub fn pool_features(
    tape: &mut Tape,
    pyramid: &FeaturePyramid,
    proposals: &DetectionSet,
    cfg: &FinetuneConfig,
) -> Result<Var> {
    let rc = RoiAlignConfig {
        out_size: cfg.roi_size,
        canonical_px: cfg.canonical_px,
    };
    let f = feature_len(cfg, pyramid.channels);
    let rows = proposals
        .boxes
        .iter()
        .map(|b| {
            let patch = rotated_roi_align(tape, pyramid, b, &rc)?.patch;
            tape.reshape(patch, &[1, f])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Refined detections from pooled features. Box deltas `d = 2σ(MLP(F)) − 1`
/// act in each proposal's own frame: the center moves by at most
/// `center_frac` of the extent along each box axis, sizes scale within
/// `[×½, ×2]`, and the angle turns by at most `angle_range` before wrapping.
/// Scores come from a linear layer and replace the trunk's.
pub fn refine_features(
    tape: &mut Tape,
    p: &Bound,
    features: Var,
    proposals: &DetectionSet,
    cfg: &FinetuneConfig,
) -> Result<DetectionVars> {
    let h = tape.linear(features, p.get("ft.w1"), p.get("ft.b1"))?;
    let h = tape.relu(h);
    let o = tape.linear(h, p.get("ft.w_out"), p.get("ft.b_out"))?;
    let s = tape.sigmoid(o);
    let s = tape.scale(s, 2.0);
    let d = tape.add_scalar(s, -1.0);
    let d: Vec<Var> = (0..5).map(|j| column(tape, d, j)).collect::<Result<_>>()?;

    let n = proposals.len();
    let mut consts = |f: &dyn Fn(&RotatedBox) -> f64| -> Result<Var> {
        Ok(tape.constant(Tensor::new(&[n], proposals.boxes.iter().map(f).collect())?))
    };
    let k = cfg.center_frac;
    let cx0 = consts(&|b| b.cx)?;
    let cy0 = consts(&|b| b.cy)?;
    let w0 = consts(&|b| b.w)?;
    let h0 = consts(&|b| b.h)?;
    let a0 = consts(&|b| b.alpha)?;
    let uc = consts(&|b| k * b.w * b.alpha.cos())?;
    let us = consts(&|b| k * b.w * b.alpha.sin())?;
    let vc = consts(&|b| k * b.h * b.alpha.cos())?;
    let vs = consts(&|b| k * b.h * b.alpha.sin())?;

    // (u, v) in the box frame rotated into image axes
    let a = tape.mul(d[0], uc)?;
    let b = tape.mul(d[1], vs)?;
    let dx = tape.sub(a, b)?;
    let cx = tape.add(cx0, dx)?;
    let a = tape.mul(d[0], us)?;
    let b = tape.mul(d[1], vc)?;
    let dy = tape.add(a, b)?;
    let cy = tape.add(cy0, dy)?;

    let gw = tape.scale(d[2], LN_2);
    let gw = tape.exp(gw);
    let w = tape.mul(w0, gw)?;
    let gh = tape.scale(d[3], LN_2);
    let gh = tape.exp(gh);
    let hh = tape.mul(h0, gh)?;

    let turn = tape.scale(d[4], cfg.angle_range);
    let al = tape.add(a0, turn)?;
    let al = tape.wrap_angle(al);
    let boxes = stack_columns(tape, &[cx, cy, w, hh, al])?;
    let logits = tape.linear(features, p.get("ft.cls.w"), p.get("ft.cls.b"))?;
    Ok(DetectionVars { boxes, logits })
}

/// Pools and refines in one pass.
pub fn refine(
    tape: &mut Tape,
    p: &Bound,
    proposals: &DetectionSet,
    pyramid: &FeaturePyramid,
    cfg: &FinetuneConfig,
) -> Result<DetectionVars> {
    let f = pool_features(tape, pyramid, proposals, cfg)?;
    refine_features(tape, p, f, proposals, cfg)
}

/// Proposals plus their pooled features, computed once per scene.
#[derive(Debug, Clone)]
pub struct CachedScene {
    pub proposals: Proposals,
    pub features: Tensor,
}

pub fn cache_scene(
    trunk: &FrozenTrunk,
    image: &Tensor,
    cfg: &FinetuneConfig,
) -> Result<CachedScene> {
    let proposals = propose(trunk, image)?;
    let mut tape = Tape::default();
    let pyr = proposals.pyramid(&mut tape)?;
    let f = pool_features(&mut tape, &pyr, &proposals.detections, cfg)?;
    Ok(CachedScene {
        features: tape.value(f).clone(),
        proposals,
    })
}

/// Value-level refined detections of a cached scene.
pub fn refine_cached(
    head: &ParamStore,
    scene: &CachedScene,
    cfg: &FinetuneConfig,
) -> Result<DetectionSet> {
    let mut tape = Tape::default();
    let p = head.bind(&mut tape, false);
    let f = tape.constant(scene.features.clone());
    let d = refine_features(&mut tape, &p, f, &scene.proposals.detections, cfg)?;
    DetectionSet::from_tape(&tape, d)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: ParamStore,
    pub curve: Vec<StepLog>,
    /// Trunk detections on the training scenes.
    pub before: MetricReport,
    /// Refined detections after training.
    pub after: MetricReport,
}

/// Trains a fresh head for `epochs × scenes` steps, one scene per step in a
/// fixed order, re-matching against ground truth every step. The trunk
/// checksum is verified at the end.
pub fn finetune(
    trunk: &FrozenTrunk,
    scenes: &[SyntheticScene],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mcfg = &trunk.model().cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(mcfg.seed, usize::MAX));
    let head = init_refine_head(cfg, mcfg.encoder.channels, mcfg.num_classes(), &mut rng);
    finetune_head(trunk, head, scenes, cfg, |_| {})
}

/// Continues training `head`; see [`finetune`].
pub fn finetune_head(
    trunk: &FrozenTrunk,
    mut head: ParamStore,
    scenes: &[SyntheticScene],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<FinetuneOutcome> {
    trunk.verify()?;
    let mcfg = trunk.model().cfg.clone();
    let cached = scenes
        .iter()
        .map(|s| cache_scene(trunk, &s.image, cfg))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let trunk_preds: Vec<_> = cached
        .iter()
        .map(|c| c.proposals.detections.clone())
        .collect();
    let before =
        evaluate_predictions(&trunk_preds, &gts, &mcfg.recall_thresholds, 0.5, &mcfg.loss)?;

    let steps = if scenes.is_empty() {
        0
    } else {
        cfg.epochs * scenes.len()
    };
    let mut opt = Optimizer::new(&cfg.optimizer);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let i = step % scenes.len();
        let mut tape = Tape::new(step_seed(mcfg.seed, step), Mode::Train);
        let p = head.bind(&mut tape, true);
        let f = tape.constant(cached[i].features.clone());
        let d = refine_features(&mut tape, &p, f, &cached[i].proposals.detections, cfg)?;
        let loss = set_loss(&mut tape, &[d], &gts[i], &mcfg.loss, None)?.total;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let g = tape.backward(loss)?;
        let grads: IndexMap<String, Tensor> = p.collect_grads(&g);
        let grad_norm = opt.step(&mut head, &grads)?;
        let log = StepLog {
            step,
            loss: value,
            grad_norm,
        };
        on_step(&log);
        curve.push(log);
    }

    let refined = cached
        .iter()
        .map(|c| refine_cached(&head, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let after = evaluate_predictions(&refined, &gts, &mcfg.recall_thresholds, 0.5, &mcfg.loss)?;
    trunk.verify()?;
    Ok(FinetuneOutcome {
        head,
        curve,
        before,
        after,
    })
}
