//! Experiment configuration. Loaded from JSON with unknown keys rejected.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Dsconv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub num_layers: usize,
    /// Depthwise kernel extent (odd).
    pub kernel: usize,
    /// Dropout applied to the fused neighbour-level sum.
    pub dropout_rate: f64,
    pub channels: usize,
    /// Adjacent-level fusion inside each depthwise-separable layer.
    pub fuse_levels: bool,
    /// Token cap for the full self-attention baseline.
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Dsconv,
            num_layers: 2,
            kernel: 3,
            dropout_rate: 0.1,
            channels: 32,
            fuse_levels: true,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    /// Center offset reach, in units of the reference extent.
    pub center_range: f64,
    /// Half-width of the log-scale size correction.
    pub log_size_range: f64,
    /// Half-width of the angle correction (radians).
    pub angle_range: f64,
    /// Gaussian bias pulling cross-attention toward the reference box.
    pub spatial_bias: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_queries: 20,
            ffn_dim: 64,
            center_range: 1.0,
            log_size_range: 4f64.ln(),
            angle_range: FRAC_PI_2,
            spatial_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub no_object_weight: f64,
    /// Supervise every decoder layer, not only the last.
    pub aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
            no_object_weight: 0.1,
            aux: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Downsample ratios, coarse to fine.
    pub ratios: Vec<usize>,
    /// Channels of the first stem convolution.
    pub stem_channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            ratios: vec![64, 32, 16, 8],
            stem_channels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    /// Long-edge extent range, normalized.
    pub size_range: (f64, f64),
    /// Short/long edge ratio range.
    pub aspect_range: (f64, f64),
    pub angle_range: (f64, f64),
    /// Largest IoU allowed between two objects of one scene.
    pub max_overlap: f64,
    pub noise_std: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_objects: 3,
            num_classes: 3,
            size_range: (0.25, 0.45),
            aspect_range: (0.4, 0.8),
            angle_range: (-FRAC_PI_2, FRAC_PI_2),
            max_overlap: 0.0,
            noise_std: 0.05,
            max_retries: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub base_seed: u64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 8,
            base_seed: 1000,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            clip_norm: 0.0,
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub roi_size: usize,
    pub canonical_px: f64,
    pub hidden: usize,
    /// Largest center shift as a fraction of the proposal extent.
    pub center_frac: f64,
    /// Largest angle correction (radians).
    pub angle_range: f64,
    /// Passes over the scene set; one step per scene.
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            roi_size: 7,
            canonical_px: 64.0,
            hidden: 64,
            center_frac: 0.5,
            angle_range: FRAC_PI_2 * 0.5,
            epochs: 12,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 2e-4,
                steps: 0,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pyramid: PyramidConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub finetune: FinetuneConfig,
    /// IoU thresholds for the recall report.
    pub recall_thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pyramid: PyramidConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            dataset: DatasetConfig::default(),
            optimizer: OptimizerConfig::default(),
            finetune: FinetuneConfig::default(),
            recall_thresholds: vec![0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl ExperimentConfig {
    pub fn num_classes(&self) -> usize {
        self.dataset.scene.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.dataset.scene.image_size
    }

    /// 8-scene overfit setup: C=32, 2+2 layers, 20 queries, ratios 16/8.
    pub fn overfit_preset() -> Self {
        let mut c = Self::default();
        c.pyramid.ratios = vec![16, 8];
        c.encoder.num_layers = 2;
        c.encoder.channels = 32;
        c.decoder.num_layers = 2;
        c.decoder.num_queries = 20;
        c.optimizer = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            clip_norm: 1.0,
            steps: 3000,
            ..OptimizerConfig::default()
        };
        c
    }

    /// Tiny instance for end-to-end gradient checks: C=8, 2 encoder layers,
    /// 1 decoder layer, 3 queries, 2 levels.
    pub fn gradcheck_preset() -> Self {
        let mut c = Self::default();
        c.pyramid.ratios = vec![8, 4];
        c.pyramid.stem_channels = 4;
        c.encoder.channels = 8;
        c.encoder.num_layers = 2;
        c.decoder.num_layers = 1;
        c.decoder.num_queries = 3;
        c.decoder.ffn_dim = 8;
        c.dataset.scene.image_size = 16;
        c.dataset.scene.num_objects = 2;
        c.dataset.scene.size_range = (0.3, 0.5);
        c.dataset.num_scenes = 1;
        c.finetune.roi_size = 2;
        c.finetune.hidden = 6;
        c
    }

    /// Full-scale hyperparameters (reference only; far beyond desk scale).
    pub fn full_scale_preset() -> Self {
        let mut c = Self::default();
        c.encoder.num_layers = 6;
        c.encoder.channels = 256;
        c.decoder.num_layers = 6;
        c.decoder.num_queries = 1000;
        c.decoder.ffn_dim = 1024;
        c.dataset.scene.num_classes = 15;
        c.dataset.scene.image_size = 1024;
        c.optimizer.lr = 1e-4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "overfit" => Ok(Self::overfit_preset()),
            "gradcheck" => Ok(Self::gradcheck_preset()),
            "full" => Ok(Self::full_scale_preset()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = &self.pyramid.ratios;
        if r.is_empty() {
            return bad("pyramid.ratios must not be empty".into());
        }
        if r.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!(
                "pyramid.ratios must be strictly decreasing, got {r:?}"
            ));
        }
        if r.iter().any(|x| !x.is_power_of_two() || *x < 2) {
            return bad(format!(
                "pyramid.ratios must be powers of two ≥ 2, got {r:?}"
            ));
        }
        let s = self.image_size();
        if !s.is_multiple_of(r[0]) {
            return bad(format!(
                "image size {s} not divisible by coarsest ratio {}",
                r[0]
            ));
        }
        let e = &self.encoder;
        if e.num_layers == 0 {
            return bad("encoder.num_layers must be ≥ 1".into());
        }
        if e.kernel.is_multiple_of(2) {
            return bad(format!("encoder.kernel must be odd, got {}", e.kernel));
        }
        if !(0.0..1.0).contains(&e.dropout_rate) {
            return bad(format!(
                "encoder.dropout_rate must be in [0,1), got {}",
                e.dropout_rate
            ));
        }
        if e.channels == 0 || self.pyramid.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let d = &self.decoder;
        if d.num_layers == 0 || d.num_queries == 0 || d.ffn_dim == 0 {
            return bad("decoder layers, queries and ffn_dim must be positive".into());
        }
        let l = &self.loss;
        if [l.cls, l.l1, l.iou, l.no_object_weight]
            .iter()
            .any(|c| *c < 0.0)
        {
            return bad("loss coefficients must be non-negative".into());
        }
        let sc = &self.dataset.scene;
        if sc.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(0.0 < sc.size_range.0 && sc.size_range.0 <= sc.size_range.1 && sc.size_range.1 < 1.0) {
            return bad(format!("invalid size_range {:?}", sc.size_range));
        }
        if !(0.0 < sc.aspect_range.0
            && sc.aspect_range.0 <= sc.aspect_range.1
            && sc.aspect_range.1 <= 1.0)
        {
            return bad(format!("invalid aspect_range {:?}", sc.aspect_range));
        }
        if sc.angle_range.0 > sc.angle_range.1 {
            return bad(format!("invalid angle_range {:?}", sc.angle_range));
        }
        if self
            .recall_thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return bad("recall thresholds must lie in (0, 1]".into());
        }
        if self.finetune.roi_size == 0 {
            return bad("finetune.roi_size must be ≥ 1".into());
        }
        Ok(())
    }
}
