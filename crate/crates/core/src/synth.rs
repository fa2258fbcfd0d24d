//! Deterministic synthetic scenes of textured oriented rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::matching::GroundTruthSet;
use crate::tensor::Tensor;

/// Sub-samples per pixel side used when rasterizing.
pub const SUPERSAMPLE: usize = 4;
const BACKGROUND: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `[H, W, 3]`.
    pub image: Tensor,
    pub gts: GroundTruthSet,
}

/// Serialized form of a scene; the image is regenerated from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub alpha_radians: f64,
    pub class: usize,
}

impl SyntheticScene {
    pub fn record(&self) -> SceneRecord {
        let s = self.image.shape();
        SceneRecord {
            seed: self.seed,
            image_shape: [s[0], s[1], s[2]],
            objects: self
                .gts
                .boxes
                .iter()
                .zip(&self.gts.labels)
                .map(|(b, &class)| ObjectRecord {
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                    alpha_radians: b.alpha,
                    class,
                })
                .collect(),
        }
    }
}

/// Base color of a class: hues spread evenly around the color wheel.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = class as f64 / num_classes.max(1) as f64;
    let channel = |offset: f64| {
        let t = (hue + offset).rem_euclid(1.0);
        let tri = (6.0 * t - 3.0).abs() - 1.0;
        0.15 + 0.8 * tri.clamp(0.0, 1.0)
    };
    [channel(0.0), channel(2.0 / 3.0), channel(1.0 / 3.0)]
}

/// Class-dependent texture multiplier at box-frame coordinates `(u, v)`
/// measured in units of the box extents: solid, stripes across the long
/// edge, or a checkerboard.
fn texture(class: usize, u: f64, v: f64) -> f64 {
    match class % 3 {
        0 => 1.0,
        1 => {
            if ((u * 4.0).floor() as i64).rem_euclid(2) == 0 {
                1.0
            } else {
                0.6
            }
        }
        _ => {
            let k = (u * 3.0).floor() as i64 + (v * 2.0).floor() as i64;
            if k.rem_euclid(2) == 0 {
                1.0
            } else {
                0.55
            }
        }
    }
}

/// Box-frame coordinates in `[0, 1)²` of a point inside `b`, if it is.
fn box_frame(b: &RotatedBox, x: f64, y: f64) -> Option<(f64, f64)> {
    let (s, c) = b.alpha.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = (dx * c + dy * s) / b.w + 0.5;
    let v = (-dx * s + dy * c) / b.h + 0.5;
    ((0.0..1.0).contains(&u) && (0.0..1.0).contains(&v)).then_some((u, v))
}

/// Fraction of each pixel covered by `b` on an `h×w` grid, estimated with
/// `SUPERSAMPLE²` samples per pixel.
pub fn coverage_mask(b: &RotatedBox, h: usize, w: usize) -> Vec<f64> {
    let n = SUPERSAMPLE;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut hit = 0;
            for si in 0..n {
                for sj in 0..n {
                    let x = (j as f64 + (sj as f64 + 0.5) / n as f64) / w as f64;
                    let y = (i as f64 + (si as f64 + 0.5) / n as f64) / h as f64;
                    if box_frame(b, x, y).is_some() {
                        hit += 1;
                    }
                }
            }
            out[i * w + j] = hit as f64 / (n * n) as f64;
        }
    }
    out
}

/// Half extents of the axis-aligned hull of a box.
fn half_hull(w: f64, h: f64, alpha: f64) -> (f64, f64) {
    let (s, c) = alpha.sin_cos();
    (
        0.5 * (w * c.abs() + h * s.abs()),
        0.5 * (w * s.abs() + h * c.abs()),
    )
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<GroundTruthSet> {
    let mut boxes: Vec<RotatedBox> = Vec::with_capacity(cfg.num_objects);
    let mut labels = Vec::with_capacity(cfg.num_objects);
    for _ in 0..cfg.num_objects {
        let class = rng.gen_range(0..cfg.num_classes);
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let long = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
            let short = long * rng.gen_range(cfg.aspect_range.0..=cfg.aspect_range.1);
            let alpha = if cfg.angle_range.0 < cfg.angle_range.1 {
                rng.gen_range(cfg.angle_range.0..cfg.angle_range.1)
            } else {
                cfg.angle_range.0
            };
            let (ex, ey) = half_hull(long, short, alpha);
            if ex >= 0.5 || ey >= 0.5 {
                continue;
            }
            let cx = rng.gen_range(ex..=1.0 - ex);
            let cy = rng.gen_range(ey..=1.0 - ey);
            let b = RotatedBox::new(cx, cy, long, short, alpha)?;
            if boxes.iter().all(|o| rotated_iou(o, &b) <= cfg.max_overlap) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {} of {} after {} attempts",
                boxes.len() + 1,
                cfg.num_objects,
                cfg.max_retries
            ))
        })?;
        boxes.push(b);
        labels.push(class);
    }
    GroundTruthSet::new(boxes, labels, cfg.num_classes)
}

/// Renders a scene as a pure function of `(seed, cfg)`: a noisy flat
/// background with each object painted over it in class color and texture,
/// anti-aliased by supersampling.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts = place_objects(&mut rng, cfg)?;
    let s = cfg.image_size;
    let n = SUPERSAMPLE;
    let mut img = vec![BACKGROUND; s * s * 3];
    for (b, &class) in gts.boxes.iter().zip(&gts.labels) {
        let color = class_color(class, cfg.num_classes);
        for i in 0..s {
            for j in 0..s {
                let mut acc = [0.0; 3];
                let mut hit = 0;
                for si in 0..n {
                    for sj in 0..n {
                        let x = (j as f64 + (sj as f64 + 0.5) / n as f64) / s as f64;
                        let y = (i as f64 + (si as f64 + 0.5) / n as f64) / s as f64;
                        if let Some((u, v)) = box_frame(b, x, y) {
                            let t = texture(class, u, v);
                            for ch in 0..3 {
                                acc[ch] += color[ch] * t;
                            }
                            hit += 1;
                        }
                    }
                }
                if hit == 0 {
                    continue;
                }
                let f = hit as f64 / (n * n) as f64;
                let px = &mut img[(i * s + j) * 3..(i * s + j) * 3 + 3];
                for ch in 0..3 {
                    px[ch] = (1.0 - f) * px[ch] + acc[ch] / (n * n) as f64;
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(SyntheticScene {
        seed,
        image: Tensor::new(&[s, s, 3], img)?,
        gts,
    })
}

/// Scenes seeded `base_seed, base_seed + 1, …`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SyntheticScene>> {
    (0..cfg.num_scenes)
        .map(|i| generate_scene(cfg.base_seed + i as u64, &cfg.scene))
        .collect()
}
