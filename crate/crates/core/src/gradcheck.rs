//! Central finite-difference checks of reverse-mode gradients.
//!
//! Every check reduces its output to a scalar with a fixed random
//! projection `L = Σ out ⊙ R`, so each output element contributes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Mode, SparseMap, Tape, Var};
use crate::config::{DecoderConfig, ExperimentConfig};
use crate::decoder::{decode, init_decoder_params};
use crate::detection::DetectionSet;
use crate::encoder::{
    attention_encoder_layer, dsconv_encoder_layer, init_attention_layer, init_dsconv_layer,
    resample,
};
use crate::error::{Error, Result};
use crate::finetune::{cache_scene, init_refine_head, refine_features, FrozenTrunk};
use crate::geometry::{rotated_roi_align, RoiAlignConfig, RotatedBox};
use crate::matching::{match_detections, set_loss, GroundTruthSet, MatchAssignment};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::synth::generate_scene;
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step.
pub const FD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    /// Number of scalar inputs perturbed.
    pub inputs: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err <= GRAD_TOL
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = inf(&mut analytic.iter().copied())
        .max(inf(&mut numeric.iter().copied()))
        .max(1e-6);
    diff / scale
}

/// Central differences of `f` with respect to every element of `inputs`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + eps;
            let up = f(&work)?;
            work[i].data_mut()[j] = x - eps;
            let down = f(&work)?;
            work[i].data_mut()[j] = x;
            g.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Tape seed and mode used by every evaluation of one check; dropout masks
/// replay identically across perturbations.
#[derive(Debug, Clone, Copy)]
struct Setting {
    seed: u64,
    mode: Mode,
    corrupt: bool,
}

fn projected(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let r = tape.constant(proj.clone());
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

fn check(name: &str, inputs: &[Tensor], build: &Builder, s: Setting) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xA5A5);
    let proj = {
        let mut tape = Tape::new(s.seed, s.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng)
    };
    let mut tape = Tape::new(s.seed, s.mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = projected(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| match grads.get(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    if s.corrupt {
        // negative control: a 1% error in the analytic gradient
        analytic.iter_mut().for_each(|g| *g *= 1.01);
        if let Some(g) = analytic.first_mut() {
            *g += 1e-3;
        }
    }
    let mut f = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(s.seed, s.mode);
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let l = projected(&mut tape, out, &proj)?;
        Ok(tape.value(l).item())
    };
    let numeric: Vec<f64> = finite_diff_grad(&mut f, inputs, FD_EPS)?
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    Ok(GradCheck {
        name: name.to_string(),
        rel_err: relative_error(&analytic, &numeric),
        inputs: numeric.len(),
    })
}

type BuildFn<'a> = dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'a;

/// Checks every tensor of `store` (plus `extra` inputs) through `build`.
fn check_store(
    name: &str,
    store: &ParamStore,
    extra: &[Tensor],
    build: &BuildFn<'_>,
    s: Setting,
) -> Result<GradCheck> {
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    let k = names.len();
    let wrapped = |tape: &mut Tape, vars: &[Var]| {
        let p = Bound::from_vars(names.iter().cloned().zip(vars[..k].iter().copied()));
        build(tape, &p, &vars[k..])
    };
    check(name, &inputs, &wrapped, s)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.0, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.gen_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// Replaces all-zero tensors (fresh biases) with small random values. A zero
/// bias behind a fully inactive ReLU row sits exactly on the kink, where the
/// one-sided slopes disagree.
fn jitter_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.data().iter().all(|&v| v == 0.0))
        .map(|(k, _)| k.clone())
        .collect();
    for k in names {
        let shape = store.get(&k).unwrap().shape().to_vec();
        store.insert(k, Tensor::uniform(&shape, -0.1, 0.1, rng));
    }
}

fn pyramid_inputs(rng: &mut ChaCha8Rng, c: usize) -> (Vec<Tensor>, Vec<usize>) {
    (
        vec![
            Tensor::uniform(&[2, 2, c], -1.0, 1.0, rng),
            Tensor::uniform(&[4, 4, c], -1.0, 1.0, rng),
        ],
        vec![8, 4],
    )
}

fn pyramid_of(tape: &Tape, levels: &[Var], ratios: &[usize]) -> Result<FeaturePyramid> {
    FeaturePyramid::new(tape, levels.to_vec(), ratios.to_vec())
}

/// Flattens a pyramid into one vector so every level is projected.
fn flat_pyramid(tape: &mut Tape, pyr: &FeaturePyramid) -> Result<Var> {
    let n: usize = pyr.levels.iter().map(|&v| tape.value(v).len()).sum();
    tape.concat(&pyr.levels, &[n])
}

/// Names accepted by [`check_op`].
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_row",
    "add_col",
    "mul_col",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "abs",
    "recip",
    "wrap_angle",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "sum",
    "mean",
    "sum_rows",
    "reshape",
    "narrow",
    "concat",
    "gather",
    "sparse",
    "resample",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "dsconv",
    "rotated_iou",
    "rotated_roi_align",
    "dsconv_encoder_layer",
    "attention_encoder_layer",
    "decoder",
    "set_loss",
    "finetune_head",
];

/// Runs the named check on the built-in toy instance. `corrupt` perturbs
/// the analytic gradient so the check must fail.
pub fn check_op(name: &str, corrupt: bool) -> Result<GradCheck> {
    check_op_with(name, &ExperimentConfig::gradcheck_preset(), corrupt)
}

/// Like [`check_op`]; the end-to-end checks build their model from `cfg`.
pub fn check_op_with(name: &str, cfg: &ExperimentConfig, corrupt: bool) -> Result<GradCheck> {
    let s = Setting {
        seed: 17,
        mode: Mode::Eval,
        corrupt,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        name.bytes()
            .fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)),
    );
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, -1.0, 1.0, rng);
    macro_rules! run {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            check(name, &$inputs, &|$t: &mut Tape, $v: &[Var]| $body, s)
        };
    }
    match name {
        "add" => run!([u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], |t, v| t
            .add(v[0], v[1])),
        "sub" => run!([u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], |t, v| t
            .sub(v[0], v[1])),
        "mul" => run!([u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], |t, v| t
            .mul(v[0], v[1])),
        "scale" => run!([u(&[5], &mut rng)], |t, v| Ok(t.scale(v[0], -2.5))),
        "add_scalar" => run!([u(&[5], &mut rng)], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        "add_row" => run!([u(&[3, 4], &mut rng), u(&[4], &mut rng)], |t, v| t
            .add_row(v[0], v[1])),
        "add_col" => run!([u(&[3, 4], &mut rng), u(&[3], &mut rng)], |t, v| t
            .add_col(v[0], v[1])),
        "mul_col" => run!([u(&[3, 4], &mut rng), u(&[3], &mut rng)], |t, v| t
            .mul_col(v[0], v[1])),
        "matmul" => run!([u(&[3, 4], &mut rng), u(&[4, 2], &mut rng)], |t, v| t
            .matmul(v[0], v[1])),
        "transpose" => run!([u(&[3, 4], &mut rng)], |t, v| t.transpose(v[0])),
        "relu" => run!([away_from_zero(&[3, 4], &mut rng)], |t, v| Ok(t.relu(v[0]))),
        "sigmoid" => run!([u(&[3, 4], &mut rng)], |t, v| Ok(t.sigmoid(v[0]))),
        "exp" => run!([u(&[3, 4], &mut rng)], |t, v| Ok(t.exp(v[0]))),
        "log" => run!([Tensor::uniform(&[6], 0.2, 2.0, &mut rng)], |t, v| Ok(
            t.log(v[0])
        )),
        "abs" => run!([away_from_zero(&[6], &mut rng)], |t, v| Ok(t.abs(v[0]))),
        "recip" => run!([Tensor::uniform(&[6], 0.2, 2.0, &mut rng)], |t, v| Ok(
            t.recip(v[0])
        )),
        "wrap_angle" => run!(
            [Tensor::uniform(
                &[6],
                -PI / 2.0 + 0.1,
                PI / 2.0 - 0.1,
                &mut rng
            )],
            |t, v| {
                let x = t.scale(v[0], 1.0);
                let shifted = t.add_scalar(x, PI);
                Ok(t.wrap_angle(shifted))
            }
        ),
        "softmax" => run!([u(&[3, 5], &mut rng)], |t, v| Ok(t.softmax(v[0]))),
        "log_softmax" => run!([u(&[3, 5], &mut rng)], |t, v| Ok(t.log_softmax(v[0]))),
        "layer_norm" => run!(
            [u(&[4, 6], &mut rng), u(&[6], &mut rng), u(&[6], &mut rng)],
            |t, v| t.layer_norm(v[0], v[1], v[2])
        ),
        "dropout" => check(
            name,
            &[u(&[4, 6], &mut rng)],
            &|t: &mut Tape, v: &[Var]| t.dropout(v[0], 0.3),
            Setting {
                mode: Mode::Train,
                ..s
            },
        ),
        "sum" => run!([u(&[3, 4], &mut rng)], |t, v| Ok(t.sum(v[0]))),
        "mean" => run!([u(&[3, 4], &mut rng)], |t, v| Ok(t.mean(v[0]))),
        "sum_rows" => run!([u(&[3, 4], &mut rng)], |t, v| Ok(t.sum_rows(v[0]))),
        "reshape" => run!([u(&[3, 4], &mut rng)], |t, v| t.reshape(v[0], &[2, 6])),
        "narrow" => run!([u(&[3, 4], &mut rng)], |t, v| t.narrow(v[0], 3, &[2, 3])),
        "concat" => run!([u(&[2, 3], &mut rng), u(&[1, 3], &mut rng)], |t, v| t
            .concat_rows(&[v[0], v[1]])),
        "gather" => run!([u(&[6], &mut rng)], |t, v| t.gather(v[0], &[5, 0, 2, 2])),
        "sparse" => {
            let map = SparseMap::new(
                4,
                &[3],
                vec![vec![(0, 0.5), (3, -1.0)], vec![], vec![(1, 2.0), (1, 1.0)]],
            );
            run!([u(&[4], &mut rng)], |t, v| t.sparse(v[0], map.clone()))
        }
        "resample" => run!([u(&[3, 5, 2], &mut rng)], |t, v| resample(t, v[0], (4, 7))),
        "conv2d" => run!(
            [u(&[5, 4, 2], &mut rng), u(&[3, 3, 2, 3], &mut rng)],
            |t, v| t.conv2d(v[0], v[1], 2, 1)
        ),
        "depthwise_conv2d" => run!(
            [u(&[5, 4, 3], &mut rng), u(&[3, 3, 3], &mut rng)],
            |t, v| t.depthwise_conv2d(v[0], v[1], 1, 1)
        ),
        "pointwise_conv2d" => run!([u(&[3, 4, 3], &mut rng), u(&[3, 2], &mut rng)], |t, v| t
            .pointwise_conv2d(v[0], v[1])),
        "dsconv" => run!(
            [
                u(&[4, 4, 3], &mut rng),
                u(&[3, 3, 3], &mut rng),
                u(&[3, 4], &mut rng)
            ],
            |t, v| t.dsconv(v[0], v[1], v[2], 1, 1)
        ),
        "rotated_iou" => {
            let mut boxes = Vec::new();
            let mut pairs = Vec::new();
            for q in 0..4 {
                let g = RotatedBox::new(
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.15..0.4),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(-1.2..1.2),
                )?;
                let p = [
                    g.cx + rng.gen_range(-0.05..0.05),
                    g.cy + rng.gen_range(-0.05..0.05),
                    g.w * rng.gen_range(0.8..1.2),
                    g.h * rng.gen_range(0.8..1.2),
                    g.alpha + rng.gen_range(-0.3..0.3),
                ];
                boxes.extend(p);
                pairs.push((q, g));
            }
            run!([Tensor::new(&[4, 5], boxes)?], |t, v| t
                .rotated_iou(v[0], &pairs))
        }
        "rotated_roi_align" => {
            let (levels, ratios) = pyramid_inputs(&mut rng, 3);
            let b = RotatedBox::new(0.45, 0.55, 0.5, 0.3, 0.4)?;
            let rc = RoiAlignConfig {
                out_size: 3,
                canonical_px: 4.0,
            };
            run!(levels, |t, v| {
                let pyr = pyramid_of(t, v, &ratios)?;
                Ok(rotated_roi_align(t, &pyr, &b, &rc)?.patch)
            })
        }
        "dsconv_encoder_layer" => {
            let mut store = ParamStore::new();
            init_dsconv_layer(&mut store, "l", 3, 3, &mut rng);
            let (levels, ratios) = pyramid_inputs(&mut rng, 3);
            check_store(
                name,
                &store,
                &levels,
                &|t, p, v| {
                    let pyr = pyramid_of(t, v, &ratios)?;
                    let out = dsconv_encoder_layer(t, p, "l", &pyr, Some(0.25))?;
                    flat_pyramid(t, &out)
                },
                Setting {
                    mode: Mode::Train,
                    ..s
                },
            )
        }
        "attention_encoder_layer" => {
            let mut store = ParamStore::new();
            init_attention_layer(&mut store, "l", 4, &mut rng);
            store.init_uniform("level_embed", &[2], 0.5, &mut rng);
            let (levels, ratios) = pyramid_inputs(&mut rng, 4);
            check_store(
                name,
                &store,
                &levels,
                &|t, p, v| {
                    let pyr = pyramid_of(t, v, &ratios)?;
                    let out = attention_encoder_layer(t, p, "l", p.get("level_embed"), &pyr, 64)?;
                    flat_pyramid(t, &out.pyramid)
                },
                s,
            )
        }
        "decoder" => {
            let cfg = DecoderConfig {
                num_layers: 2,
                num_queries: 3,
                ffn_dim: 5,
                ..DecoderConfig::default()
            };
            let mut store = ParamStore::new();
            init_decoder_params(&mut store, &cfg, 4, 2, 2, &mut rng);
            jitter_zeros(&mut store, &mut rng);
            let (levels, ratios) = pyramid_inputs(&mut rng, 4);
            check_store(
                name,
                &store,
                &levels,
                &|t, p, v| {
                    let pyr = pyramid_of(t, v, &ratios)?;
                    let out = decode(t, p, &cfg, &pyr, true)?;
                    let parts: Vec<Var> = out
                        .layers
                        .iter()
                        .flat_map(|d| [d.boxes, d.logits])
                        .collect();
                    let n: usize = parts.iter().map(|&x| t.value(x).len()).sum();
                    t.concat(&parts, &[n])
                },
                s,
            )
        }
        "set_loss" => end_to_end(cfg, corrupt),
        "finetune_head" => finetune_check(cfg, corrupt),
        other => Err(Error::Config(format!(
            "unknown gradcheck op {other:?}; known: {}",
            OP_NAMES.join(", ")
        ))),
    }
}

/// Assignments of every supervised layer at the unperturbed parameters.
fn frozen_assignments(
    model: &Model,
    image: &Tensor,
    gts: &GroundTruthSet,
    seed: u64,
) -> Result<Vec<MatchAssignment>> {
    let mut tape = Tape::new(seed, Mode::Train);
    let p = model.params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let out = model.forward(&mut tape, &p, img, model.cfg.loss.aux)?;
    let layers = if model.cfg.loss.aux {
        out.decoder.layers.clone()
    } else {
        vec![out.decoder.last()]
    };
    layers
        .iter()
        .map(|&d| match_detections(&DetectionSet::from_tape(&tape, d)?, gts, &model.cfg.loss))
        .collect()
}

/// The whole detector and set loss on one synthetic scene, in training
/// mode, with matching held fixed at its unperturbed result since the
/// assignment is piecewise constant and not differentiated.
pub fn end_to_end(cfg: &ExperimentConfig, corrupt: bool) -> Result<GradCheck> {
    let model = Model::init(cfg)?;
    let scene = generate_scene(cfg.dataset.base_seed, &cfg.dataset.scene)?;
    let seed = cfg.seed;
    let fixed = frozen_assignments(&model, &scene.image, &scene.gts, seed)?;
    let aux = cfg.loss.aux;
    check_store(
        "set_loss",
        &model.params,
        &[],
        &|t, p, _| {
            let img = t.constant(scene.image.clone());
            let out = model.forward(t, p, img, aux)?;
            let layers = if aux {
                out.decoder.layers.clone()
            } else {
                vec![out.decoder.last()]
            };
            Ok(set_loss(t, &layers, &scene.gts, &cfg.loss, Some(&fixed))?.total)
        },
        Setting {
            seed,
            mode: Mode::Train,
            corrupt,
        },
    )
}

/// The refinement head and its set loss on cached proposals of a fresh
/// trunk, with matching fixed.
pub fn finetune_check(cfg: &ExperimentConfig, corrupt: bool) -> Result<GradCheck> {
    let trunk = FrozenTrunk::new(Model::init(cfg)?);
    let scene = generate_scene(cfg.dataset.base_seed, &cfg.dataset.scene)?;
    let cached = cache_scene(&trunk, &scene.image, &cfg.finetune)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = init_refine_head(
        &cfg.finetune,
        cfg.encoder.channels,
        cfg.num_classes(),
        &mut rng,
    );
    // move off the zero init so every path carries gradient
    let shape = head.get("ft.w_out").unwrap().shape().to_vec();
    head.insert("ft.w_out", Tensor::uniform(&shape, -0.3, 0.3, &mut rng));
    let props = &cached.proposals.detections;
    let fixed = {
        let mut t = Tape::default();
        let p = head.bind(&mut t, false);
        let f = t.constant(cached.features.clone());
        let d = refine_features(&mut t, &p, f, props, &cfg.finetune)?;
        vec![match_detections(
            &DetectionSet::from_tape(&t, d)?,
            &scene.gts,
            &cfg.loss,
        )?]
    };
    let result = check_store(
        "finetune_head",
        &head,
        &[],
        &|t, p, _| {
            let f = t.constant(cached.features.clone());
            let d = refine_features(t, p, f, props, &cfg.finetune)?;
            Ok(set_loss(t, &[d], &scene.gts, &cfg.loss, Some(&fixed))?.total)
        },
        Setting {
            seed: cfg.seed,
            mode: Mode::Train,
            corrupt,
        },
    )?;
    trunk.verify()?;
    Ok(result)
}

/// Runs every check, or only `only` when given.
pub fn run_suite(
    cfg: &ExperimentConfig,
    only: Option<&str>,
    corrupt: bool,
) -> Result<Vec<GradCheck>> {
    match only {
        Some(name) => Ok(vec![check_op_with(name, cfg, corrupt)?]),
        None => OP_NAMES
            .iter()
            .map(|n| check_op_with(n, cfg, corrupt))
            .collect(),
    }
}
