//! End-to-end acceptance checks. Each `criterion_*` test prints one
//! `PASS`/`FAIL` line with its measurements (visible with `--nocapture`)
//! and fails the harness when its criterion is not met.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use odetr_core::autodiff::Tape;
use odetr_core::checkpoint::Checkpoint;
use odetr_core::config::{EncoderKind, ExperimentConfig};
use odetr_core::encoder::count_ops;
use odetr_core::finetune::{
    cache_scene, finetune, init_refine_head, refine_cached, FinetuneOutcome, FrozenTrunk,
};
use odetr_core::geometry::{axis_aligned_iou, monte_carlo_iou, rotated_iou, RotatedBox};
use odetr_core::gradcheck::{run_suite, GRAD_TOL, OP_NAMES};
use odetr_core::matching::{brute_force_match, hungarian_match, CostMatrix};
use odetr_core::model::Model;
use odetr_core::synth::{generate_dataset, SyntheticScene};
use odetr_core::train::{curve_csv, train_toy, TrainOutcome};
use odetr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const MC_SAMPLES: usize = 1_000_000;
const MC_PAIRS: usize = 100;
const MC_TOL: f64 = 3e-3;
const AXIS_TOL: f64 = 1e-12;
#[allow(clippy::approx_constant)]
const SQUARE_QUARTER_TURN_IOU: f64 = 0.7071;
const MATCH_CASES: usize = 200;
const MATCH_MAX: usize = 7;
const MATCH_BUDGET: Duration = Duration::from_secs(30);
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_MAX_STEPS: usize = 3000;
const RECALL_THRESHOLDS: [f64; 4] = [0.2, 0.3, 0.4, 0.5];

fn report(n: usize, name: &str, ok: bool, detail: String) {
    println!(
        "acceptance {n} {name}: {} | {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) not met: {detail}");
}

#[test]
fn criterion_1_gradient_suite() {
    let cfg = ExperimentConfig::gradcheck_preset();
    let t0 = Instant::now();
    let results = run_suite(&cfg, None, false).expect("suite runs");
    let elapsed = t0.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .unwrap();
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    // the toy instance the end-to-end check runs on
    let shape_ok = cfg.encoder.num_layers == 2
        && cfg.decoder.num_layers == 1
        && cfg.encoder.channels == 8
        && cfg.decoder.num_queries == 3
        && cfg.pyramid.ratios.len() == 2;
    let covered = results.len() == OP_NAMES.len() && results.iter().any(|r| r.name == "set_loss");
    report(
        1,
        "gradient suite",
        failed.is_empty() && shape_ok && covered && elapsed < GRADIENT_BUDGET,
        format!(
            "{} checks, worst {} at {:.2e} (tol {GRAD_TOL:e}), failed {failed:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.rel_err,
            elapsed.as_secs_f64()
        ),
    );
}

fn random_pair(rng: &mut ChaCha8Rng) -> (RotatedBox, RotatedBox) {
    let draw = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| {
        let w = rng.gen_range(0.5..3.0);
        let h = w * rng.gen_range(0.25..1.0);
        RotatedBox::new(cx, cy, w, h, rng.gen_range(-PI..PI)).unwrap()
    };
    let a = draw(rng, 0.0, 0.0);
    let (dx, dy) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    (a, draw(rng, dx, dy))
}

#[test]
fn criterion_2_geometry_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_mc = 0.0f64;
    for i in 0..MC_PAIRS {
        let (a, b) = random_pair(&mut rng);
        let err = (rotated_iou(&a, &b) - monte_carlo_iou(&a, &b, MC_SAMPLES, i as u64)).abs();
        worst_mc = worst_mc.max(err);
    }
    let mut worst_axis = 0.0f64;
    for _ in 0..1000 {
        let mut aa = || {
            RotatedBox::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                0.0,
            )
            .unwrap()
        };
        let (a, b) = (aa(), aa());
        worst_axis = worst_axis.max((rotated_iou(&a, &b) - axis_aligned_iou(&a, &b)).abs());
    }
    let sq = RotatedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
    let diamond = RotatedBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4).unwrap();
    let quarter = rotated_iou(&sq, &diamond);
    report(
        2,
        "geometry oracle",
        worst_mc <= MC_TOL && worst_axis <= AXIS_TOL && (quarter - SQUARE_QUARTER_TURN_IOU).abs() <= MC_TOL,
        format!(
            "max |iou - mc| {worst_mc:.2e} over {MC_PAIRS} pairs, axis-aligned {worst_axis:.1e}, pi/4 square {quarter:.6} (1/sqrt2 = {FRAC_1_SQRT_2:.6})"
        ),
    );
}

#[test]
fn criterion_3_matching_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut sizes = [[0usize; MATCH_MAX + 1]; MATCH_MAX + 1];
    for _ in 0..MATCH_CASES {
        let (n, m) = (rng.gen_range(1..=MATCH_MAX), rng.gen_range(1..=MATCH_MAX));
        sizes[n][m] += 1;
        let data = (0..n * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cost = CostMatrix::new(n, m, data).unwrap();
        let h = hungarian_match(&cost);
        let b = brute_force_match(&cost).unwrap();
        if h.total(&cost) != b.total(&cost) || h.pairs.len() != n.min(m) {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    let shapes = sizes.iter().flatten().filter(|&&c| c > 0).count();
    report(
        3,
        "matching oracle",
        mismatches == 0 && elapsed < MATCH_BUDGET,
        format!(
            "{mismatches} of {MATCH_CASES} totals differ, {shapes} distinct shapes, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Depthwise then pointwise spelled out with plain loops and zero padding,
/// accumulating in the same order as the kernels.
fn reference_dsconv(x: &Tensor, wd: &Tensor, wp: &Tensor, pad: usize) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = wd.shape()[0];
    let o = wp.shape()[1];
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut depth = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ki in 0..k {
                for kj in 0..k {
                    let (y, xx) = (
                        (i + ki) as isize - pad as isize,
                        (j + kj) as isize - pad as isize,
                    );
                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        depth[(i * ow + j) * c + ch] += x.data()
                            [(y as usize * w + xx as usize) * c + ch]
                            * wd.data()[(ki * k + kj) * c + ch];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; oh * ow * o];
    for p in 0..oh * ow {
        for ch in 0..c {
            for q in 0..o {
                out[p * o + q] += depth[p * c + ch] * wp.data()[ch * o + q];
            }
        }
    }
    out
}

#[test]
fn criterion_4_dsconv_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut composition_ok = true;
    let mut independence_ok = true;
    let mut trials = 0;
    for &(h, w, c, o, k, pad) in &[
        (5, 7, 3, 4, 3, 1),
        (8, 8, 6, 2, 5, 2),
        (4, 6, 2, 5, 3, 0),
        (9, 3, 4, 4, 1, 0),
    ] {
        let x = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let wd = Tensor::uniform(&[k, k, c], -1.0, 1.0, &mut rng);
        let wp = Tensor::uniform(&[c, o], -1.0, 1.0, &mut rng);
        let mut t = Tape::default();
        let (xv, dv, pv) = (
            t.constant(x.clone()),
            t.constant(wd.clone()),
            t.constant(wp.clone()),
        );
        let fused = t.dsconv(xv, dv, pv, 1, pad).unwrap();
        let d = t.depthwise_conv2d(xv, dv, 1, pad).unwrap();
        let two_step = t.pointwise_conv2d(d, pv).unwrap();
        let reference = reference_dsconv(&x, &wd, &wp, pad);
        composition_ok &=
            t.value(fused) == t.value(two_step) && t.value(fused).data() == reference.as_slice();

        // perturb one input channel; only that depthwise channel may move
        let base = t.value(d).clone();
        for _ in 0..10 {
            trials += 1;
            let ch = rng.gen_range(0..c);
            let mut xp = x.clone();
            let idx = (rng.gen_range(0..h) * w + rng.gen_range(0..w)) * c + ch;
            xp.data_mut()[idx] += rng.gen_range(0.5..2.0);
            let mut t2 = Tape::default();
            let (xv2, dv2) = (t2.constant(xp), t2.constant(wd.clone()));
            let d2 = t2.depthwise_conv2d(xv2, dv2, 1, pad).unwrap();
            for (i, (a, b)) in t2.value(d2).data().iter().zip(base.data()).enumerate() {
                if i % c != ch && a != b {
                    independence_ok = false;
                }
            }
        }
    }
    report(
        4,
        "dsconv structure",
        composition_ok && independence_ok,
        format!("bit-exact composition {composition_ok}, channel independence {independence_ok} over {trials} perturbations"),
    );
}

#[test]
fn criterion_5_complexity() {
    let mut checked = 0u64;
    let mut violations = Vec::new();
    for h in 1..=24u64 {
        for w in 1..=24u64 {
            for k in [1u64, 3, 5, 7] {
                if h * w <= k * k + 1 {
                    continue;
                }
                for c in [1u64, 2, 8, 32, 256, 1024] {
                    checked += 1;
                    let a = count_ops(EncoderKind::Attention, h, w, c, k);
                    let d = count_ops(EncoderKind::Dsconv, h, w, c, k);
                    if d.core_macs >= a.core_macs || d.exact_macs >= a.exact_macs {
                        violations.push((h, w, c, k));
                    }
                }
            }
        }
    }
    let mut param_rows = Vec::new();
    let mut params_ok = true;
    for (channels, layers) in [(32, 2), (64, 6), (256, 6)] {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.channels = channels;
        cfg.encoder.num_layers = layers;
        cfg.encoder.kind = EncoderKind::Dsconv;
        let ds = Model::init(&cfg).unwrap().params.count_prefix("enc.");
        cfg.encoder.kind = EncoderKind::Attention;
        let att = Model::init(&cfg).unwrap().params.count_prefix("enc.");
        params_ok &= ds < att;
        param_rows.push(format!("C={channels} L={layers}: {ds} vs {att}"));
    }
    report(
        5,
        "complexity",
        violations.is_empty() && checked > 0 && params_ok,
        format!(
            "{checked} configs with HW > K^2+1, {} violations; encoder params dsconv vs attention [{}]",
            violations.len(),
            param_rows.join("; ")
        ),
    );
}

struct Overfit {
    cfg: ExperimentConfig,
    scenes: Vec<SyntheticScene>,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::overfit_preset();
        let scenes = generate_dataset(&cfg.dataset).unwrap();
        let t0 = Instant::now();
        let outcome = train_toy(&cfg, &scenes, |_| {}).unwrap();
        Overfit {
            cfg,
            scenes,
            outcome,
            elapsed: t0.elapsed(),
        }
    })
}

#[test]
fn criterion_6_overfit_run() {
    let run = overfit();
    let cfg = &run.cfg;
    let setup_ok = cfg.encoder.channels == 32
        && cfg.encoder.num_layers == 2
        && cfg.decoder.num_layers == 2
        && cfg.decoder.num_queries == 20
        && cfg.pyramid.ratios == [16, 8]
        && cfg.num_classes() == 3
        && run.scenes.len() == 8
        && cfg.optimizer.steps <= OVERFIT_MAX_STEPS
        && cfg.recall_thresholds == RECALL_THRESHOLDS;
    let r = &run.outcome.report;
    let recall = r.recall_at(0.5).unwrap_or(f64::NAN);
    let monotone = r.recall.windows(2).all(|p| p[1].1 <= p[0].1);
    let curve: Vec<_> = r
        .recall
        .iter()
        .map(|(t, v)| format!("{t}:{v:.3}"))
        .collect();
    report(
        6,
        "overfit run",
        setup_ok && recall == 1.0 && r.class_accuracy == 1.0 && monotone && run.elapsed <= OVERFIT_BUDGET,
        format!(
            "{} steps, final loss {:.4}, recall@0.5 {recall}, class accuracy {}, recall curve [{}], {:.0}s",
            run.outcome.curve.len(),
            run.outcome.curve.last().map_or(f64::NAN, |l| l.loss),
            r.class_accuracy,
            curve.join(" "),
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_finetune_contract() {
    let run = overfit();
    let trunk = FrozenTrunk::new(run.outcome.model.clone());
    let before = trunk.model().params.checksum();

    let ft = &run.cfg.finetune;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = init_refine_head(
        ft,
        run.cfg.encoder.channels,
        run.cfg.num_classes(),
        &mut rng,
    );
    let identity = run.scenes.iter().all(|s| {
        let c = cache_scene(&trunk, &s.image, ft).unwrap();
        refine_cached(&head, &c, ft).unwrap().boxes == c.proposals.detections.boxes
    });

    let out: FinetuneOutcome = finetune(&trunk, &run.scenes, ft).unwrap();
    let after = trunk.model().params.checksum();
    let (iou0, iou1) = (out.before.mean_matched_iou, out.after.mean_matched_iou);
    report(
        7,
        "fine-tune contract",
        before == after && trunk.verify().is_ok() && identity && iou1 >= iou0,
        format!(
            "checksum unchanged {}, zero-init identity {identity}, mean matched IoU {iou0:.4} -> {iou1:.4} over {} steps",
            before == after,
            out.curve.len()
        ),
    );
}

/// Training, evaluation and fine-tuning artifacts as bytes.
fn artifacts(cfg: &ExperimentConfig) -> Vec<(&'static str, Vec<u8>)> {
    let scenes = generate_dataset(&cfg.dataset).unwrap();
    let out = train_toy(cfg, &scenes, |_| {}).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: out.model.params.clone(),
    };
    let trunk = FrozenTrunk::new(out.model.clone());
    let ft = finetune(&trunk, &scenes, &cfg.finetune).unwrap();
    vec![
        ("loss curve", curve_csv(&out.curve).into_bytes()),
        ("metrics csv", out.report.to_csv().into_bytes()),
        ("checkpoint", ckpt.to_bytes()),
        ("finetune curve", curve_csv(&ft.curve).into_bytes()),
        ("finetune metrics csv", ft.after.to_csv().into_bytes()),
    ]
}

#[test]
fn criterion_8_determinism() {
    // Shortened overfit setup: same model, data and seed, fewer steps.
    let mut cfg = ExperimentConfig::overfit_preset();
    cfg.optimizer.steps = 200;
    cfg.finetune.epochs = 2;
    let a = artifacts(&cfg);
    let b = artifacts(&cfg);
    let differing: Vec<_> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0)
        .collect();
    let sizes: Vec<_> = a.iter().map(|(n, v)| format!("{n} {}B", v.len())).collect();
    report(
        8,
        "determinism",
        differing.is_empty(),
        format!(
            "two runs, differing artifacts {differing:?} ({})",
            sizes.join(", ")
        ),
    );
}
