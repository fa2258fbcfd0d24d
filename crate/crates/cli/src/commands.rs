use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use npyz::WriterBuilder;
use odetr_core::checkpoint::Checkpoint;
use odetr_core::config::{EncoderKind, ExperimentConfig};
use odetr_core::encoder::{core_ratio, count_ops};
use odetr_core::finetune::{cache_scene, finetune, refine_cached, FrozenTrunk};
use odetr_core::geometry::{monte_carlo_iou, rotated_iou};
use odetr_core::gradcheck::{run_suite, GRAD_TOL, OP_NAMES};
use odetr_core::metrics::{evaluate_predictions, MetricReport};
use odetr_core::model::Model;
use odetr_core::params::ParamStore;
use odetr_core::synth::{generate_dataset, generate_scene};
use odetr_core::train::{curve_csv, evaluate, train_model};
use odetr_core::RotatedBox;

use crate::ConfigArgs;

const FT_PREFIX: &str = "ft.";

fn resolve_config(args: &ConfigArgs, fallback: &str) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset(fallback)?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(label: &str, r: &MetricReport) {
    let recall = r
        .recall
        .iter()
        .map(|(t, v)| format!("R@{t}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!(
        "{label}: {recall} mAP@{}={:.4} acc={:.4} mIoU={:.4}",
        r.ap_threshold, r.mean_ap, r.class_accuracy, r.mean_matched_iou
    );
}

pub fn gradcheck(
    args: &ConfigArgs,
    op: Option<&str>,
    list: bool,
    out: Option<&Path>,
    corrupt: bool,
) -> Result<ExitCode> {
    if list {
        for name in OP_NAMES {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = resolve_config(args, "gradcheck")?;
    let results = run_suite(&cfg, op, corrupt)?;
    let mut csv = String::from("op,inputs,rel_err,passed\n");
    println!("{:<28} {:>8} {:>12}  status", "op", "inputs", "rel_err");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} {:>8} {:>12.3e}  {status}",
            r.name, r.inputs, r.rel_err
        );
        csv.push_str(&format!(
            "{},{},{:e},{}\n",
            r.name,
            r.inputs,
            r.rel_err,
            r.passed()
        ));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write(dir, "gradcheck.csv", csv)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} checks exceed tolerance {GRAD_TOL:e}",
            results.len()
        );
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} checks within {GRAD_TOL:e}", results.len());
    Ok(ExitCode::SUCCESS)
}

fn parse_box(v: &[f64]) -> Result<RotatedBox> {
    let arr: [f64; 5] = v.try_into().context("a box takes exactly five numbers")?;
    Ok(RotatedBox::from_array(arr)?)
}

pub fn iou(a: &[f64], b: &[f64], monte_carlo: Option<usize>) -> Result<ExitCode> {
    let (a, b) = (parse_box(a)?, parse_box(b)?);
    println!("{}", rotated_iou(&a, &b));
    if let Some(n) = monte_carlo {
        ensure!(n > 0, "--monte-carlo needs at least one sample");
        println!("monte_carlo {}", monte_carlo_iou(&a, &b, n, 0));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn bench(h: u64, w: u64, c: u64, k: u64, json: bool) -> Result<ExitCode> {
    ensure!(
        h > 0 && w > 0 && c > 0 && k > 0,
        "all extents must be positive"
    );
    let att = count_ops(EncoderKind::Attention, h, w, c, k);
    let ds = count_ops(EncoderKind::Dsconv, h, w, c, k);
    let ratio = core_ratio(h, w, c, k);
    if json {
        let v = serde_json::json!({
            "h": h, "w": w, "c": c, "k": k,
            "attention": att,
            "dsconv": ds,
            "core_ratio": ratio,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("H={h} W={w} C={c} K={k} tokens={}", att.tokens);
    println!(
        "{:<10} {:>22} {:>18} {:>22} {:>12}",
        "kind", "core_macs", "projection_macs", "exact_macs", "params"
    );
    for (name, o) in [("attention", att), ("dsconv", ds)] {
        println!(
            "{name:<10} {:>22} {:>18} {:>22} {:>12}",
            o.core_macs, o.projection_macs, o.exact_macs, o.parameters
        );
    }
    println!("core ratio attention/dsconv = {ratio:.3}");
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    args: &ConfigArgs,
    out: &Path,
    steps: Option<usize>,
    thresholds: Option<Vec<f64>>,
    log_every: usize,
) -> Result<ExitCode> {
    let mut cfg = resolve_config(args, "default")?;
    if let Some(s) = steps {
        cfg.optimizer.steps = s;
    }
    if let Some(t) = thresholds {
        cfg.recall_thresholds = t;
    }
    cfg.validate()?;
    create_dir(out)?;
    let scenes = generate_dataset(&cfg.dataset)?;
    let mut model = Model::init(&cfg)?;
    let curve = train_model(&mut model, &scenes, |l| {
        if log_every > 0 && (l.step % log_every == 0 || l.step + 1 == cfg.optimizer.steps) {
            eprintln!(
                "step {:>6} loss {:.6} grad_norm {:.4}",
                l.step, l.loss, l.grad_norm
            );
        }
    })?;
    let report = evaluate(&model, &scenes, &cfg.recall_thresholds)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: model.params.clone(),
    };
    ckpt.save(&out.join("checkpoint.ckpt"))?;
    write(out, "loss_curve.csv", curve_csv(&curve))?;
    write(out, "metrics.csv", report.to_csv())?;
    write(out, "config.json", cfg.to_json())?;
    print_summary("train", &report);
    println!("checksum {}", model.checksum());
    Ok(ExitCode::SUCCESS)
}

fn head_params(params: &ParamStore) -> ParamStore {
    let mut head = ParamStore::new();
    for (k, v) in params.iter().filter(|(k, _)| k.starts_with(FT_PREFIX)) {
        head.insert(k.clone(), v.clone());
    }
    head
}

/// Evaluates the trunk, or the refined detections when the checkpoint
/// carries a fine-tune head.
pub fn eval(
    checkpoint: &Path,
    config: Option<&Path>,
    thresholds: Option<Vec<f64>>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut data_cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    if let Some(t) = thresholds {
        data_cfg.recall_thresholds = t;
    }
    let model = Model::from_params(&ckpt.config, ckpt.params.clone())?;
    let scenes = generate_dataset(&data_cfg.dataset)?;
    let head = head_params(&ckpt.params);
    let report = if head.is_empty() {
        evaluate(&model, &scenes, &data_cfg.recall_thresholds)?
    } else {
        let trunk = FrozenTrunk::new(model);
        let ft = &ckpt.config.finetune;
        let preds = scenes
            .iter()
            .map(|s| refine_cached(&head, &cache_scene(&trunk, &s.image, ft)?, ft))
            .collect::<odetr_core::Result<Vec<_>>>()?;
        let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
        evaluate_predictions(
            &preds,
            &gts,
            &data_cfg.recall_thresholds,
            0.5,
            &ckpt.config.loss,
        )?
    };
    let csv = report.to_csv();
    if let Some(dir) = out {
        create_dir(dir)?;
        write(dir, "metrics.csv", &csv)?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

pub fn finetune_cmd(
    checkpoint: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    thresholds: Option<Vec<f64>>,
) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    if !head_params(&ckpt.params).is_empty() {
        bail!("{} already contains a fine-tune head", checkpoint.display());
    }
    let mut cfg = ckpt.config.clone();
    if let Some(p) = config {
        let other = ExperimentConfig::load(p)?;
        cfg.finetune = other.finetune;
        cfg.seed = other.seed;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = thresholds {
        cfg.recall_thresholds = t;
    }
    cfg.validate()?;
    create_dir(out)?;
    let scenes = generate_dataset(&cfg.dataset)?;
    let trunk = FrozenTrunk::new(Model::from_params(&cfg, ckpt.params)?);
    let before_sum = trunk.checksum().to_string();
    let outcome = finetune(&trunk, &scenes, &cfg.finetune)?;
    trunk.verify()?;

    let mut params = trunk.model().params.clone();
    for (k, v) in outcome.head.iter() {
        params.insert(k.clone(), v.clone());
    }
    Checkpoint {
        config: cfg,
        params,
    }
    .save(&out.join("finetuned.ckpt"))?;
    write(out, "finetune_curve.csv", curve_csv(&outcome.curve))?;
    write(out, "metrics_before.csv", outcome.before.to_csv())?;
    write(out, "metrics_after.csv", outcome.after.to_csv())?;
    print_summary("before", &outcome.before);
    print_summary("after", &outcome.after);
    println!("trunk checksum before {before_sum}");
    println!("trunk checksum after  {}", trunk.model().checksum());
    Ok(ExitCode::SUCCESS)
}

pub fn gen_scenes(
    args: &ConfigArgs,
    out: &Path,
    count: Option<usize>,
    npy: bool,
) -> Result<ExitCode> {
    let mut cfg = resolve_config(args, "default")?;
    if let Some(s) = args.seed {
        cfg.dataset.base_seed = s;
    }
    let n = count.unwrap_or(cfg.dataset.num_scenes);
    create_dir(out)?;
    for i in 0..n {
        let seed = cfg.dataset.base_seed.wrapping_add(i as u64);
        let scene = generate_scene(seed, &cfg.dataset.scene)?;
        let stem = format!("scene_{i:04}");
        write(
            out,
            &format!("{stem}.json"),
            serde_json::to_string_pretty(&scene.record())?,
        )?;
        if npy {
            let path = out.join(format!("{stem}.npy"));
            let file =
                fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
            let shape: Vec<u64> = scene.image.shape().iter().map(|&d| d as u64).collect();
            let mut w = npyz::WriteOptions::<f64>::new()
                .default_dtype()
                .shape(&shape)
                .writer(std::io::BufWriter::new(file))
                .begin_nd()?;
            w.extend(scene.image.data().iter().copied())?;
            w.finish()?;
        }
    }
    println!("wrote {n} scenes to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
