//! Full-batch training of the detector on a fixed scene set.

use indexmap::IndexMap;

use crate::autodiff::{Mode, Tape, Var};
use crate::config::{ExperimentConfig, OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::matching::set_loss;
use crate::metrics::{evaluate_predictions, MetricReport};
use crate::model::Model;
use crate::params::ParamStore;
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;
/// Odd multiplier spreading per-step dropout seeds apart.
const STEP_SEED_MUL: u64 = 0x9E37_79B9_7F4A_7C15;

/// Dropout seed of the tape built at `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add((step as u64).wrapping_mul(STEP_SEED_MUL))
}

/// Stateful first-order optimizer over named parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient and
    /// returns the global gradient norm before clipping.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.momentum, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Parameter(format!("gradient for unknown parameter {name}"))
            })?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            match self.cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, m), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *m = b1 * *m + g * clip;
                        *w -= self.cfg.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((w, m), v), &g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        let g = g * clip;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= self.cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<StepLog>,
    pub report: MetricReport,
}

/// Mean set loss over `scenes` on a fresh tape seeded for `step`, returned
/// with the tape and the parameter handles. Non-finite predictions abort
/// before matching, since no assignment is defined for them.
pub fn batch_loss(
    model: &Model,
    scenes: &[SyntheticScene],
    step: usize,
    mode: Mode,
) -> Result<(Tape, IndexMap<String, Var>, Var)> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut tape = Tape::new(step_seed(model.cfg.seed, step), mode);
    let p = model.params.bind(&mut tape, true);
    let aux = model.cfg.loss.aux;
    let mut total: Option<Var> = None;
    for s in scenes {
        let img = tape.constant(s.image.clone());
        let out = model.forward(&mut tape, &p, img, aux)?;
        let layers = if aux {
            out.decoder.layers.clone()
        } else {
            vec![out.decoder.last()]
        };
        if let Some(bad) = layers
            .iter()
            .flat_map(|d| [d.boxes, d.logits])
            .flat_map(|v| tape.value(v).data().iter().copied())
            .find(|v| !v.is_finite())
        {
            return Err(Error::Divergence { step, loss: bad });
        }
        let l = set_loss(&mut tape, &layers, &s.gts, &model.cfg.loss, None)?.total;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / scenes.len() as f64);
    let vars = p.iter().map(|(k, &v)| (k.clone(), v)).collect();
    Ok((tape, vars, loss))
}

/// Trains `model` in place for `cfg.optimizer.steps` full-batch steps.
/// `on_step` sees every logged step as it happens.
pub fn train_model(
    model: &mut Model,
    scenes: &[SyntheticScene],
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let ocfg = model.cfg.optimizer.clone();
    let mut opt = Optimizer::new(&ocfg);
    let mut curve = Vec::with_capacity(ocfg.steps);
    for step in 0..ocfg.steps {
        let (tape, vars, loss) = batch_loss(model, scenes, step, Mode::Train)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let g = tape.backward(loss)?;
        let grads: IndexMap<String, Tensor> = vars
            .iter()
            .filter_map(|(k, &v)| g.get(v).map(|t| (k.clone(), t.clone())))
            .collect();
        let grad_norm = opt.step(&mut model.params, &grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: grad_norm,
            });
        }
        let log = StepLog {
            step,
            loss: value,
            grad_norm,
        };
        on_step(&log);
        curve.push(log);
    }
    Ok(curve)
}

/// Eval-mode metrics of `model` on `scenes`.
pub fn evaluate(
    model: &Model,
    scenes: &[SyntheticScene],
    thresholds: &[f64],
) -> Result<MetricReport> {
    let preds = scenes
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    evaluate_predictions(&preds, &gts, thresholds, 0.5, &model.cfg.loss)
}

/// Fresh model from `cfg`, trained on `scenes`, then evaluated on them.
pub fn train_toy(
    cfg: &ExperimentConfig,
    scenes: &[SyntheticScene],
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let mut model = Model::init(cfg)?;
    let curve = train_model(&mut model, scenes, on_step)?;
    let report = evaluate(&model, scenes, &cfg.recall_thresholds)?;
    Ok(TrainOutcome {
        model,
        curve,
        report,
    })
}

/// `step,loss,grad_norm` rows.
pub fn curve_csv(curve: &[StepLog]) -> String {
    let mut s = String::from("step,loss,grad_norm\n");
    for l in curve {
        s.push_str(&format!("{},{},{}\n", l.step, l.loss, l.grad_norm));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn toy() -> (ExperimentConfig, Vec<SyntheticScene>) {
        let mut cfg = ExperimentConfig::gradcheck_preset();
        cfg.optimizer = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-2,
            steps: 6,
            clip_norm: 1.0,
            ..OptimizerConfig::default()
        };
        let scenes = generate_dataset(&cfg.dataset).unwrap();
        (cfg, scenes)
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.5,
            ..OptimizerConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let g: IndexMap<_, _> =
            [("w".to_string(), Tensor::new(&[2], vec![2.0, 0.0]).unwrap())].into();
        let mut opt = Optimizer::new(&cfg);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // m1 = 2, m2 = 3 → w = 1 − 0.1·(2 + 3)
        assert!((p.get("w").unwrap().data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(p.get("w").unwrap().data()[1], -1.0);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            ..OptimizerConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[3]));
        let g: IndexMap<_, _> = [(
            "w".to_string(),
            Tensor::new(&[3], vec![5.0, -0.2, 0.0]).unwrap(),
        )]
        .into();
        Optimizer::new(&cfg).step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9 && w[2] == 0.0);
    }

    #[test]
    fn clipping_rescales_gradient() {
        let cfg = OptimizerConfig {
            lr: 1.0,
            momentum: 0.0,
            clip_norm: 1.0,
            ..OptimizerConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2]));
        let g: IndexMap<_, _> =
            [("w".to_string(), Tensor::new(&[2], vec![3.0, 4.0]).unwrap())].into();
        let norm = Optimizer::new(&cfg).step(&mut p, &g).unwrap();
        assert_eq!(norm, 5.0);
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_keep_initial_weights() {
        let (mut cfg, scenes) = toy();
        cfg.optimizer.steps = 0;
        let out = train_toy(&cfg, &scenes, |_| {}).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.model.checksum(), Model::init(&cfg).unwrap().checksum());
        let r = &out.report;
        assert!(r.recall.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_finite_decreasing_and_reproducible() {
        let (cfg, scenes) = toy();
        let a = train_toy(&cfg, &scenes, |_| {}).unwrap();
        let b = train_toy(&cfg, &scenes, |_| {}).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert!(a.curve.iter().all(|l| l.loss.is_finite()));
        assert!(a.curve.last().unwrap().loss < a.curve[0].loss);
    }

    #[test]
    fn nan_input_is_divergence() {
        let (cfg, mut scenes) = toy();
        scenes[0].image.data_mut()[0] = f64::NAN;
        let mut m = Model::init(&cfg).unwrap();
        assert!(matches!(
            train_model(&mut m, &scenes, |_| {}),
            Err(Error::Divergence { step: 0, .. })
        ));
    }
}
