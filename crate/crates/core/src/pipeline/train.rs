use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::backbone::StubBackbone;
use super::config::PipelineConfig;
use super::model::{forward, loss_and_gradients, prepare, ModelParams, Prepared};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::metrics::{argmax_labels, Evaluator, MetricsReport};
use crate::raster::{InstanceMap, InvalidMask, LabelMap};
use crate::synth::{generate_many, RandomScene, CLASS_NAMES};
use crate::tensor::Tensor;

/// A prepared clip with the ground truth of its current frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub prep: Prepared,
    pub labels: Arc<[u16]>,
    pub gt: LabelMap,
    pub instances: InstanceMap,
    pub mask: InvalidMask,
}

/// Synthetic clips; every frame of a scene is used, the last one labelled.
pub fn synthetic_samples(
    opts: &RandomScene,
    count: usize,
    seed: u64,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<Sample>> {
    let backbone = StubBackbone::new(cfg.channels, cfg.backbone_patch, cfg.seed)?;
    generate_many(opts, count, seed, exec)?
        .into_iter()
        .map(|seq| {
            let prep = prepare(&seq.frames, cfg, &backbone, exec)?;
            let gt = seq.labels.last().expect("scenes have frames").clone();
            Ok(Sample {
                prep,
                labels: gt.data().into(),
                gt,
                instances: seq.instances.last().expect("scenes have frames").clone(),
                mask: seq.masks.last().expect("scenes have frames").clone(),
            })
        })
        .collect()
}

/// Mean loss and mean gradients over every sample.
fn batch_gradients(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    let per_sample = exec.map(samples.len(), |i| {
        loss_and_gradients(params, &samples[i].prep, samples[i].labels.clone(), cfg)
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Vec<f64>>> = None;
    // summed in sample order so both execution modes agree bit for bit
    for r in per_sample {
        let (loss, grads) = r?;
        total += loss;
        let acc = sum.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g as f64);
        }
    }
    let n = samples.len() as f64;
    let like = params.visit();
    let grads = sum
        .unwrap_or_default()
        .into_iter()
        .zip(like)
        .map(|(g, (_, t))| Tensor::new(t.shape(), g.into_iter().map(|v| (v / n) as f32).collect()))
        .collect::<Result<_>>()?;
    Ok((total / n, grads))
}

/// Full-batch gradient descent. Returns the trained parameters and the
/// mean loss before every step plus the final loss (`steps + 1` entries).
pub fn train_toy(
    samples: &[Sample],
    cfg: &PipelineConfig,
    mut params: ModelParams,
    steps: usize,
    lr: f64,
    exec: Exec,
) -> Result<(ModelParams, Vec<f64>)> {
    if steps == 0 {
        return invalid("training needs at least one step");
    }
    if samples.is_empty() {
        return invalid("training needs at least one sample");
    }
    if !lr.is_finite() || lr < 0.0 {
        return invalid(format!("learning rate {lr}"));
    }
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = batch_gradients(&params, samples, cfg, exec)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step} (loss {loss})"
            )));
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        for ((_, p), g) in params.visit_mut().into_iter().zip(&grads) {
            p.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(p, &g)| *p = (*p as f64 - lr * g as f64) as f32);
        }
    }
    Ok((params, losses))
}

/// Running minimum of a loss curve.
pub fn smooth(losses: &[f64]) -> Vec<f64> {
    losses
        .iter()
        .scan(f64::INFINITY, |m, &l| {
            *m = m.min(l);
            Some(*m)
        })
        .collect()
}

/// Metrics of the fused predictions over `samples`.
pub fn evaluate(params: &ModelParams, samples: &[Sample], cfg: &PipelineConfig, exec: Exec) -> Result<Evaluator> {
    let mut ev = Evaluator::new(cfg.classes);
    for s in samples {
        let out = forward(params, &s.prep, cfg, exec)?;
        let pred = argmax_labels(&out.fused_logits)?;
        ev.add(&pred, &s.gt, Some(&s.instances), Some(&s.mask))?;
    }
    Ok(ev)
}

/// Synthetic training run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seeds scene generation.
    pub seed: u64,
    pub scenes: usize,
    pub held_out: usize,
    pub scene: RandomScene,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 8.0,
            seed: 7,
            scenes: 3,
            held_out: 2,
            scene: RandomScene {
                frames: 3,
                ..RandomScene::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `1 − final/initial`.
    pub reduction: f64,
    pub held_out: MetricsReport,
}

/// Trains on seeded synthetic scenes and evaluates on a disjoint seeded set.
pub fn train_synthetic(cfg: &PipelineConfig, tcfg: &TrainConfig, exec: Exec) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if cfg.classes != CLASS_NAMES.len() {
        return invalid(format!("synthetic scenes have {} classes", CLASS_NAMES.len()));
    }
    let train = synthetic_samples(&tcfg.scene, tcfg.scenes, tcfg.seed, cfg, exec)?;
    // held-out scenes come from a separate seed stream
    let test = synthetic_samples(&tcfg.scene, tcfg.held_out, !tcfg.seed, cfg, exec)?;
    let (params, losses) = train_toy(&train, cfg, ModelParams::seeded(cfg)?, tcfg.steps, tcfg.lr, exec)?;
    let held_out = evaluate(&params, &test, cfg, exec)?.report(&CLASS_NAMES);
    let (initial, last) = (losses[0], *losses.last().expect("non-empty curve"));
    let report = TrainReport {
        steps: tcfg.steps,
        lr: tcfg.lr,
        smoothed: smooth(&losses),
        initial_loss: initial,
        final_loss: last,
        reduction: 1.0 - last / initial,
        losses,
        held_out,
    };
    Ok((params, report))
}
