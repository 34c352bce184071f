//! Adam with linear warmup and cosine decay, epoch loop, and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::SyntheticDataset;
use super::model::Model;
use crate::error::{Error, Result};
use crate::retrieval::{dsl, evaluate, Direction, MetricsReport, SimilarityMatrix};
use crate::tensor::{mix, ParamStore, Rng, Tape};

const SHUFFLE_STREAM: u64 = 0x5f1e;

/// Learning rate at `step` (0-based) of `total`: linear warmup over the
/// first `warmup` fraction, then cosine decay to zero.
pub fn learning_rate(step: usize, total: usize, base: f64, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = (step - warm) as f64 / span as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Updates every trainable entry holding a gradient, then clears grads.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, t) in store.iter_mut() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

/// Both retrieval directions, raw and optionally after dual softmax.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub text_to_video: MetricsReport,
    pub video_to_text: MetricsReport,
    pub dsl: Option<(MetricsReport, MetricsReport)>,
}

impl Evaluation {
    /// R@1 of 1.0 in both raw directions.
    pub fn is_perfect(&self) -> bool {
        self.text_to_video.r1() == 1.0 && self.video_to_text.r1() == 1.0
    }
}

pub fn evaluate_model(model: &Model, data: &SyntheticDataset, dsl_temperature: Option<f64>) -> Result<Evaluation> {
    let sim = model.similarity_matrix(data)?;
    let rescored = dsl_temperature
        .map(|t| -> Result<_> {
            let s = SimilarityMatrix::new(dsl(&sim.scores, t)?, sim.gt.clone())?;
            Ok((
                evaluate(&s, Direction::TextToVideo),
                evaluate(&s, Direction::VideoToText),
            ))
        })
        .transpose()?;
    Ok(Evaluation {
        text_to_video: evaluate(&sim, Direction::TextToVideo),
        video_to_text: evaluate(&sim, Direction::VideoToText),
        dsl: rescored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    /// Mean batch loss over the epoch (`None` before training).
    pub loss: Option<f64>,
    pub eval: Evaluation,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Entry 0 is the evaluation before any update.
    pub history: Vec<EpochLog>,
    pub steps: usize,
    /// First step count at which evaluation reached R@1 = 1 both ways.
    pub steps_to_perfect: Option<usize>,
    /// Shuffle generator state after the last step.
    pub rng_state: (u64, u128),
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn nan_report(store: &ParamStore, step: usize, loss: f64) -> Error {
    let worst: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| {
            let max = t.data().iter().fold(
                0.0f64,
                |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY },
            );
            format!("{n}: max|x| = {max:e}")
        })
        .collect();
    Error::Numeric(format!(
        "non-finite loss {loss} at step {step}; trainable state: {}",
        worst.join("; ")
    ))
}

/// Trains the adapters of a fresh model on `data`.
pub fn train(config: &ExperimentConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    let model = Model::new(config.clone())?;
    train_model(model, data)
}

/// Trains `model` in place on `data`, evaluating on `data` after each epoch.
pub fn train_model(mut model: Model, data: &SyntheticDataset) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let mut rng = Rng::new(mix(cfg.seed, SHUFFLE_STREAM));
    let dsl_t = cfg.dsl.then_some(cfg.dsl_temperature);
    let per_epoch = batches(&(0..data.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::default();
    let mut steps = 0;

    let first = evaluate_model(&model, data, dsl_t)?;
    let mut steps_to_perfect = first.is_perfect().then_some(0);
    let mut history = vec![EpochLog {
        epoch: 0,
        steps: 0,
        loss: None,
        eval: first,
    }];

    for epoch in 1..=cfg.epochs {
        if cfg.stop_at_perfect && steps_to_perfect.is_some() {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let plan = batches(&order, cfg.batch_size);
        for idx in &plan {
            let batch = data.subset(idx);
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &batch)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(nan_report(&model.store, steps, value));
            }
            loss_sum += value;
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, learning_rate(steps, total, cfg.lr, cfg.warmup));
            steps += 1;
        }
        let eval = evaluate_model(&model, data, dsl_t)?;
        if steps_to_perfect.is_none() && eval.is_perfect() {
            steps_to_perfect = Some(steps);
        }
        history.push(EpochLog {
            epoch,
            steps,
            loss: Some(loss_sum / plan.len() as f64),
            eval,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        steps,
        steps_to_perfect,
        rng_state: (rng.seed(), rng.word_pos()),
    })
}
