//! Adam training loop over the synthetic tasks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::{classify, encode, loss_and_grad, EncoderConfig, EncoderParams, Example};
use crate::error::{Error, Result};
use crate::grad::ParamSet;
use crate::tasks::{gen_task, sample, Sample, TaskSpec};
use crate::tensor::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Decay the learning rate linearly to zero over `steps`.
    pub linear_decay: bool,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            linear_decay: true,
            batch: 16,
            steps: 500,
            eval_every: 100,
            eval_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_size == 0 {
            return Err(Error::config("steps, batch and eval_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("Adam needs betas in [0, 1) and epsilon > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Adam moments over a flattened parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(coords: usize) -> Self {
        Adam { m: vec![0.0; coords], v: vec![0.0; coords], t: 0 }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let g = grads.flatten();
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, t| {
            for p in t.data_mut() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
                i += 1;
            }
        });
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, t| sq += t.sum_squares());
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Held-out accuracy, present on evaluation steps.
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub curve: Vec<CurvePoint>,
    pub final_accuracy: f64,
    pub params: EncoderParams,
}

/// Fraction of `data` classified correctly (eval mode).
pub fn accuracy(data: &[Sample], params: &EncoderParams, cfg: &EncoderConfig) -> Result<f64> {
    let mut correct = 0;
    for s in data {
        let enc = encode(&s.tokens, &s.seg, params, cfg)?;
        let logits = classify(&enc, cfg.head, &params.head)?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        correct += usize::from(pred == s.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains from a fresh initialisation. Training batches are drawn from an
/// endless seeded stream; the held-out split is a separate fixed stream.
pub fn train(task: &TaskSpec, model: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    task.validate()?;
    model.validate()?;
    if model.num_classes != task.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes, task needs {}",
            model.num_classes,
            task.num_classes()
        )));
    }
    if task.length > model.max_len || task.vocab > model.vocab_size {
        return Err(Error::config("task length or vocabulary exceeds the model's"));
    }
    let root = SeededRng::new(cfg.seed);
    let mut init_rng = root.fork(1);
    let mut data_rng = SeededRng::new(task.seed).fork(cfg.seed.wrapping_add(1 << 32));
    let mut dropout_rng = root.fork(3);
    let eval = gen_task(task, u64::MAX, cfg.eval_size)?;

    let mut params = EncoderParams::init(model, &mut init_rng)?;
    let mut adam = Adam::new(params.num_coords());
    let mut curve = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let s = sample(task, &mut data_rng)?;
            let ex = Example { tokens: &s.tokens, seg: &s.seg, label: s.label };
            total += loss_and_grad(&ex, &params, model, Some(&mut dropout_rng), &mut grads)?.loss;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grads.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = if cfg.linear_decay {
            cfg.learning_rate * (1.0 - step as f64 / cfg.steps as f64)
        } else {
            cfg.learning_rate
        };
        adam.step(&mut params, &grads, cfg, lr);
        let last = step + 1 == cfg.steps;
        let eval_acc = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(accuracy(&eval, &params, model)?)
        } else {
            None
        };
        curve.push(CurvePoint { step, loss, eval_acc });
    }
    let final_accuracy = curve.last().and_then(|p| p.eval_acc).expect("last step evaluates");
    Ok(TrainResult { curve, final_accuracy, params })
}

/// Writes `step,loss,eval_acc` (empty accuracy on non-evaluation steps).
pub fn write_curve<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Encoder shape used for the synthetic tasks.
pub fn task_model(task: &TaskSpec, d: usize, layers: usize, mixer: crate::mixer::MixerConfig) -> EncoderConfig {
    EncoderConfig {
        mixer,
        ..EncoderConfig::new(task.vocab, task.length, d, layers, task.num_classes())
    }
}
