//! Mini-batch training, evaluation and metric output.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::LabeledSequence;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, ModelConfig, SamplePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    Sgd,
    /// Adam with β₁ = `momentum`, β₂ = 0.999, ε = 1e-8
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// cosine decay of the learning rate over all steps
    pub cosine: bool,
    pub seed: u64,
    /// written after every epoch when set
    pub checkpoint: Option<PathBuf>,
    /// stop after the first epoch whose test accuracy reaches this value
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.002,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
            cosine: true,
            seed: 7,
            checkpoint: None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    fn rate(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / total as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.17e},{:.17e}", r.epoch, r.split, r.loss, r.accuracy);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Samples paired with their precomputed geometry.
pub struct PreparedSet<'a> {
    pub samples: &'a [LabeledSequence],
    pub plans: Vec<SamplePlan>,
}

impl<'a> PreparedSet<'a> {
    pub fn new(cfg: &ModelConfig, samples: &'a [LabeledSequence]) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            match s.label {
                Some(l) if l < cfg.classes => {}
                Some(l) => return Err(Error::contract(format!("sample {i} has label {l} ≥ {} classes", cfg.classes))),
                None => return Err(Error::contract(format!("sample {i} is unlabeled"))),
            }
        }
        let plans = samples
            .iter()
            .map(|s| crate::model::plan_sample(cfg, &s.sequence))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet { samples, plans })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].label.expect("checked in new")
    }
}

pub fn evaluate(model: &Model, set: &PreparedSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let k = model.config.classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss = 0.0;
    for i in 0..set.len() {
        let logits = model.logits_planned(&set.plans[i], &set.samples[i].sequence)?;
        let y = set.label(i);
        loss += softmax_nll(&logits, y);
        confusion[y][argmax(&logits)] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / set.len() as f64,
        loss: loss / set.len() as f64,
        confusion,
    })
}

fn softmax_nll(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Progress hook called after every epoch with the rows just produced;
/// returning `false` stops training early.
pub type EpochHook<'h> = dyn FnMut(&Model, &[EpochMetrics]) -> bool + 'h;

/// Trains from a fresh initialisation drawn from `train_cfg.seed`.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &PreparedSet,
    test_set: Option<&PreparedSet>,
    hook: Option<&mut EpochHook>,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    train_from(model, train_cfg, train_set, test_set, hook)
}

pub fn train_from(
    mut model: Model,
    cfg: &TrainConfig,
    train_set: &PreparedSet,
    test_set: Option<&PreparedSet>,
    mut hook: Option<&mut EpochHook>,
) -> Result<(Model, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut second: Vec<Vec<f64>> = if cfg.optimizer == Optimizer::Adam { velocity.clone() } else { Vec::new() };
    let mut metrics = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0bde);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for &i in batch {
                let (loss, logits, grads) = model.loss_and_grads(&train_set.plans[i], &train_set.samples[i].sequence, train_set.label(i))?;
                loss_sum += loss;
                if argmax(&logits) == train_set.label(i) {
                    correct += 1;
                }
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let lr = cfg.rate(step, total_steps);
            let inv = 1.0 / batch.len() as f64;
            match cfg.optimizer {
                Optimizer::SgdMomentum | Optimizer::Sgd => {
                    let mu = if cfg.optimizer == Optimizer::Sgd { 0.0 } else { cfg.momentum };
                    for ((t, v), a) in model.params.tensors_mut().zip(&mut velocity).zip(&acc) {
                        for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(a) {
                            *vi = mu * *vi + gi * inv;
                            *w -= lr * *vi;
                        }
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2): (f64, f64) = (cfg.momentum, 0.999);
                    let n = (step + 1) as i32;
                    let (c1, c2) = (1.0 - b1.powi(n), 1.0 - b2.powi(n));
                    for (((t, m), v), a) in model.params.tensors_mut().zip(&mut velocity).zip(&mut second).zip(&acc) {
                        for (((w, mi), vi), gi) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(a) {
                            let gi = gi * inv;
                            *mi = b1 * *mi + (1.0 - b1) * gi;
                            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
                        }
                    }
                }
            }
            if let Some((i, _)) = model.params.iter().enumerate().find(|(_, (_, t))| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric {
                    index: i,
                    detail: format!("parameter {} became non-finite in epoch {epoch}", model.params.name_at(i)),
                });
            }
            step += 1;
        }
        let start = metrics.len();
        metrics.push(EpochMetrics {
            epoch,
            split: "train",
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
        let mut reached = false;
        if let Some(test) = test_set {
            let r = evaluate(&model, test)?;
            reached = cfg.target_accuracy.is_some_and(|t| r.accuracy >= t);
            metrics.push(EpochMetrics {
                epoch,
                split: "test",
                loss: r.loss,
                accuracy: r.accuracy,
            });
        }
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, &model.config, &model.params)?;
        }
        if let Some(h) = hook.as_deref_mut() {
            if !h(&model, &metrics[start..]) {
                break;
            }
        }
        if reached {
            break;
        }
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [EpochMetrics {
            epoch: 1,
            split: "train",
            loss: 0.5,
            accuracy: 1.0,
        }];
        let s = metrics_csv(&rows);
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[..2], ["1", "train"]);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 0.5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.rate(0, 10), c.learning_rate);
        assert!((c.rate(5, 10) - 0.5 * c.learning_rate).abs() < 1e-15);
        let flat = TrainConfig { cosine: false, ..c.clone() };
        assert_eq!(flat.rate(9, 10), c.learning_rate);
    }

    #[test]
    fn nll_matches_direct_formula() {
        let l = softmax_nll(&[1.0, 2.0, 3.0], 2);
        let direct = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((l - direct).abs() < 1e-14);
    }
}
