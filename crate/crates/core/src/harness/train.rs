//! Training loop, evaluation and the metrics stream.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cdmmoe::ExpertUsage;
use crate::error::{Error, Result};
use crate::harness::optim::{AdamW, AdamWConfig, Schedule};
use crate::harness::tasks::{make_batch, Batch, TaskConfig};
use crate::model::Model;
use crate::real::Real;
use crate::rng::{self, StreamRng};

pub const METRICS_HEADER: &str = "step,lr,loss,acc,tok_per_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub task: TaskConfig,
    /// Evaluate on the held-out set every this many steps; `0` only at the end.
    pub eval_every: u64,
    pub eval_batches: usize,
    /// Stop once held-out masked accuracy reaches this value.
    pub target_acc: Option<f64>,
    /// Write measured tokens/sec; when false the column is `0` so metric
    /// files are byte-for-byte reproducible.
    pub record_throughput: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            schedule: Schedule::default(),
            optimizer: AdamWConfig::default(),
            task: TaskConfig::default(),
            eval_every: 100,
            eval_batches: 4,
            target_acc: None,
            record_throughput: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.eval_batches == 0 {
            return Err(Error::config("train.eval_batches", "must be >= 1"));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
    pub tok_per_s: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.loss, self.acc, self.tok_per_s)
    }
}

/// `(correct, scored)` over weighted rows, argmax over the full vocabulary
/// with ties going to the lowest id.
pub fn masked_accuracy<T: Real>(logits: &[T], vocab: usize, targets: &[usize], weights: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut scored = 0;
    for (r, row) in logits.chunks(vocab).enumerate() {
        if !weights[r] {
            continue;
        }
        scored += 1;
        if argmax(row) == targets[r] {
            correct += 1;
        }
    }
    (correct, scored)
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub acc: f64,
    pub loss: f64,
    pub usage: Vec<ExpertUsage>,
}

/// Held-out batches drawn from the `task.eval` stream.
pub fn eval_set(task: &TaskConfig, seed: u64, batches: usize, batch_size: usize) -> Result<Vec<Batch>> {
    let mut r = rng::stream(seed, "task.eval");
    (0..batches).map(|_| make_batch(task, batch_size, &mut r)).collect()
}

pub fn evaluate<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<EvalResult> {
    let vocab = model.config.vocab_size;
    let (mut correct, mut scored) = (0, 0);
    let mut loss_sum = 0.0;
    let mut usage = Vec::new();
    for b in batches {
        let logits = model.logits_with_usage(&b.inputs, b.batch, b.len, &mut usage)?;
        let (c, s) = masked_accuracy(logits.data(), vocab, &b.targets, &b.weights);
        correct += c;
        scored += s;
        let mut g = crate::graph::Graph::new();
        let lv = g.constant(logits);
        let w: Vec<T> = b.weights.iter().map(|&w| if w { T::ONE } else { T::ZERO }).collect();
        let l = g.cross_entropy(lv, &b.targets, &w)?;
        loss_sum += g.value(l)[0].to_f64() * s as f64;
    }
    if scored == 0 {
        return Err(Error::Contract("evaluation set has no scored positions".into()));
    }
    Ok(EvalResult {
        acc: correct as f64 / scored as f64,
        loss: loss_sum / scored as f64,
        usage,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: f64,
    pub final_eval_acc: f64,
    /// `(step, held-out accuracy)` at every evaluation.
    pub evals: Vec<(u64, f64)>,
    pub usage: Vec<ExpertUsage>,
}

pub struct Trainer<'m, T: Real> {
    pub model: &'m mut Model<T>,
    pub config: TrainConfig,
    pub opt: AdamW<T>,
    pub step: u64,
    data: StreamRng,
    eval: Vec<Batch>,
}

impl<'m, T: Real> Trainer<'m, T> {
    pub fn new(model: &'m mut Model<T>, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.task.vocab() > model.config.vocab_size {
            return Err(Error::config("model.vocab_size", format!("task needs {} tokens", config.task.vocab())));
        }
        let eval = eval_set(&config.task, seed, config.eval_batches, config.batch_size)?;
        Ok(Trainer {
            opt: AdamW::new(config.optimizer.clone(), &model.params),
            model,
            config: config.clone(),
            step: 0,
            data: rng::stream(seed, "task.train"),
            eval,
        })
    }

    pub fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }

    /// One forward/backward/update on a fresh batch. Parameters are left
    /// untouched when the loss or any gradient is non-finite.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let batch = make_batch(&self.config.task, self.config.batch_size, &mut self.data)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &Batch) -> Result<MetricsRow> {
        let start = Instant::now();
        let lr = self.config.schedule.lr_at(self.step)?;
        let vocab = self.model.config.vocab_size;
        let weights: Vec<T> = batch.weights.iter().map(|&w| if w { T::ONE } else { T::ZERO }).collect();
        let (loss, acc, grads) = {
            let mut g = self.model.params.bind();
            let logits = self.model.forward(&mut g, &batch.inputs, batch.batch, batch.len)?;
            let (c, s) = masked_accuracy(g.value(logits), vocab, &batch.targets, &batch.weights);
            let loss = g.cross_entropy(logits, &batch.targets, &weights)?;
            let lv = g.value(loss)[0].to_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    step: self.step,
                });
            }
            (lv, c as f64 / s.max(1) as f64, g.backward(loss)?)
        };
        self.model.params.absorb(grads);
        self.opt.step(&mut self.model.params, lr)?;
        self.model.params.zero_grads();
        let secs = start.elapsed().as_secs_f64();
        let tok_per_s = if self.config.record_throughput {
            (batch.batch * batch.len) as f64 / secs
        } else {
            0.0
        };
        let row = MetricsRow {
            step: self.step,
            lr,
            loss,
            acc,
            tok_per_s,
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs until `total_steps` or the accuracy target, handing each row to
    /// `on_row`.
    pub fn run(&mut self, on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainReport> {
        self.run_until(None, on_row)
    }

    /// Like [`Trainer::run`] but stops taking steps once `deadline` passes;
    /// the final evaluation still runs.
    pub fn run_until(&mut self, deadline: Option<Instant>, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainReport> {
        let total = self.config.schedule.total_steps;
        let mut last_loss = f64::NAN;
        let mut evals = Vec::new();
        while self.step < total && deadline.map_or(true, |d| Instant::now() < d) {
            let row = self.train_step()?;
            last_loss = row.loss;
            on_row(&row)?;
            let every = self.config.eval_every;
            if every > 0 && self.step % every == 0 && self.step < total {
                let acc = evaluate(self.model, &self.eval)?.acc;
                evals.push((self.step, acc));
                if self.config.target_acc.is_some_and(|t| acc >= t) {
                    break;
                }
            }
        }
        let fin = evaluate(self.model, &self.eval)?;
        if evals.last().map(|e| e.0) != Some(self.step) {
            evals.push((self.step, fin.acc));
        }
        Ok(TrainReport {
            steps_run: self.step,
            final_loss: last_loss,
            final_eval_acc: fin.acc,
            evals,
            usage: fin.usage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_line_format() {
        let r = MetricsRow {
            step: 3,
            lr: 2e-4,
            loss: 1.5,
            acc: 0.25,
            tok_per_s: 0.0,
        };
        assert_eq!(r.csv_line(), "3,0.0002,1.5,0.25,0");
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
