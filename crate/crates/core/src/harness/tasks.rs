//! Synthetic sequence tasks.

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Token sequence plus the positions that hold answers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TaskSample {
    /// Next-token inputs, targets and weights: position `i` of the inputs
    /// predicts token `i + 1`, scored when that token is an answer.
    pub fn shifted(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let n = self.tokens.len();
        (self.tokens[..n - 1].to_vec(), self.tokens[1..].to_vec(), self.loss_mask[1..].to_vec())
    }
}

/// Multi-query associative recall. Keys are tokens `[0, vocab/2)`, values
/// `[vocab/2, vocab)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqarConfig {
    pub vocab: usize,
    pub n_pairs: usize,
    pub n_queries: usize,
    pub seq_len: usize,
}

impl Default for MqarConfig {
    fn default() -> Self {
        MqarConfig {
            vocab: 64,
            n_pairs: 8,
            n_queries: 4,
            seq_len: 64,
        }
    }
}

impl MqarConfig {
    pub fn n_keys(&self) -> usize {
        self.vocab / 2
    }

    pub fn value_range(&self) -> std::ops::Range<usize> {
        self.n_keys()..self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("task.mqar.vocab", "need at least one key and one value"));
        }
        if self.n_pairs == 0 || self.n_pairs > self.n_keys() || self.n_pairs > self.vocab - self.n_keys() {
            return Err(Error::config("task.mqar.n_pairs", format!("must be in 1..={}", self.n_keys().min(self.vocab - self.n_keys()))));
        }
        if self.n_queries == 0 || self.n_queries > self.n_pairs {
            return Err(Error::config("task.mqar.n_queries", "must be in 1..=n_pairs"));
        }
        if self.seq_len < 2 * self.n_pairs + 2 * self.n_queries {
            return Err(Error::config(
                "task.mqar.seq_len",
                format!("{} < 2 * n_pairs + 2 * n_queries", self.seq_len),
            ));
        }
        Ok(())
    }
}

/// `k1 v1 k2 v2 ... kn vn` then the remainder split into two-token slots,
/// `n_queries` of them holding a queried key and its bound value, the rest
/// holding filler drawn from unbound keys. Answers are the queried values.
pub fn mqar_generate(cfg: &MqarConfig, rng: &mut StreamRng) -> Result<TaskSample> {
    cfg.validate()?;
    let nk = cfg.n_keys();
    let keys = sample(rng, nk, cfg.n_pairs).into_vec();
    let values: Vec<usize> = sample(rng, cfg.vocab - nk, cfg.n_pairs).into_iter().map(|v| v + nk).collect();
    let bound: std::collections::HashSet<usize> = keys.iter().copied().collect();
    let unbound: Vec<usize> = (0..nk).filter(|k| !bound.contains(k)).collect();

    let mut tokens = Vec::with_capacity(cfg.seq_len);
    for (k, v) in keys.iter().zip(&values) {
        tokens.extend([*k, *v]);
    }
    let mut loss_mask = vec![false; tokens.len()];

    let rest = cfg.seq_len - tokens.len();
    let slots = rest / 2;
    let mut query_slots = sample(rng, slots, cfg.n_queries).into_vec();
    query_slots.sort_unstable();
    let queried = sample(rng, cfg.n_pairs, cfg.n_queries).into_vec();
    let filler = |rng: &mut StreamRng| -> usize {
        match unbound.choose(rng) {
            Some(&k) => k,
            None => rng.gen_range(nk..cfg.vocab),
        }
    };
    let mut q = 0;
    for s in 0..slots {
        if q < query_slots.len() && query_slots[q] == s {
            let pair = queried[q];
            tokens.extend([keys[pair], values[pair]]);
            loss_mask.extend([false, true]);
            q += 1;
        } else {
            let (a, b) = (filler(rng), filler(rng));
            tokens.extend([a, b]);
            loss_mask.extend([false, false]);
        }
    }
    if tokens.len() < cfg.seq_len {
        tokens.push(filler(rng));
        loss_mask.push(false);
    }
    Ok(TaskSample { tokens, loss_mask })
}

/// Selective copy: `n_copy` data tokens scattered among blanks, a
/// delimiter, then the data tokens again in order. Token 0 is blank, 1 is
/// the delimiter, data tokens are `[2, vocab)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveCopyConfig {
    pub vocab: usize,
    pub n_copy: usize,
    pub seq_len: usize,
}

impl Default for SelectiveCopyConfig {
    fn default() -> Self {
        SelectiveCopyConfig {
            vocab: 16,
            n_copy: 4,
            seq_len: 32,
        }
    }
}

pub const BLANK: usize = 0;
pub const DELIMITER: usize = 1;

pub fn selective_copy_generate(cfg: &SelectiveCopyConfig, rng: &mut StreamRng) -> Result<TaskSample> {
    if cfg.vocab < 3 {
        return Err(Error::config("task.selective_copy.vocab", "must be >= 3"));
    }
    if cfg.n_copy == 0 || cfg.seq_len < 2 * cfg.n_copy + 1 {
        return Err(Error::config("task.selective_copy.seq_len", "must be >= 2 * n_copy + 1"));
    }
    let region = cfg.seq_len - cfg.n_copy - 1;
    let mut pos = sample(rng, region, cfg.n_copy).into_vec();
    pos.sort_unstable();
    let data: Vec<usize> = (0..cfg.n_copy).map(|_| rng.gen_range(2..cfg.vocab)).collect();
    let mut tokens = vec![BLANK; region];
    for (p, d) in pos.iter().zip(&data) {
        tokens[*p] = *d;
    }
    tokens.push(DELIMITER);
    tokens.extend(&data);
    let mut loss_mask = vec![false; region + 1];
    loss_mask.extend(std::iter::repeat(true).take(cfg.n_copy));
    Ok(TaskSample { tokens, loss_mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TaskConfig {
    Mqar(MqarConfig),
    SelectiveCopy(SelectiveCopyConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Mqar(MqarConfig::default())
    }
}

impl TaskConfig {
    pub fn generate(&self, rng: &mut StreamRng) -> Result<TaskSample> {
        match self {
            TaskConfig::Mqar(c) => mqar_generate(c, rng),
            TaskConfig::SelectiveCopy(c) => selective_copy_generate(c, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            TaskConfig::Mqar(c) => c.vocab,
            TaskConfig::SelectiveCopy(c) => c.vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskConfig::Mqar(c) => c.seq_len,
            TaskConfig::SelectiveCopy(c) => c.seq_len,
        }
    }
}

/// A batch flattened row-major for the model: inputs `[batch, seq_len - 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

pub fn make_batch(task: &TaskConfig, batch: usize, rng: &mut StreamRng) -> Result<Batch> {
    let mut out = Batch {
        inputs: Vec::new(),
        targets: Vec::new(),
        weights: Vec::new(),
        batch,
        len: task.seq_len() - 1,
    };
    for _ in 0..batch {
        let (i, t, w) = task.generate(rng)?.shifted();
        out.inputs.extend(i);
        out.targets.extend(t);
        out.weights.extend(w);
    }
    Ok(out)
}
