//! Sequence-length throughput benchmark for the three mixer kinds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, AttnLayer, ValueMode};
use crate::cdmmoe::MoeConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::rope::{RopeTable, DEFAULT_BASE};
use crate::ssd::{PositionalMode, SsdConfig, SsdLayer};
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "kind,seq_len,fwd_ms,fwdbwd_ms,tok_per_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    SsdChunked,
    Attention,
    CheemsBlock,
}

impl BenchKind {
    pub const ALL: [BenchKind; 3] = [BenchKind::SsdChunked, BenchKind::Attention, BenchKind::CheemsBlock];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::SsdChunked => "ssd_chunked",
            BenchKind::Attention => "attention",
            BenchKind::CheemsBlock => "cheems_block",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub kinds: Vec<BenchKind>,
    pub repeats: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub chunk_len: usize,
    pub moe: MoeConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![512, 1024, 2048, 4096],
            kinds: BenchKind::ALL.to_vec(),
            repeats: 5,
            d_model: 64,
            n_heads: 1,
            head_dim: 64,
            d_state: 64,
            chunk_len: 64,
            moe: MoeConfig {
                d_model: 64,
                d_shared: 64,
                d_private: 32,
                n_experts: 1024,
                top_k: 8,
                d_query: 32,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub seq_len: usize,
    pub fwd_ms: f64,
    pub fwdbwd_ms: f64,
    pub tok_per_s: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:.4},{:.4},{:.2}", self.kind.name(), self.seq_len, self.fwd_ms, self.fwdbwd_ms, self.tok_per_s)
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

enum Subject {
    Ssd(SsdLayer, ParamStore<f32>, RopeTable),
    Attn(AttnLayer, ParamStore<f32>, RopeTable),
    Block(Box<Model<f32>>),
}

impl Subject {
    fn build(kind: BenchKind, cfg: &BenchConfig, max_len: usize) -> Result<Subject> {
        let ssd_cfg = SsdConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            d_state: cfg.d_state,
            chunk_len: cfg.chunk_len,
            conv_width: 4,
        };
        let attn_cfg = AttnConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            value_mode: ValueMode::Linear,
            inner_mode: PositionalMode::GateOnly,
        };
        let mut r = rng::stream(cfg.seed, &format!("bench.{}", kind.name()));
        Ok(match kind {
            BenchKind::SsdChunked => {
                let mut store = ParamStore::new();
                let layer = SsdLayer::init(&mut store, "ssd", &ssd_cfg, PositionalMode::Rope, &mut r, 0.02)?;
                Subject::Ssd(layer, store, RopeTable::new(DEFAULT_BASE, cfg.d_state, max_len)?)
            }
            BenchKind::Attention => {
                let mut store = ParamStore::new();
                let layer = AttnLayer::init(&mut store, "attn", &attn_cfg, &ssd_cfg, &mut r, 0.02)?;
                Subject::Attn(layer, store, RopeTable::new(DEFAULT_BASE, cfg.head_dim, max_len)?)
            }
            BenchKind::CheemsBlock => {
                let mc = ModelConfig {
                    vocab_size: 64,
                    d_model: cfg.d_model,
                    n_cheems_blocks: 1,
                    ssd: ssd_cfg,
                    attn: AttnConfig {
                        value_mode: ValueMode::InnerSsd,
                        ..attn_cfg
                    },
                    moe: MoeConfig {
                        d_model: cfg.d_model,
                        ..cfg.moe.clone()
                    },
                    max_positions: max_len,
                    seed: cfg.seed,
                    ..ModelConfig::default()
                };
                Subject::Block(Box::new(Model::build(&mc)?))
            }
        })
    }

    fn params(&self) -> &ParamStore<f32> {
        match self {
            Subject::Ssd(_, s, _) | Subject::Attn(_, s, _) => s,
            Subject::Block(m) => &m.params,
        }
    }

    fn forward<'a>(&self, g: &mut Graph<'a, f32>, x: &'a Tensor<f32>, tokens: &[usize]) -> Result<Var> {
        match self {
            Subject::Ssd(l, _, rope) => {
                let xv = g.input(x);
                l.forward(g, xv, rope)
            }
            Subject::Attn(l, _, rope) => {
                let xv = g.input(x);
                l.forward(g, xv, rope)
            }
            Subject::Block(m) => m.forward(g, tokens, 1, tokens.len()),
        }
    }

    fn time(&self, x: &Tensor<f32>, tokens: &[usize], backward: bool) -> Result<f64> {
        let start = Instant::now();
        let mut g = self.params().bind();
        let y = self.forward(&mut g, x, tokens)?;
        if backward {
            let s = g.sum(y);
            let grads = g.backward(s)?;
            std::hint::black_box(&grads);
        }
        std::hint::black_box(g.value(y));
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}

/// Median-of-`repeats` forward and forward+backward wall time per
/// `(kind, seq_len)`, batch 1, on the calling thread.
pub fn bench_throughput(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.seq_lens.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("bench.seq_lens", "must be sorted ascending"));
    }
    if cfg.repeats == 0 || cfg.seq_lens.is_empty() {
        return Err(Error::config("bench.repeats", "need at least one length and one repeat"));
    }
    let max_len = *cfg.seq_lens.last().unwrap_or(&1);
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let subject = Subject::build(kind, cfg, max_len)?;
        let mut r = rng::stream(cfg.seed, "bench.inputs");
        for &l in &cfg.seq_lens {
            let x: Tensor<f32> = rng::normal(&mut r, &[1, l, cfg.d_model], 1.0);
            let tokens: Vec<usize> = (0..l).map(|i| (i * 7 + 3) % 64).collect();
            subject.time(&x, &tokens, false)?;
            let fwd = median((0..cfg.repeats).map(|_| subject.time(&x, &tokens, false)).collect::<Result<_>>()?);
            let fwdbwd = median((0..cfg.repeats).map(|_| subject.time(&x, &tokens, true)).collect::<Result<_>>()?);
            let row = BenchRow {
                kind,
                seq_len: l,
                fwd_ms: fwd,
                fwdbwd_ms: fwdbwd,
                tok_per_s: l as f64 / (fwdbwd / 1e3),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `time(long) / time(short)` of forward+backward for one kind.
pub fn time_ratio(rows: &[BenchRow], kind: BenchKind, long: usize, short: usize) -> Option<f64> {
    let t = |l| rows.iter().find(|r| r.kind == kind && r.seq_len == l).map(|r| r.fwdbwd_ms);
    Some(t(long)? / t(short)?)
}
