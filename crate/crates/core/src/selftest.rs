//! Invariant suites run by `cheems selftest`.
//!
//! Each suite compares the library against small brute-force references
//! written with plain loops, at sizes that finish in seconds.

use std::time::Instant;

use rand::Rng;

use crate::attention::{AttnConfig, AttnLayer, ValueMode};
use crate::cdmmoe::{exhaustive_top_k, product_top_k, MoeConfig};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::gradcheck;
use crate::harness::{AdamW, AdamWConfig, Schedule};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::rope::{apply_rope, RopeTable, DEFAULT_BASE};
use crate::ssd::{ssd_chunked, ssd_quadratic, PositionalMode, SsdConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn bound(&mut self, name: impl Into<String>, err: f64, tol: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: err <= tol,
            detail: format!("err {err:.3e} tol {tol:.0e}"),
        });
    }

    fn truth(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed: ok,
            detail: detail.into(),
        });
    }

    fn result<T>(&mut self, name: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.truth(name, false, e.to_string());
                None
            }
        }
    }
}

pub const SUITES: [&str; 10] = [
    "rope",
    "ssd_duality",
    "attention_reduction",
    "causality",
    "product_key",
    "gradients",
    "schedule",
    "adamw",
    "checkpoint",
    "determinism",
];

/// Runs every suite in [`SUITES`] order.
pub fn run_all(seed: u64, mut on_suite: impl FnMut(&SuiteReport)) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|&name| {
            let r = run_suite(name, seed).expect("suite names are fixed");
            on_suite(&r);
            r
        })
        .collect()
}

pub fn run_suite(name: &str, seed: u64) -> Option<SuiteReport> {
    let suite = SUITES.iter().copied().find(|&s| s == name)?;
    let start = Instant::now();
    let mut s = Suite { checks: Vec::new() };
    let mut r = rng::stream(seed, &format!("selftest.{suite}"));
    match suite {
        "rope" => rope_suite(&mut s, &mut r),
        "ssd_duality" => ssd_suite(&mut s, &mut r),
        "attention_reduction" => attention_suite(&mut s, &mut r),
        "causality" => causality_suite(&mut s),
        "product_key" => product_key_suite(&mut s, &mut r),
        "gradients" => gradient_suite(&mut s, &mut r),
        "schedule" => schedule_suite(&mut s),
        "adamw" => adamw_suite(&mut s, &mut r),
        "checkpoint" => checkpoint_suite(&mut s),
        _ => determinism_suite(&mut s),
    }
    Some(SuiteReport {
        suite,
        checks: s.checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small model used by several suites.
pub fn tiny_model_config(mode: PositionalMode) -> ModelConfig {
    let ssd = SsdConfig {
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        d_state: 4,
        chunk_len: 4,
        conv_width: 4,
    };
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        ssd,
        attn: AttnConfig {
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            ..AttnConfig::default()
        },
        moe: MoeConfig {
            d_model: 8,
            d_shared: 8,
            d_private: 4,
            n_experts: 16,
            top_k: 4,
            d_query: 4,
        },
        positional_mode: mode,
        max_positions: 32,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn rope_suite(s: &mut Suite, r: &mut StreamRng) {
    let (d, positions) = (8, 32);
    let Some(table) = s.result("table", RopeTable::new(DEFAULT_BASE, d, 2 * positions)) else { return };
    let rot = |x: &Tensor<f64>, p: usize| apply_rope(x, &table, &[p]).expect("shape is fixed");
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let q = rng::normal::<f64>(r, &[1, 1, 1, d], 1.0);
    let k = rng::normal::<f64>(r, &[1, 1, 1, d], 1.0);

    s.truth("position_zero_identity", rot(&q, 0).data() == q.data(), "exact");
    let norm = |t: &Tensor<f64>| dot(t, t).sqrt();
    let worst = (0..positions).map(|p| (norm(&rot(&q, p)) - norm(&q)).abs()).fold(0.0, f64::max);
    s.bound("norm_preserved", worst, 1e-6);
    let mut worst = 0.0f64;
    for m in 0..positions {
        for n in 0..positions {
            let a = dot(&rot(&q, m), &rot(&k, n));
            let b = dot(&rot(&q, m + 7), &rot(&k, n + 7));
            worst = worst.max((a - b).abs());
        }
    }
    s.bound("shift_invariance", worst, 1e-5);
}

/// `h_t = a_t h_{t-1} + B_t x_t^T`, `y_t = C_t^T h_t` per batch and head.
pub fn ssd_recurrence(x: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, a: &Tensor<f64>) -> Vec<f64> {
    let [bs, l, h, p] = x.shape().try_into().expect("rank 4");
    let n = b.shape()[3];
    let (xd, bd, cd, ad) = (x.data(), b.data(), c.data(), a.data());
    let mut y = vec![0.0; xd.len()];
    for bi in 0..bs {
        for hi in 0..h {
            let mut state = vec![0.0; n * p];
            for t in 0..l {
                let at = ad[(bi * l + t) * h + hi];
                let xo = ((bi * l + t) * h + hi) * p;
                let so = ((bi * l + t) * h + hi) * n;
                for si in 0..n {
                    for pi in 0..p {
                        state[si * p + pi] = at * state[si * p + pi] + bd[so + si] * xd[xo + pi];
                    }
                }
                for pi in 0..p {
                    y[xo + pi] = (0..n).map(|si| cd[so + si] * state[si * p + pi]).sum();
                }
            }
        }
    }
    y
}

fn ssd_suite(s: &mut Suite, r: &mut StreamRng) {
    let (mut quad, mut chunk) = (0.0f64, 0.0f64);
    let mut f32_err = 0.0f64;
    for _ in 0..30 {
        let (bs, l, h, p, n) = (r.gen_range(1..=2), r.gen_range(1..=64), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = rng::normal::<f64>(r, &[bs, l, h, p], 1.0);
        let b = rng::normal::<f64>(r, &[bs, l, h, n], 1.0);
        let c = rng::normal::<f64>(r, &[bs, l, h, n], 1.0);
        let a = rng::uniform::<f64>(r, &[bs, l, h], 0.3, 1.0);
        let cl = r.gen_range(1..=16);
        let want = ssd_recurrence(&x, &b, &c, &a);
        let Some(yq) = s.result("quadratic", ssd_quadratic(&x, &b, &c, &a)) else { return };
        let Some(yc) = s.result("chunked", ssd_chunked(&x, &b, &c, &a, cl)) else { return };
        quad = quad.max(max_diff(yq.data(), &want));
        chunk = chunk.max(max_diff(yc.data(), &want));
        let Some(y32) = s.result("chunked_f32", ssd_chunked(&x.cast::<f32>(), &b.cast(), &c.cast(), &a.cast(), cl)) else { return };
        let y32: Vec<f64> = y32.data().iter().map(|&v| v as f64).collect();
        f32_err = f32_err.max(max_diff(&y32, &want));
    }
    s.bound("quadratic_vs_recurrence_f64", quad, 1e-10);
    s.bound("chunked_vs_recurrence_f64", chunk, 1e-10);
    s.bound("chunked_vs_recurrence_f32", f32_err, 1e-5);
}

fn matmul_loops(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

/// Textbook causal softmax attention with RoPE on the queries and keys.
pub fn reference_attention(x: &[f64], l: usize, d: usize, heads: usize, hd: usize, wq: &[f64], wk: &[f64], wv: &[f64], wo: &[f64], base: f64) -> Vec<f64> {
    let inner = heads * hd;
    let (mut q, mut k) = (matmul_loops(x, wq, l, d, inner), matmul_loops(x, wk, l, d, inner));
    let v = matmul_loops(x, wv, l, d, inner);
    for t in 0..l {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = base.powf(-2.0 * i as f64 / hd as f64) * t as f64;
                let (c, sn) = (theta.cos(), theta.sin());
                for m in [&mut q, &mut k] {
                    let o = t * inner + h * hd + 2 * i;
                    let (a, b) = (m[o], m[o + 1]);
                    m[o] = a * c - b * sn;
                    m[o + 1] = a * sn + b * c;
                }
            }
        }
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut y = vec![0.0; l * inner];
    for h in 0..heads {
        for t in 0..l {
            let scores: Vec<f64> = (0..=t)
                .map(|j| (0..hd).map(|e| q[t * inner + h * hd + e] * k[j * inner + h * hd + e]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for e in 0..hd {
                y[t * inner + h * hd + e] = (0..=t).map(|j| w[j] / z * v[j * inner + h * hd + e]).sum();
            }
        }
    }
    matmul_loops(&y, wo, l, inner, d)
}

fn attention_suite(s: &mut Suite, r: &mut StreamRng) {
    let (d, heads, hd, l) = (8, 2, 4, 16);
    let ssd = SsdConfig {
        d_model: d,
        n_heads: heads,
        head_dim: hd,
        d_state: 4,
        chunk_len: 4,
        conv_width: 4,
    };
    let cfg = AttnConfig {
        d_model: d,
        n_heads: heads,
        head_dim: hd,
        value_mode: ValueMode::Linear,
        inner_mode: PositionalMode::GateOnly,
    };
    let mut store = ParamStore::<f64>::new();
    let Some(layer) = s.result("init", AttnLayer::init(&mut store, "attn", &cfg, &ssd, r, 0.5)) else { return };
    let x = rng::normal::<f64>(r, &[1, l, d], 1.0);
    let Some(rope) = s.result("rope", RopeTable::new(DEFAULT_BASE, hd, l)) else { return };
    let mut g = store.bind();
    let xv = g.constant(x.clone());
    let Some(y) = s.result("forward", layer.forward(&mut g, xv, &rope)) else { return };
    let w_v = match &layer.value {
        crate::attention::ValueSource::Linear(p) => *p,
        crate::attention::ValueSource::Inner(_) => unreachable!("linear value mode"),
    };
    let data = |id: crate::ParamId| store.get(id).tensor.data();
    let want = reference_attention(x.data(), l, d, heads, hd, data(layer.w_q), data(layer.w_k), data(w_v), data(layer.w_out), DEFAULT_BASE);
    s.bound("linear_inner_function_is_textbook_attention", max_diff(g.value(y), &want), 1e-10);
}

fn causality_suite(s: &mut Suite) {
    let l = 16;
    for mode in PositionalMode::ALL {
        let Some(model) = s.result("build", Model::<f64>::build(&tiny_model_config(mode))) else { return };
        let vocab = model.config.vocab_size;
        let tokens: Vec<usize> = (0..l).map(|i| (i * 7 + 3) % vocab).collect();
        let Some(base) = s.result("logits", model.logits(&tokens, 1, l)) else { return };
        let mut leaks = 0;
        for t in 0..l {
            let mut p = tokens.clone();
            p[t] = (p[t] + 1) % vocab;
            let Some(out) = s.result("logits", model.logits(&p, 1, l)) else { return };
            if out.data()[..t * vocab] != base.data()[..t * vocab] {
                leaks += 1;
            }
        }
        s.truth(format!("model_{mode:?}"), leaks == 0, format!("{leaks} perturbed positions leaked backwards"));
    }
}

fn product_key_suite(s: &mut Suite, r: &mut StreamRng) {
    for n in [16usize, 256, 4096] {
        let side = (n as f64).sqrt() as usize;
        let k = 16.min(n);
        let mut mismatches = 0;
        for _ in 0..20 {
            let s1: Vec<f64> = (0..side).map(|_| r.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..side).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (Ok(a), Ok(b)) = (product_top_k(&s1, &s2, k), exhaustive_top_k(&s1, &s2, k)) else {
                mismatches += 1;
                continue;
            };
            let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.index == y.index && x.score == y.score);
            if !same {
                mismatches += 1;
            }
        }
        s.truth(format!("exhaustive_agreement_n{n}"), mismatches == 0, format!("{mismatches} of 20 tables differ"));
    }
}

fn gradient_suite(s: &mut Suite, r: &mut StreamRng) {
    let cfg = tiny_model_config(PositionalMode::Rope);
    let Some(mut model) = s.result("build", Model::<f64>::build(&cfg)) else { return };
    let (b, l) = (1, 6);
    let tokens: Vec<usize> = (0..b * l).map(|_| r.gen_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..b * l).map(|_| r.gen_range(0..cfg.vocab_size)).collect();
    let weights = vec![1.0; b * l];
    let shell = model.clone();
    let report = gradcheck::check_params(&mut model.params, 1e-5, Some(2), r, |_| false, |g| {
        let logits = shell.forward(g, &tokens, b, l)?;
        g.cross_entropy(logits, &targets, &weights)
    });
    if let Some(rep) = s.result("gradcheck", report) {
        s.bound(format!("one_block_model ({} entries)", rep.checked), rep.max_rel_err, 1e-4);
    }
}

fn schedule_suite(s: &mut Suite) {
    let sch = Schedule::default();
    let at = |t: u64| sch.lr_at(t).unwrap_or(f64::NAN);
    let w = sch.warmup_steps();
    s.truth("zero_at_start", at(0) == 0.0, format!("{}", at(0)));
    s.truth("peak_at_warmup_end", at(w) == sch.max_lr, format!("{}", at(w)));
    s.truth("min_at_end", at(sch.total_steps) == sch.min_lr, format!("{}", at(sch.total_steps)));
    let mid = (w + sch.total_steps) / 2;
    s.bound("cosine_midpoint", (at(mid) - (sch.max_lr + sch.min_lr) / 2.0).abs(), 1e-12);
    let fine = Schedule {
        total_steps: 1_000_000_000_000,
        ..sch.clone()
    };
    let wf = fine.warmup_steps();
    let jump = (fine.lr_at(wf + 1).unwrap_or(f64::NAN) - fine.lr_at(wf - 1).unwrap_or(f64::NAN)).abs();
    s.bound("continuous_at_junction", jump, 1e-12);
}

fn adamw_suite(s: &mut Suite, r: &mut StreamRng) {
    let cfg = AdamWConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let p0: f64 = r.gen_range(-1.0..1.0);
        let decay = r.gen_bool(0.5);
        let id = store.add("p", Tensor::scalar(p0), decay);
        let mut opt = AdamW::new(cfg.clone(), &store);
        let (mut m, mut v, mut p) = (0.0, 0.0, p0);
        for t in 1..=5 {
            let g: f64 = r.gen_range(-1.0..1.0);
            let lr: f64 = r.gen_range(1e-4..1e-2);
            store.get_mut(id).tensor.grad = Some(vec![g]);
            if opt.step(&mut store, lr).is_err() {
                worst = f64::INFINITY;
            }
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            if decay {
                p -= lr * cfg.weight_decay * p;
            }
            p -= lr * mh / (vh.sqrt() + cfg.eps);
            worst = worst.max((store.get(id).tensor.data()[0] - p).abs());
        }
    }
    s.bound("scalar_formula", worst, 1e-12);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(0.5), false);
    store.get_mut(id).tensor.grad = Some(vec![1.0]);
    let mut opt = AdamW::new(cfg.clone(), &store);
    let ok = opt.step(&mut store, 1e-3).is_ok();
    let want = 0.5 - 1e-3 / (1.0 + cfg.eps);
    s.bound("first_step_unit_grad", if ok { (store.get(id).tensor.data()[0] - want).abs() } else { f64::INFINITY }, 1e-15);
    store.get_mut(id).tensor.grad = Some(vec![f64::NAN]);
    s.truth("non_finite_grad_rejected", opt.step(&mut store, 1e-3).is_err(), "");
}

fn tiny_run_config() -> RunConfig {
    RunConfig {
        model: tiny_model_config(PositionalMode::Rope),
        ..RunConfig::default()
    }
}

fn checkpoint_suite(s: &mut Suite) {
    let cfg = tiny_run_config();
    let Some(m) = s.result("build", Model::<f32>::build(&cfg.model)) else { return };
    let Some(a) = s.result("encode", checkpoint::encode(&cfg, &m.params)) else { return };
    let Some(ck) = s.result("decode", checkpoint::decode(&a)) else { return };
    let Some(m2) = s.result("rebuild", ck.model::<f32>()) else { return };
    let Some(b) = s.result("encode_again", checkpoint::encode(&ck.header.config, &m2.params)) else { return };
    s.truth("save_load_save_bitwise", a == b, format!("{} bytes", a.len()));
    s.truth("hash_recorded", ck.header.config_hash == cfg.hash(), ck.header.config_hash.clone());
}

fn determinism_suite(s: &mut Suite) {
    let cfg = tiny_model_config(PositionalMode::Rope);
    let tokens: Vec<usize> = (0..12).map(|i| i % cfg.vocab_size).collect();
    let run = || -> Result<Vec<f32>> { Ok(Model::<f32>::build(&cfg)?.logits(&tokens, 1, 12)?.into_data()) };
    let (Some(a), Some(b)) = (s.result("first", run()), s.result("second", run())) else { return };
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    s.truth("same_seed_same_logits", same, "");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all(0, |_| {}) {
            for c in &r.checks {
                assert!(c.passed, "{}::{} {}", r.suite, c.name, c.detail);
            }
            assert!(!r.checks.is_empty(), "{}", r.suite);
        }
    }
}
