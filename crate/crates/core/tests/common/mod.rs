#![allow(dead_code)]

use cheems::attention::{AttnConfig, ValueMode};
use cheems::cdmmoe::MoeConfig;
use cheems::model::ModelConfig;
use cheems::rng::{self, StreamRng};
use cheems::ssd::{PositionalMode, SsdConfig};
use cheems::{Graph, Tensor, Var};

pub fn ssd_cfg(d_model: usize, chunk_len: usize) -> SsdConfig {
    SsdConfig {
        d_model,
        n_heads: 2,
        head_dim: 4,
        d_state: 4,
        chunk_len,
        conv_width: 4,
    }
}

pub fn attn_cfg(d_model: usize, value_mode: ValueMode) -> AttnConfig {
    AttnConfig {
        d_model,
        n_heads: 2,
        head_dim: 4,
        value_mode,
        inner_mode: PositionalMode::GateOnly,
    }
}

pub fn moe_cfg(d_model: usize) -> MoeConfig {
    MoeConfig {
        d_model,
        d_shared: 8,
        d_private: 4,
        n_experts: 16,
        top_k: 4,
        d_query: 4,
    }
}

pub fn tiny_model(mode: PositionalMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_cheems_blocks: 1,
        ssd: ssd_cfg(8, 4),
        attn: attn_cfg(8, ValueMode::InnerSsd),
        moe: moe_cfg(8),
        positional_mode: mode,
        max_positions: 32,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn randn(r: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    rng::normal(r, shape, 1.0)
}

/// `sum(y * probe)` so every output element carries a distinct weight.
pub fn probe_loss(g: &mut Graph<'_, f64>, y: Var, probe: &Tensor<f64>) -> Var {
    let p = g.constant(probe.clone());
    let prod = g.mul(y, p).expect("probe shape");
    g.sum(prod)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `[n, k] x [k, m]` by three nested loops.
pub fn matmul_loops(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// Rotates adjacent pairs of a `[len, width]` row block (width = heads *
/// head_dim) by `pos * base^(-2i / head_dim)`.
pub fn rotate_loops(x: &mut [f64], len: usize, heads: usize, hd: usize, base: f64, positions: &[usize]) {
    for t in 0..len {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let ang = positions[t] as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                let o = (t * heads + h) * hd + 2 * i;
                let (a, b) = (x[o], x[o + 1]);
                x[o] = a * ang.cos() - b * ang.sin();
                x[o + 1] = a * ang.sin() + b * ang.cos();
            }
        }
    }
}

/// Step-by-step SSD recurrence over `x [b, l, h, p]`, `bm, cm [b, l, h, s]`,
/// gates `a [b, l, h]`: `H_t = a_t H_{t-1} + B_t x_t^T`, `y_t = C_t^T H_t`.
pub fn ssd_recurrence(x: &Tensor<f64>, bm: &Tensor<f64>, cm: &Tensor<f64>, a: &Tensor<f64>) -> Vec<f64> {
    let sh = x.shape();
    let (bs, l, h, p) = (sh[0], sh[1], sh[2], sh[3]);
    let s = bm.shape()[3];
    let mut y = vec![0.0; x.len()];
    for b in 0..bs {
        for hh in 0..h {
            let mut state = vec![vec![0.0; p]; s];
            for t in 0..l {
                let at = a.at(&[b, t, hh]);
                for i in 0..s {
                    for j in 0..p {
                        state[i][j] = at * state[i][j] + bm.at(&[b, t, hh, i]) * x.at(&[b, t, hh, j]);
                    }
                }
                for j in 0..p {
                    let mut acc = 0.0;
                    for i in 0..s {
                        acc += cm.at(&[b, t, hh, i]) * state[i][j];
                    }
                    y[((b * l + t) * h + hh) * p + j] = acc;
                }
            }
        }
    }
    y
}

/// Causal softmax over `[l, l]` scores, row by row.
pub fn causal_softmax_loops(scores: &[f64], l: usize) -> Vec<f64> {
    let mut a = vec![0.0; l * l];
    for t in 0..l {
        let mx = (0..=t).map(|j| scores[t * l + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..=t).map(|j| (scores[t * l + j] - mx).exp()).sum();
        for j in 0..=t {
            a[t * l + j] = (scores[t * l + j] - mx).exp() / z;
        }
    }
    a
}

/// Causal multi-head softmax attention with RoPE on Q/K, materialized by
/// loops. `v` holds the per-position values `[l, heads * hd]`.
#[allow(clippy::too_many_arguments)]
pub fn textbook_attention(x: &[f64], v: &[f64], l: usize, d: usize, heads: usize, hd: usize, wq: &[f64], wk: &[f64], wo: &[f64], base: f64) -> Vec<f64> {
    let inner = heads * hd;
    let mut q = matmul_loops(x, wq, l, d, inner);
    let mut k = matmul_loops(x, wk, l, d, inner);
    let pos: Vec<usize> = (0..l).collect();
    rotate_loops(&mut q, l, heads, hd, base, &pos);
    rotate_loops(&mut k, l, heads, hd, base, &pos);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut y = vec![0.0; l * inner];
    for h in 0..heads {
        let mut scores = vec![0.0; l * l];
        for t in 0..l {
            for j in 0..l {
                let s: f64 = (0..hd).map(|e| q[t * inner + h * hd + e] * k[j * inner + h * hd + e]).sum();
                scores[t * l + j] = s * scale;
            }
        }
        let a = causal_softmax_loops(&scores, l);
        for t in 0..l {
            for e in 0..hd {
                y[t * inner + h * hd + e] = (0..l).map(|j| a[t * l + j] * v[j * inner + h * hd + e]).sum();
            }
        }
    }
    matmul_loops(&y, wo, l, inner, d)
}
