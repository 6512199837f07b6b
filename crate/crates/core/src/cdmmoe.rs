//! Cross-domain million mixture of experts.
//!
//! Every token first passes a shared gated MLP (the cross-domain path). Its
//! gated hidden value feeds both a residual projection back to the model
//! width and a private projection that drives product-key retrieval over
//! `N = r * r` single-neuron experts. Retrieval splits the query in two
//! halves, scores each half against `r` sub-keys, and only combines the two
//! per-half top-k lists, so it never scores all `N` experts.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub d_model: usize,
    pub d_shared: usize,
    pub d_private: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_query: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            d_model: 128,
            d_shared: 128,
            d_private: 64,
            n_experts: 4096,
            top_k: 16,
            d_query: 128,
        }
    }
}

/// Closed-form parameter totals of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub shared: usize,
    pub retrieval: usize,
    pub experts: usize,
    pub total: usize,
    /// Dense cross-domain layout with four gated-MLP experts
    /// `d_shared -> d_private -> d_model` and a linear router.
    pub reference_dense: usize,
}

impl MoeConfig {
    pub fn sub_keys(&self) -> usize {
        (self.n_experts as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.sub_keys();
        if r * r != self.n_experts || self.n_experts == 0 {
            return Err(Error::config("moe.n_experts", format!("{} is not a perfect square", self.n_experts)));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config("moe.top_k", format!("must be in 1..={}", self.n_experts)));
        }
        if self.d_query % 2 != 0 || self.d_query == 0 {
            return Err(Error::config("moe.d_query", "must be even"));
        }
        for (f, v) in [("d_model", self.d_model), ("d_shared", self.d_shared), ("d_private", self.d_private)] {
            if v == 0 {
                return Err(Error::config(format!("moe.{f}"), "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamBreakdown {
        let (m, s, p, n, dq) = (self.d_model, self.d_shared, self.d_private, self.n_experts, self.d_query);
        let shared = 3 * m * s;
        let retrieval = s * p + p * dq + 2 * self.sub_keys() * (dq / 2);
        let experts = n * (2 * p + m);
        const DENSE_EXPERTS: usize = 4;
        let reference_dense = shared + s * DENSE_EXPERTS + DENSE_EXPERTS * (2 * s * p + p * m);
        ParamBreakdown {
            shared,
            retrieval,
            experts,
            total: shared + retrieval + experts,
            reference_dense,
        }
    }
}

fn desc_then_index<T: Real>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

fn top_k_of<T: Real>(scores: &[T], k: usize) -> Vec<(usize, T)> {
    let mut v: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    let k = k.min(v.len());
    if k < v.len() {
        v.select_nth_unstable_by(k, desc_then_index);
        v.truncate(k);
    }
    v.sort_by(desc_then_index);
    v
}

/// One retrieved expert: flat index `i1 * r + i2` and score `s1[i1] + s2[i2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retrieved<T> {
    pub index: usize,
    pub i1: usize,
    pub i2: usize,
    pub score: T,
}

/// Exact top-k of `s1[i1] + s2[i2]` over the full Cartesian product, ordered
/// by score then lowest flat index, using only the per-half top-k lists.
pub fn product_top_k<T: Real>(s1: &[T], s2: &[T], k: usize) -> Result<Vec<Retrieved<T>>> {
    let r = s2.len();
    if k == 0 || k > s1.len() * r {
        return Err(Error::config("moe.top_k", format!("{k} outside 1..={}", s1.len() * r)));
    }
    let a = top_k_of(s1, k);
    let b = top_k_of(s2, k);
    let mut cand: Vec<(usize, T)> = Vec::with_capacity(a.len() * b.len());
    for &(i1, x) in &a {
        for &(i2, y) in &b {
            cand.push((i1 * r + i2, x + y));
        }
    }
    Ok(top_k_of_pairs(cand, k)
        .into_iter()
        .map(|(index, score)| Retrieved {
            index,
            i1: index / r,
            i2: index % r,
            score,
        })
        .collect())
}

fn top_k_of_pairs<T: Real>(mut v: Vec<(usize, T)>, k: usize) -> Vec<(usize, T)> {
    if k < v.len() {
        v.select_nth_unstable_by(k, desc_then_index);
        v.truncate(k);
    }
    v.sort_by(desc_then_index);
    v
}

/// Scores every one of the `N` combinations; the reference route for
/// [`product_top_k`].
pub fn exhaustive_top_k<T: Real>(s1: &[T], s2: &[T], k: usize) -> Result<Vec<Retrieved<T>>> {
    let r = s2.len();
    if k == 0 || k > s1.len() * r {
        return Err(Error::config("moe.top_k", format!("{k} outside 1..={}", s1.len() * r)));
    }
    let all: Vec<(usize, T)> = (0..s1.len() * r).map(|i| (i, s1[i / r] + s2[i % r])).collect();
    Ok(top_k_of_pairs(all, k)
        .into_iter()
        .map(|(index, score)| Retrieved {
            index,
            i1: index / r,
            i2: index % r,
            score,
        })
        .collect())
}

/// Per-expert hit counts accumulated over forward passes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertUsage {
    pub counts: Vec<u64>,
}

impl ExpertUsage {
    pub fn new(n_experts: usize) -> Self {
        ExpertUsage {
            counts: vec![0; n_experts],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert_id,hit_count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{i},{c}");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub config: MoeConfig,
    pub w_s: ParamId,
    pub v_s: ParamId,
    pub w2_s: ParamId,
    pub w_in: ParamId,
    pub w_query: ParamId,
    pub keys1: ParamId,
    pub keys2: ParamId,
    pub expert_w: ParamId,
    pub expert_v: ParamId,
    pub expert_u: ParamId,
}

/// Values captured by [`MoeLayer::forward_traced`].
#[derive(Clone, Debug, Default)]
pub struct MoeTrace {
    /// Retrieved flat expert ids, `top_k` per token.
    pub indices: Vec<usize>,
    pub gate: Option<Var>,
    pub gated: Option<Var>,
    pub query: Option<Var>,
    pub private: Option<Var>,
}

impl MoeLayer {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &MoeConfig, rng: &mut StreamRng, init_std: f64) -> Result<Self> {
        config.validate()?;
        let (m, s, p, n, dq) = (config.d_model, config.d_shared, config.d_private, config.n_experts, config.d_query);
        let r = config.sub_keys();
        let mut mat = |name: &str, rows: usize, cols: usize| store.add(format!("{prefix}.{name}"), rng::normal(rng, &[rows, cols], init_std), true);
        Ok(MoeLayer {
            config: config.clone(),
            w_s: mat("w_s", m, s),
            v_s: mat("v_s", m, s),
            w2_s: mat("w2_s", s, m),
            w_in: mat("w_in", s, p),
            w_query: mat("w_query", p, dq),
            keys1: mat("keys1", r, dq / 2),
            keys2: mat("keys2", r, dq / 2),
            expert_w: mat("expert_w", n, p),
            expert_v: mat("expert_v", n, p),
            expert_u: mat("expert_u", n, m),
        })
    }

    /// Gated shared value `(x W_s) * silu(x V_s)`, `[.., d_model] -> [.., d_shared]`.
    pub fn cross_domain<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = g.matmul(x, self.w_s.var())?;
        let b = g.matmul(x, self.v_s.var())?;
        let b = g.silu(b);
        g.mul(a, b)
    }

    /// Product-key retrieval for a single query vector.
    pub fn retrieve<T: Real>(&self, store: &ParamStore<T>, q: &[T]) -> Result<Vec<Retrieved<T>>> {
        let cfg = &self.config;
        if q.len() != cfg.d_query {
            return Err(Error::dim("retrieve_experts", &[q.len()], &[cfg.d_query]));
        }
        let half = cfg.d_query / 2;
        let score = |keys: ParamId, qh: &[T]| -> Vec<T> {
            store.get(keys).tensor.data().chunks(half).map(|row| row.iter().zip(qh).map(|(&a, &b)| a * b).sum()).collect()
        };
        let s1 = score(self.keys1, &q[..half]);
        let s2 = score(self.keys2, &q[half..]);
        product_top_k(&s1, &s2, cfg.top_k)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(g, x, None)
    }

    /// `x [.., d_model] -> [.., d_model]`.
    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, trace: Option<&mut MoeTrace>) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&cfg.d_model) {
            return Err(Error::dim("cdmmoe", &shape, &[cfg.d_model]));
        }
        let tokens: usize = shape[..shape.len() - 1].iter().product();
        let (m, k, half) = (cfg.d_model, cfg.top_k, cfg.d_query / 2);
        let r = cfg.sub_keys();

        let x2 = g.reshape(x, &[tokens, m])?;
        let gated = self.cross_domain(g, x2)?;
        let shared = g.matmul(gated, self.w2_s.var())?;
        let xp = g.matmul(gated, self.w_in.var())?;
        let q = g.matmul(xp, self.w_query.var())?;
        let q1 = g.slice(q, 1, 0, half)?;
        let q2 = g.slice(q, 1, half, half)?;
        let k1 = g.transpose(self.keys1.var())?;
        let k2 = g.transpose(self.keys2.var())?;
        let s1 = g.matmul(q1, k1)?;
        let s2 = g.matmul(q2, k2)?;

        let mut ids = Vec::with_capacity(tokens * k);
        let mut i1s = Vec::with_capacity(tokens * k);
        let mut i2s = Vec::with_capacity(tokens * k);
        {
            let (v1, v2) = (g.value(s1), g.value(s2));
            for t in 0..tokens {
                for hit in product_top_k(&v1[t * r..(t + 1) * r], &v2[t * r..(t + 1) * r], k)? {
                    ids.push(hit.index);
                    i1s.push(hit.i1);
                    i2s.push(hit.i2);
                }
            }
        }
        let sel1 = g.gather_last(s1, &i1s, k)?;
        let sel2 = g.gather_last(s2, &i2s, k)?;
        let scores = g.add(sel1, sel2)?;
        let gate = g.softmax(scores)?;

        let experts = g.expert_mix(xp, gate, self.expert_w.var(), self.expert_v.var(), self.expert_u.var(), &ids)?;
        let y = g.add(experts, shared)?;

        if let Some(t) = trace {
            t.indices = ids;
            t.gate = Some(gate);
            t.gated = Some(gated);
            t.query = Some(q);
            t.private = Some(xp);
        }
        g.reshape(y, &shape)
    }
}

/// Eager cross-domain gated value for tests and vector export.
pub fn cross_domain<T: Real>(layer: &MoeLayer, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = store.bind();
    let xv = g.constant(x.clone());
    let y = layer.cross_domain(&mut g, xv)?;
    Ok(g.tensor(y))
}
