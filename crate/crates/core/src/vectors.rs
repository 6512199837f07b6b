//! JSON test vectors for out-of-process cross-checking.
//!
//! Every case lists named input and expected tensors (`{name, shape, data}`)
//! computed in 64-bit by the library's own kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, AttnLayer, AttnTrace, ValueMode};
use crate::cdmmoe::{MoeConfig, MoeLayer, MoeTrace};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::rope::{apply_rope, RopeTable, DEFAULT_BASE};
use crate::ssd::{ssd_chunked, PositionalMode, SsdConfig};
use crate::tensor::{NamedTensor, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Rope,
    Ssd,
    Attention,
    Cdmmoe,
}

impl CaseKind {
    pub const ALL: [CaseKind; 4] = [CaseKind::Rope, CaseKind::Ssd, CaseKind::Attention, CaseKind::Cdmmoe];

    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Rope => "rope",
            CaseKind::Ssd => "ssd",
            CaseKind::Attention => "attention",
            CaseKind::Cdmmoe => "cdmmoe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorCase {
    pub name: String,
    pub kind: CaseKind,
    pub inputs: Vec<NamedTensor>,
    pub expected: Vec<NamedTensor>,
    pub tolerance: f64,
}

impl VectorCase {
    pub fn input(&self, name: &str) -> Option<&NamedTensor> {
        self.inputs.iter().find(|t| t.name == name)
    }

    pub fn expected(&self, name: &str) -> Option<&NamedTensor> {
        self.expected.iter().find(|t| t.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFile {
    pub version: u32,
    pub config_hash: String,
    pub cases: Vec<VectorCase>,
}

fn scalar(name: &str, v: f64) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![],
        data: vec![v],
    }
}

fn named(name: &str, t: &Tensor<f64>) -> NamedTensor {
    NamedTensor::from_tensor(name, t)
}

fn case(name: String, kind: CaseKind, inputs: Vec<NamedTensor>, expected: Vec<NamedTensor>) -> VectorCase {
    VectorCase {
        name,
        kind,
        inputs,
        expected,
        tolerance: DEFAULT_TOLERANCE,
    }
}

/// `x [b, l, h, d]` rotated at `positions`; inputs `x`, `positions`, `base`,
/// expected `y`.
pub fn rope_case(name: String, x: &Tensor<f64>, positions: &[usize], base: f64) -> Result<VectorCase> {
    let s = x.shape();
    let max = positions.iter().max().map_or(1, |p| p + 1);
    let table = RopeTable::new(base, s[s.len() - 1], max)?;
    let y = apply_rope(x, &table, positions)?;
    let pos = Tensor::new(vec![positions.len()], positions.iter().map(|&p| p as f64).collect())?;
    Ok(case(
        name,
        CaseKind::Rope,
        vec![named("x", x), named("positions", &pos), scalar("base", base)],
        vec![named("y", &y)],
    ))
}

/// Inputs `X [b, l, h, p]`, `B`, `C [b, l, h, s]`, gates `a [b, l, h]`,
/// expected `Y [b, l, h, p]`.
pub fn ssd_case(name: String, x: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, a: &Tensor<f64>, chunk_len: usize) -> Result<VectorCase> {
    let y = ssd_chunked(x, b, c, a, chunk_len)?;
    Ok(case(
        name,
        CaseKind::Ssd,
        vec![named("X", x), named("B", b), named("C", c), named("a", a)],
        vec![named("Y", &y)],
    ))
}

fn rope_case_random(i: usize, r: &mut StreamRng) -> Result<VectorCase> {
    let l = r.gen_range(1..=12);
    let h = r.gen_range(1..=3);
    let d = 2 * r.gen_range(1..=4);
    let x = rng::normal(r, &[1, l, h, d], 1.0);
    let positions: Vec<usize> = (0..l).map(|_| r.gen_range(0..64)).collect();
    rope_case(format!("rope_{i:02}"), &x, &positions, DEFAULT_BASE)
}

fn ssd_case_random(i: usize, r: &mut StreamRng) -> Result<VectorCase> {
    let b = r.gen_range(1..=2);
    let l = r.gen_range(1..=24);
    let h = r.gen_range(1..=2);
    let p = r.gen_range(1..=4);
    let s = r.gen_range(1..=4);
    let x = rng::normal(r, &[b, l, h, p], 1.0);
    let bb = rng::normal(r, &[b, l, h, s], 1.0);
    let c = rng::normal(r, &[b, l, h, s], 1.0);
    let a = rng::uniform(r, &[b, l, h], 0.5, 1.0);
    let chunk = r.gen_range(1..=8);
    ssd_case(format!("ssd_{i:02}"), &x, &bb, &c, &a, chunk)
}

/// Inputs `Q [b, h, l, d]` and `K` after rotation, values `V` produced by
/// the inner SSD and the `scale`; expected post-softmax `A [b, h, l, l]`
/// and `Y = A V`.
fn attention_case_random(i: usize, r: &mut StreamRng) -> Result<VectorCase> {
    let (h, hd) = (2, 4);
    let d = h * hd;
    let inner = SsdConfig {
        d_model: d,
        n_heads: h,
        head_dim: hd,
        d_state: 4,
        chunk_len: 4,
        conv_width: 4,
    };
    let cfg = AttnConfig {
        d_model: d,
        n_heads: h,
        head_dim: hd,
        value_mode: if i % 4 == 3 { ValueMode::Linear } else { ValueMode::InnerSsd },
        inner_mode: PositionalMode::GateOnly,
    };
    let mut store = ParamStore::<f64>::new();
    let layer = AttnLayer::init(&mut store, "attn", &cfg, &inner, r, 0.5)?;
    let b = r.gen_range(1..=2);
    let l = r.gen_range(1..=12);
    let x = rng::normal::<f64>(r, &[b, l, d], 1.0);
    let rope = RopeTable::new(DEFAULT_BASE, hd, l)?;

    let mut g = store.bind();
    let xv = g.constant(x);
    let mut t = AttnTrace::default();
    layer.forward_traced(&mut g, xv, &rope, Some(&mut t))?;
    let k = g.transpose(t.k)?;
    let y = g.matmul(t.attn, t.values)?;
    Ok(case(
        format!("attention_{i:02}"),
        CaseKind::Attention,
        vec![
            named("Q", &g.tensor(t.q)),
            named("K", &g.tensor(k)),
            named("V", &g.tensor(t.values)),
            scalar("scale", cfg.scale()),
        ],
        vec![named("A", &g.tensor(t.attn)), named("Y", &g.tensor(y))],
    ))
}

/// Inputs `x [tokens, d_model]`, every layer weight and `top_k`; expected
/// retrieved `indices [tokens, top_k]` in rank order and the output `y`.
fn cdmmoe_case_random(i: usize, r: &mut StreamRng) -> Result<VectorCase> {
    let n = [16usize, 64][i % 2];
    let cfg = MoeConfig {
        d_model: 8,
        d_shared: 8,
        d_private: 4,
        n_experts: n,
        top_k: 4,
        d_query: 8,
    };
    let mut store = ParamStore::<f64>::new();
    let layer = MoeLayer::init(&mut store, "moe", &cfg, r, 0.5)?;
    let tokens = r.gen_range(1..=6);
    let x = rng::normal::<f64>(r, &[tokens, cfg.d_model], 1.0);
    let mut g = store.bind();
    let xv = g.constant(x.clone());
    let mut trace = MoeTrace::default();
    let y = layer.forward_traced(&mut g, xv, Some(&mut trace))?;
    let y = g.tensor(y);
    let idx = Tensor::new(vec![tokens, cfg.top_k], trace.indices.iter().map(|&v| v as f64).collect())?;
    drop(g);

    let mut inputs = vec![named("x", &x), scalar("top_k", cfg.top_k as f64)];
    for p in store.iter() {
        let short = p.name.strip_prefix("moe.").unwrap_or(&p.name);
        inputs.push(named(short, &p.tensor));
    }
    Ok(case(format!("cdmmoe_{i:02}"), CaseKind::Cdmmoe, inputs, vec![named("indices", &idx), named("y", &y)]))
}

/// `per_kind` random cases of every kind, plus the two closed-form cases
/// (identity rotation and plain prefix sum).
pub fn generate(seed: u64, per_kind: usize, config_hash: &str) -> Result<VectorFile> {
    let mut cases = Vec::new();

    let mut r = rng::stream(seed, "vectors.rope");
    let x = rng::normal::<f64>(&mut r, &[1, 5, 2, 4], 1.0);
    cases.push(rope_case("rope_identity".into(), &x, &[0; 5], DEFAULT_BASE)?);
    for i in 0..per_kind {
        cases.push(rope_case_random(i, &mut r)?);
    }

    let mut r = rng::stream(seed, "vectors.ssd");
    let x = rng::normal::<f64>(&mut r, &[1, 8, 1, 2], 1.0);
    let ones = Tensor::full(&[1, 8, 1, 1], 1.0);
    cases.push(ssd_case("ssd_prefix_sum".into(), &x, &ones, &ones, &Tensor::full(&[1, 8, 1], 1.0), 3)?);
    for i in 0..per_kind {
        cases.push(ssd_case_random(i, &mut r)?);
    }

    let mut r = rng::stream(seed, "vectors.attention");
    for i in 0..per_kind {
        cases.push(attention_case_random(i, &mut r)?);
    }

    let mut r = rng::stream(seed, "vectors.cdmmoe");
    for i in 0..per_kind {
        cases.push(cdmmoe_case_random(i, &mut r)?);
    }

    Ok(VectorFile {
        version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        cases,
    })
}

impl VectorFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VectorFile = serde_json::from_str(text)?;
        for c in &f.cases {
            if !(c.tolerance > 0.0) {
                return Err(Error::Format(format!("{}: tolerance must be > 0", c.name)));
            }
            for t in c.inputs.iter().chain(&c.expected) {
                if t.shape.iter().product::<usize>() != t.data.len() {
                    return Err(Error::Format(format!("{}: tensor {} shape {:?} has {} values", c.name, t.name, t.shape, t.data.len())));
                }
            }
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_cases_per_kind_round_trip_through_json() {
        let f = generate(0, 20, "abc").unwrap();
        for k in CaseKind::ALL {
            assert!(f.cases.iter().filter(|c| c.kind == k).count() >= 20, "{}", k.name());
        }
        let back = VectorFile::from_json(&f.to_json().unwrap()).unwrap();
        assert!(back == f, "json round trip changed values");
    }

    #[test]
    fn prefix_sum_case_is_cumulative_sum() {
        let f = generate(1, 0, "").unwrap();
        let c = f.cases.iter().find(|c| c.name == "ssd_prefix_sum").unwrap();
        let x = &c.input("X").unwrap().data;
        let y = &c.expected("Y").unwrap().data;
        let mut acc = [0.0; 2];
        for t in 0..8 {
            for j in 0..2 {
                acc[j] += x[t * 2 + j];
                assert!((y[t * 2 + j] - acc[j]).abs() < 1e-12);
            }
        }
    }
}
