//! Causal softmax attention whose values come from an inner function.
//!
//! Queries and keys are plain bias-free projections rotated with RoPE. The
//! value tensor is either a linear projection (plain mode) or the output of a
//! full SSD layer reshaped to per-head values (inner-function mode).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{self, StreamRng};
use crate::rope::RopeTable;
use crate::ssd::{PositionalMode, SsdConfig, SsdLayer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    Linear,
    InnerSsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub value_mode: ValueMode,
    /// Positional mode of the inner SSD; RoPE already enters through Q/K.
    #[serde(default = "default_inner_mode")]
    pub inner_mode: PositionalMode,
}

fn default_inner_mode() -> PositionalMode {
    PositionalMode::GateOnly
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            d_model: 128,
            n_heads: 2,
            head_dim: 64,
            value_mode: ValueMode::InnerSsd,
            inner_mode: PositionalMode::GateOnly,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self, inner: &SsdConfig) -> Result<()> {
        if self.head_dim % 2 != 0 || self.head_dim == 0 {
            return Err(Error::config("attn.head_dim", "must be even and >= 2"));
        }
        if self.n_heads == 0 {
            return Err(Error::config("attn.n_heads", "must be >= 1"));
        }
        if self.value_mode == ValueMode::InnerSsd && inner.d_model != self.d_model {
            return Err(Error::config("attn.d_model", "inner SSD must share the model width"));
        }
        if self.value_mode == ValueMode::InnerSsd && self.n_heads * self.head_dim != self.d_model {
            return Err(Error::config(
                "attn.n_heads",
                format!(
                    "inner-function values need n_heads * head_dim == d_model ({} * {} != {})",
                    self.n_heads, self.head_dim, self.d_model
                ),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self, inner: &SsdConfig) -> usize {
        let hd = self.n_heads * self.head_dim;
        let qk_out = 2 * self.d_model * hd + hd * self.d_model;
        match self.value_mode {
            ValueMode::Linear => qk_out + self.d_model * hd,
            ValueMode::InnerSsd => qk_out + inner.param_count(self.inner_mode),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub enum ValueSource {
    Linear(ParamId),
    Inner(Box<SsdLayer>),
}

#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub config: AttnConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub value: ValueSource,
    pub w_out: ParamId,
}

/// Post-softmax attention matrix `[b, h, l, l]` and per-head values
/// `[b, h, l, head_dim]` captured during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnTrace {
    pub q: Var,
    pub k: Var,
    pub attn: Var,
    pub values: Var,
}

/// `[l, l]` matrix with zeros on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Real>(l: usize) -> Result<Tensor<T>> {
    if l == 0 {
        return Err(Error::config("causal_mask.l", "must be >= 1"));
    }
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[l, l]));
    let m = g.causal_mask(z)?;
    Ok(g.tensor(m))
}

impl AttnLayer {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &AttnConfig, inner: &SsdConfig, rng: &mut StreamRng, init_std: f64) -> Result<Self> {
        config.validate(inner)?;
        let hd = config.n_heads * config.head_dim;
        let d = config.d_model;
        let w_q = store.add(format!("{prefix}.w_q"), rng::normal(rng, &[d, hd], init_std), true);
        let w_k = store.add(format!("{prefix}.w_k"), rng::normal(rng, &[d, hd], init_std), true);
        let value = match config.value_mode {
            ValueMode::Linear => ValueSource::Linear(store.add(format!("{prefix}.w_v"), rng::normal(rng, &[d, hd], init_std), true)),
            ValueMode::InnerSsd => ValueSource::Inner(Box::new(SsdLayer::init(store, &format!("{prefix}.inner"), inner, config.inner_mode, rng, init_std)?)),
        };
        let w_out = store.add(format!("{prefix}.w_out"), rng::normal(rng, &[hd, d], init_std), true);
        Ok(AttnLayer {
            config: config.clone(),
            w_q,
            w_k,
            value,
            w_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, rope: &RopeTable) -> Result<Var> {
        self.forward_traced(g, x, rope, None)
    }

    /// `x [b, l, d_model] -> [b, l, d_model]`.
    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, rope: &RopeTable, trace: Option<&mut AttnTrace>) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.d_model || shape[1] == 0 {
            return Err(Error::dim("attention", &shape, &[cfg.d_model]));
        }
        if rope.head_dim() != cfg.head_dim {
            return Err(Error::config("attn.head_dim", format!("rope table has dim {}", rope.head_dim())));
        }
        let (bs, l) = (shape[0], shape[1]);
        let (h, hd) = (cfg.n_heads, cfg.head_dim);

        let heads = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> { g.reshape(v, &[bs, l, h, hd]) };
        let q = g.matmul(x, self.w_q.var())?;
        let q = heads(g, q)?;
        let q = rope.apply_seq(g, q)?;
        let k = g.matmul(x, self.w_k.var())?;
        let k = heads(g, k)?;
        let k = rope.apply_seq(g, k)?;
        let v = match &self.value {
            ValueSource::Linear(w_v) => g.matmul(x, w_v.var())?,
            ValueSource::Inner(ssd) => ssd.forward(g, x, rope_for_inner(ssd, rope)?.as_ref().unwrap_or(rope))?,
        };
        let v = heads(g, v)?;

        let qh = g.permute(q, &[0, 2, 1, 3])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let vh = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, T::from_f64(cfg.scale()));
        let scores = g.causal_mask(scores)?;
        let attn = g.softmax(scores)?;
        let y = g.matmul(attn, vh)?;
        if let Some(t) = trace {
            *t = AttnTrace {
                q: qh,
                k: kt,
                attn,
                values: vh,
            };
        }
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[bs, l, h * hd])?;
        g.matmul(y, self.w_out.var())
    }
}

/// The inner SSD only needs a rope table when it runs in rope mode with a
/// state width different from the attention head width.
fn rope_for_inner(ssd: &SsdLayer, rope: &RopeTable) -> Result<Option<RopeTable>> {
    if ssd.mode == PositionalMode::Rope && ssd.config.d_state != rope.head_dim() {
        Ok(Some(RopeTable::new(rope.base(), ssd.config.d_state, rope.max_positions())?))
    } else {
        Ok(None)
    }
}
