//! Token embedding, Cheems blocks and the language-model head.
//!
//! One Cheems block is seven `(SSD, MoE)` layer pairs followed by one
//! `(attention, MoE)` pair. Every sublayer is pre-norm residual:
//! `x += f(rmsnorm(x))`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, AttnLayer, AttnTrace};
use crate::cdmmoe::{ExpertUsage, MoeConfig, MoeLayer, MoeTrace};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::rope::{RopeTable, DEFAULT_BASE};
use crate::ssd::{PositionalMode, SsdConfig, SsdLayer};
use crate::tensor::Tensor;

pub const SSD_PER_BLOCK: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_cheems_blocks: usize,
    pub ssd: SsdConfig,
    pub attn: AttnConfig,
    pub moe: MoeConfig,
    pub positional_mode: PositionalMode,
    pub max_positions: usize,
    pub tie_embeddings: bool,
    /// Replace each block's attention mixer with another SSD layer.
    pub attention_free: bool,
    pub rope_base: f64,
    pub init_std: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 128,
            n_cheems_blocks: 1,
            ssd: SsdConfig::default(),
            attn: AttnConfig::default(),
            moe: MoeConfig::default(),
            positional_mode: PositionalMode::Rope,
            max_positions: 4096,
            tie_embeddings: false,
            attention_free: false,
            rope_base: DEFAULT_BASE,
            init_std: 0.02,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("model.vocab_size", "must be >= 1"));
        }
        if self.n_cheems_blocks == 0 {
            return Err(Error::config("model.n_cheems_blocks", "must be >= 1"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("model.max_positions", "must be >= 1"));
        }
        for (field, v) in [("ssd.d_model", self.ssd.d_model), ("attn.d_model", self.attn.d_model), ("moe.d_model", self.moe.d_model)] {
            if v != self.d_model {
                return Err(Error::config(field, format!("{v} differs from model.d_model {}", self.d_model)));
            }
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::config("model.norm_eps", "must be >= 0"));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("model.rope_base", "must be > 0"));
        }
        self.ssd.validate(self.positional_mode)?;
        self.attn.validate(&self.ssd)?;
        self.moe.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Embed,
    Ssd,
    Attn,
    Moe,
    FinalNorm,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: LayerKind,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Ssd(SsdLayer),
    Attn(AttnLayer),
}

#[derive(Clone, Debug)]
pub enum Sublayer {
    Mixer { norm: ParamId, mixer: Mixer },
    Moe { norm: ParamId, moe: MoeLayer },
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: ParamId,
    pub layers: Vec<Sublayer>,
    pub final_norm: ParamId,
    pub head: Option<ParamId>,
    pub manifest: Vec<ManifestEntry>,
    rope_heads: RopeTable,
    rope_state: RopeTable,
}

/// Optional captures from [`Model::forward_traced`].
#[derive(Default)]
pub struct ModelTrace {
    /// Retrieved expert ids of every MoE layer, in layer order.
    pub moe: Vec<MoeTrace>,
    pub attn: Vec<AttnTrace>,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut manifest = Vec::new();
        let std = config.init_std;
        let d = config.d_model;

        let mut r = rng::stream(config.seed, "init.embed");
        let embed = params.add("embed", rng::normal(&mut r, &[config.vocab_size, d], std), false);
        manifest.push(ManifestEntry {
            name: "embed".into(),
            kind: LayerKind::Embed,
            params: config.vocab_size * d,
        });

        let mut layers = Vec::new();
        for blk in 0..config.n_cheems_blocks {
            for i in 0..=SSD_PER_BLOCK {
                let attn_slot = i == SSD_PER_BLOCK;
                let name = format!("block{blk}.mixer{i}");
                let before = params.numel();
                let norm = params.add(format!("{name}.norm"), Tensor::full(&[d], T::ONE), false);
                let mut r = rng::stream(config.seed, &format!("init.{name}"));
                let (kind, mixer) = if attn_slot && !config.attention_free {
                    let layer = AttnLayer::init(&mut params, &name, &config.attn, &config.ssd, &mut r, std)?;
                    (LayerKind::Attn, Mixer::Attn(layer))
                } else {
                    let layer = SsdLayer::init(&mut params, &name, &config.ssd, config.positional_mode, &mut r, std)?;
                    (LayerKind::Ssd, Mixer::Ssd(layer))
                };
                layers.push(Sublayer::Mixer { norm, mixer });
                manifest.push(ManifestEntry {
                    name: name.clone(),
                    kind,
                    params: params.numel() - before,
                });

                let name = format!("block{blk}.moe{i}");
                let before = params.numel();
                let norm = params.add(format!("{name}.norm"), Tensor::full(&[d], T::ONE), false);
                let mut r = rng::stream(config.seed, &format!("init.{name}"));
                let moe = MoeLayer::init(&mut params, &name, &config.moe, &mut r, std)?;
                layers.push(Sublayer::Moe { norm, moe });
                manifest.push(ManifestEntry {
                    name,
                    kind: LayerKind::Moe,
                    params: params.numel() - before,
                });
            }
        }

        let final_norm = params.add("final_norm", Tensor::full(&[d], T::ONE), false);
        manifest.push(ManifestEntry {
            name: "final_norm".into(),
            kind: LayerKind::FinalNorm,
            params: d,
        });
        let head = if config.tie_embeddings {
            None
        } else {
            let mut r = rng::stream(config.seed, "init.head");
            Some(params.add("head", rng::normal(&mut r, &[d, config.vocab_size], std), true))
        };
        manifest.push(ManifestEntry {
            name: "head".into(),
            kind: LayerKind::Head,
            params: if head.is_some() { d * config.vocab_size } else { 0 },
        });

        Ok(Model {
            config: config.clone(),
            params,
            embed,
            layers,
            final_norm,
            head,
            manifest,
            rope_heads: RopeTable::new(config.rope_base, config.attn.head_dim, config.max_positions)?,
            rope_state: RopeTable::new(config.rope_base, config.ssd.d_state, config.max_positions)?,
        })
    }

    pub fn count_params(&self) -> usize {
        self.manifest.iter().map(|e| e.params).sum()
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
        self.forward_traced(g, tokens, batch, len, None)
    }

    /// Logits `[batch, len, vocab]` for row-major token ids `[batch, len]`.
    /// `g` must come from `self.params.bind()`.
    pub fn forward_traced(&self, g: &mut Graph<'_, T>, tokens: &[usize], batch: usize, len: usize, mut trace: Option<&mut ModelTrace>) -> Result<Var> {
        if tokens.len() != batch * len || len == 0 {
            return Err(Error::dim("model_forward", &[tokens.len()], &[batch, len]));
        }
        if len > self.config.max_positions {
            return Err(Error::Input(format!("sequence length {len} exceeds max_positions {}", self.config.max_positions)));
        }
        let eps = T::from_f64(self.config.norm_eps);
        let mut x = g.embedding(self.embed.var(), tokens, &[batch, len])?;
        for layer in &self.layers {
            let y = match layer {
                Sublayer::Mixer { norm, mixer } => {
                    let h = g.rmsnorm(x, norm.var(), eps)?;
                    match mixer {
                        Mixer::Ssd(s) => s.forward(g, h, &self.rope_state)?,
                        Mixer::Attn(a) => match trace.as_deref_mut() {
                            Some(tr) => {
                                let mut at = AttnTrace { q: h, k: h, attn: h, values: h };
                                let out = a.forward_traced(g, h, &self.rope_heads, Some(&mut at))?;
                                tr.attn.push(at);
                                out
                            }
                            None => a.forward(g, h, &self.rope_heads)?,
                        },
                    }
                }
                Sublayer::Moe { norm, moe } => {
                    let h = g.rmsnorm(x, norm.var(), eps)?;
                    match trace.as_deref_mut() {
                        Some(tr) => {
                            let mut mt = MoeTrace::default();
                            let out = moe.forward_traced(g, h, Some(&mut mt))?;
                            tr.moe.push(mt);
                            out
                        }
                        None => moe.forward(g, h)?,
                    }
                }
            };
            x = g.add(x, y)?;
        }
        let x = g.rmsnorm(x, self.final_norm.var(), eps)?;
        match self.head {
            Some(h) => g.matmul(x, h.var()),
            None => {
                let t = g.transpose(self.embed.var())?;
                g.matmul(x, t)
            }
        }
    }

    /// Eager logits.
    pub fn logits(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        let mut g = self.params.bind();
        let y = self.forward(&mut g, tokens, batch, len)?;
        Ok(g.tensor(y))
    }

    /// Logits plus per-MoE-layer expert hit counts.
    pub fn logits_with_usage(&self, tokens: &[usize], batch: usize, len: usize, usage: &mut Vec<ExpertUsage>) -> Result<Tensor<T>> {
        let mut g = self.params.bind();
        let mut tr = ModelTrace::default();
        let y = self.forward_traced(&mut g, tokens, batch, len, Some(&mut tr))?;
        if usage.len() != tr.moe.len() {
            *usage = (0..tr.moe.len()).map(|_| ExpertUsage::new(self.config.moe.n_experts)).collect();
        }
        for (u, mt) in usage.iter_mut().zip(&tr.moe) {
            for &i in &mt.indices {
                u.counts[i] += 1;
            }
        }
        Ok(g.tensor(y))
    }

    /// Mixer kinds in stack order.
    pub fn mixer_kinds(&self) -> Vec<LayerKind> {
        self.manifest
            .iter()
            .filter(|e| matches!(e.kind, LayerKind::Ssd | LayerKind::Attn))
            .map(|e| e.kind)
            .collect()
    }

    pub fn rope_tables(&self) -> (&RopeTable, &RopeTable) {
        (&self.rope_heads, &self.rope_state)
    }
}
