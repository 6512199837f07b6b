mod common;

use cheems::attention::{AttnLayer, ValueMode};
use cheems::cdmmoe::MoeLayer;
use cheems::gradcheck::check_params;
use cheems::model::Model;
use cheems::rng;
use cheems::rope::RopeTable;
use cheems::ssd::{PositionalMode, SsdLayer};
use cheems::{ParamStore, Tensor};
use common::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[test]
fn ssd_layer_every_mode() {
    for mode in PositionalMode::ALL {
        for seed in 0..3 {
            let mut r = rng::stream(seed, "grad.ssd");
            let mut store = ParamStore::<f64>::new();
            let layer = SsdLayer::init(&mut store, "ssd", &ssd_cfg(6, 3), mode, &mut r, 0.5).unwrap();
            let rope = RopeTable::new(100.0, 4, 16).unwrap();
            let x = randn(&mut r, &[2, 7, 6]);
            let probe = randn(&mut r, &[2, 7, 6]);
            let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
                let xv = g.constant(x.clone());
                let y = layer.forward(g, xv, &rope)?;
                Ok(probe_loss(g, y, &probe))
            })
            .unwrap();
            assert!(rep.passes(TOL), "{mode:?} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn attention_both_value_modes() {
    for vm in [ValueMode::Linear, ValueMode::InnerSsd] {
        for seed in 0..3 {
            let mut r = rng::stream(seed, "grad.attn");
            let mut store = ParamStore::<f64>::new();
            let layer = AttnLayer::init(&mut store, "attn", &attn_cfg(8, vm), &ssd_cfg(8, 2), &mut r, 0.5).unwrap();
            let rope = RopeTable::new(100.0, 4, 16).unwrap();
            let x = randn(&mut r, &[2, 5, 8]);
            let probe = randn(&mut r, &[2, 5, 8]);
            let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
                let xv = g.constant(x.clone());
                let y = layer.forward(g, xv, &rope)?;
                Ok(probe_loss(g, y, &probe))
            })
            .unwrap();
            assert!(rep.passes(TOL), "{vm:?} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn cdmmoe_layer() {
    for seed in 0..3 {
        let mut r = rng::stream(seed, "grad.moe");
        let mut store = ParamStore::<f64>::new();
        let layer = MoeLayer::init(&mut store, "moe", &moe_cfg(6), &mut r, 0.5).unwrap();
        let x = randn(&mut r, &[1, 4, 6]);
        let probe = randn(&mut r, &[1, 4, 6]);
        let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
            let xv = g.constant(x.clone());
            let y = layer.forward(g, xv)?;
            Ok(probe_loss(g, y, &probe))
        })
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn rmsnorm_input_and_weight() {
    for seed in 0..5 {
        let mut r = rng::stream(seed, "grad.norm");
        let mut store = ParamStore::<f64>::new();
        store.add("x", randn(&mut r, &[3, 5]), false);
        store.add("w", randn(&mut r, &[5]), false);
        let probe = randn(&mut r, &[3, 5]);
        let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
            let y = g.rmsnorm(cheems::ParamId(0).var(), cheems::ParamId(1).var(), 1e-6)?;
            Ok(probe_loss(g, y, &probe))
        })
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn full_one_block_model() {
    for mode in PositionalMode::ALL {
        let mut model = Model::<f64>::build(&tiny_model(mode)).unwrap();
        let tokens: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % 11).collect();
        let targets: Vec<usize> = (0..12).map(|i| (i * 3 + 2) % 11).collect();
        let weights = vec![1.0; 12];
        let mut r = rng::stream(0, "grad.model");
        let shadow = model.clone();
        let rep = check_params(&mut model.params, H, Some(4), &mut r, |_| false, |g| {
            let y = shadow.forward(g, &tokens, 2, 6)?;
            g.cross_entropy(y, &targets, &weights)
        })
        .unwrap();
        assert!(rep.passes(TOL), "{mode:?}: {rep:?}");
    }
}

type OpFn = fn(&mut cheems::Graph<'_, f64>, cheems::Var, cheems::Var) -> cheems::Result<cheems::Var>;

/// Each entry maps leaves `a [2, 3, 4]` and `b [4, 4]` to one op's output.
fn unit_ops() -> Vec<(&'static str, OpFn)> {
    vec![
        ("matmul", |g, a, b| g.matmul(a, b)),
        ("add", |g, a, _| { let t = g.scale(a, 0.3); g.add(a, t) }),
        ("sub", |g, a, _| { let e = g.exp(a); g.sub(a, e) }),
        ("mul", |g, a, _| { let s = g.silu(a); g.mul(a, s) }),
        ("scale", |g, a, _| Ok(g.scale(a, -1.7))),
        ("neg", |g, a, _| Ok(g.neg(a))),
        ("add_scalar", |g, a, _| { let t = g.add_scalar(a, 0.5); g.mul(t, a) }),
        ("exp", |g, a, _| Ok(g.exp(a))),
        ("silu", |g, a, _| Ok(g.silu(a))),
        ("softplus", |g, a, _| Ok(g.softplus(a))),
        ("softmax", |g, a, _| g.softmax(a)),
        ("rmsnorm", |g, a, b| { let w = g.slice(b, 0, 0, 1)?; let w = g.reshape(w, &[4])?; g.rmsnorm(a, w, 1e-6) }),
        ("transpose", |g, a, _| g.transpose(a)),
        ("reshape", |g, a, _| g.reshape(a, &[6, 4])),
        ("permute", |g, a, _| g.permute(a, &[2, 0, 1])),
        ("broadcast_to", |g, _, b| { let r = g.reshape(b, &[1, 4, 4])?; g.broadcast_to(r, &[3, 4, 4]) }),
        ("slice", |g, a, _| g.slice(a, 2, 1, 2)),
        ("concat", |g, a, _| { let e = g.exp(a); g.concat(&[a, e], 1) }),
        ("cumsum", |g, a, _| g.cumsum(a, 1)),
        ("segsum", |g, a, _| { let s = g.segsum(a)?; let m = g.causal_mask(s)?; Ok(g.exp(m)) }),
        ("causal_mask", |g, _, b| { let m = g.causal_mask(b)?; g.softmax(m) }),
        ("embedding", |g, _, b| g.embedding(b, &[3, 0, 0, 2], &[2, 2])),
        ("gather_last", |g, a, _| g.gather_last(a, &[0, 3, 2, 2, 1, 0, 3, 3, 1, 0, 0, 2], 2)),
        ("causal_conv", |g, a, b| { let w = g.slice(b, 0, 0, 3)?; let x = g.permute(a, &[0, 2, 1])?; let x = g.reshape(x, &[2, 4, 3])?; g.causal_conv(x, w) }),
        ("expert_mix", |g, a, b| {
            let x = g.reshape(a, &[6, 4])?;
            let gate = g.slice(x, 1, 0, 2)?;
            let gate = g.softmax(gate)?;
            g.expert_mix(x, gate, b, b, b, &[0, 1, 2, 3, 3, 2, 1, 1, 0, 0, 2, 1])
        }),
        ("cross_entropy", |g, a, _| { let r = g.reshape(a, &[6, 4])?; g.cross_entropy(r, &[0, 1, 2, 3, 0, 1], &[1.0, 0.5, 2.0, 1.0, 0.0, 1.0]) }),
    ]
}

#[test]
fn every_op_on_twenty_seeds() {
    for (name, op) in unit_ops() {
        for seed in 0..20 {
            let mut r = rng::stream(seed, name);
            let mut store = ParamStore::<f64>::new();
            store.add("a", randn(&mut r, &[2, 3, 4]), false);
            store.add("b", randn(&mut r, &[4, 4]), false);
            let out_shape = {
                let mut g = store.bind();
                let y = op(&mut g, cheems::ParamId(0).var(), cheems::ParamId(1).var()).unwrap();
                g.shape(y).to_vec()
            };
            let probe = randn(&mut r, &out_shape);
            let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
                let y = op(g, cheems::ParamId(0).var(), cheems::ParamId(1).var())?;
                Ok(probe_loss(g, y, &probe))
            });
            let rep = rep.unwrap();
            assert!(rep.passes(TOL), "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn composite_chain() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, "grad.chain");
        let mut store = ParamStore::<f64>::new();
        store.add("x", randn(&mut r, &[2, 5, 4]), false);
        store.add("w", randn(&mut r, &[4, 6]), false);
        store.add("n", randn(&mut r, &[6]), false);
        let targets: Vec<usize> = (0..10).map(|i| i % 6).collect();
        let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
            use cheems::ParamId as P;
            let h = g.matmul(P(0).var(), P(1).var())?;
            let h = g.rmsnorm(h, P(2).var(), 1e-6)?;
            let h = g.silu(h);
            let h = g.reshape(h, &[10, 6])?;
            g.cross_entropy(h, &targets, &[1.0; 10])
        })
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn decay_scan_and_broadcast() {
    for seed in 0..5 {
        let mut r = rng::stream(seed, "grad.scan");
        let mut store = ParamStore::<f64>::new();
        store.add("s", randn(&mut r, &[2, 4, 3]), false);
        store.add("ld", rng::uniform(&mut r, &[2, 4], -1.0, 0.0), false);
        store.add("v", randn(&mut r, &[1, 3]), false);
        let probe = randn(&mut r, &[2, 4, 3]);
        let rep = check_params(&mut store, H, None, &mut r, |_| false, |g| {
            use cheems::ParamId as P;
            let h = g.decay_scan(P(0).var(), P(1).var())?;
            let b = g.reshape(P(2).var(), &[1, 1, 3])?;
            let b = g.broadcast_to(b, &[2, 4, 3])?;
            let y = g.add(h, b)?;
            let w: Tensor<f64> = probe.clone();
            Ok(probe_loss(g, y, &w))
        })
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn wider_model_spot_check() {
    let cfg = cheems::model::ModelConfig {
        vocab_size: 20,
        d_model: 32,
        ssd: cheems::ssd::SsdConfig {
            d_model: 32,
            n_heads: 2,
            head_dim: 16,
            d_state: 16,
            chunk_len: 8,
            conv_width: 4,
        },
        attn: cheems::attention::AttnConfig {
            d_model: 32,
            n_heads: 2,
            head_dim: 16,
            ..attn_cfg(32, ValueMode::InnerSsd)
        },
        moe: cheems::cdmmoe::MoeConfig {
            d_model: 32,
            d_shared: 32,
            d_private: 16,
            n_experts: 64,
            top_k: 4,
            d_query: 16,
        },
        max_positions: 32,
        init_std: 0.2,
        ..cheems::model::ModelConfig::default()
    };
    for mode in PositionalMode::ALL {
        let mut model = Model::<f64>::build(&cheems::model::ModelConfig { positional_mode: mode, ..cfg.clone() }).unwrap();
        let tokens: Vec<usize> = (0..40).map(|i| (i * 7 + 1) % 20).collect();
        let targets: Vec<usize> = (0..40).map(|i| (i * 3 + 2) % 20).collect();
        let weights = vec![1.0; 40];
        let mut r = rng::stream(1, "grad.wide");
        let shadow = model.clone();
        let rep = check_params(&mut model.params, H, Some(3), &mut r, |_| false, |g| {
            let y = shadow.forward(g, &tokens, 2, 20)?;
            g.cross_entropy(y, &targets, &weights)
        })
        .unwrap();
        assert!(rep.passes(TOL), "{mode:?}: {rep:?}");
    }
}
