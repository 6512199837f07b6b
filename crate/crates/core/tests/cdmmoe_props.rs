mod common;

use cheems::cdmmoe::{cross_domain, exhaustive_top_k, product_top_k, MoeConfig, MoeLayer, MoeTrace};
use cheems::rng;
use cheems::{ParamId, ParamStore, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn layer(cfg: &MoeConfig, seed: u64) -> (ParamStore<f64>, MoeLayer) {
    let mut r = rng::stream(seed, "moe");
    let mut store = ParamStore::new();
    let l = MoeLayer::init(&mut store, "moe", cfg, &mut r, 0.5).unwrap();
    (store, l)
}

fn small(n: usize, k: usize) -> MoeConfig {
    MoeConfig {
        d_model: 6,
        d_shared: 8,
        d_private: 4,
        n_experts: n,
        top_k: k,
        d_query: 4,
    }
}

fn run(store: &ParamStore<f64>, l: &MoeLayer, x: &Tensor<f64>) -> (Vec<f64>, MoeTrace, Vec<f64>) {
    let mut g = store.bind();
    let xv = g.constant(x.clone());
    let mut t = MoeTrace::default();
    let y = l.forward_traced(&mut g, xv, Some(&mut t)).unwrap();
    let gate = g.value(t.gate.unwrap()).to_vec();
    (g.value(y).to_vec(), t, gate)
}

#[test]
fn product_keys_equal_exhaustive_scoring() {
    let mut r = rng::stream(0, "pk");
    for n in [16usize, 256, 4096] {
        let side = (n as f64).sqrt() as usize;
        for _ in 0..20 {
            let s1: Vec<f64> = (0..side).map(|_| r.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..side).map(|_| r.gen_range(-1.0..1.0)).collect();
            let k = 16.min(n);
            let a = product_top_k(&s1, &s2, k).unwrap();
            let b = exhaustive_top_k(&s1, &s2, k).unwrap();
            assert_eq!(a.len(), k);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!((x.index, x.score), (y.index, y.score));
                assert_eq!(x.index, x.i1 * side + x.i2);
            }
        }
    }
}

/// Brute force over all pairs with its own sort, independent of the
/// library's exhaustive scorer.
#[test]
fn full_size_retrieval_matches_pair_enumeration() {
    let cfg = MoeConfig {
        d_model: 8,
        d_shared: 8,
        d_private: 8,
        n_experts: 4096,
        top_k: 16,
        d_query: 8,
    };
    let (store, l) = layer(&cfg, 1);
    let mut r = rng::stream(1, "q");
    let half = cfg.d_query / 2;
    let keys = |id: ParamId| store.get(id).tensor.data().to_vec();
    let (k1, k2) = (keys(l.keys1), keys(l.keys2));
    for _ in 0..5 {
        let q: Vec<f64> = (0..cfg.d_query).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dot = |k: &[f64], row: usize, qh: &[f64]| (0..half).map(|e| k[row * half + e] * qh[e]).sum::<f64>();
        let mut all: Vec<(f64, usize)> = (0..4096)
            .map(|i| (dot(&k1, i / 64, &q[..half]) + dot(&k2, i % 64, &q[half..]), i))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let got = l.retrieve(&store, &q).unwrap();
        let want: Vec<usize> = all[..16].iter().map(|p| p.1).collect();
        assert_eq!(got.iter().map(|h| h.index).collect::<Vec<_>>(), want);
        for (h, p) in got.iter().zip(&all) {
            assert!((h.score - p.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_domain_matches_hand_loop() {
    let cfg = MoeConfig {
        d_model: 4,
        d_shared: 8,
        ..small(16, 4)
    };
    let (store, l) = layer(&cfg, 2);
    let mut r = rng::stream(2, "x");
    let x = randn(&mut r, &[3, 4]);
    let y = cross_domain(&l, &store, &x).unwrap();
    let (w, v) = (store.get(l.w_s).tensor.data(), store.get(l.v_s).tensor.data());
    for t in 0..3 {
        for u in 0..8 {
            let a: f64 = (0..4).map(|i| x.data()[t * 4 + i] * w[i * 8 + u]).sum();
            let b: f64 = (0..4).map(|i| x.data()[t * 4 + i] * v[i * 8 + u]).sum();
            assert!((y.data()[t * 8 + u] - a * silu(b)).abs() < 1e-12);
        }
    }
    assert!(cross_domain(&l, &store, &Tensor::zeros(&[2, 4])).unwrap().data().iter().all(|&v| v == 0.0));
    let mut closed = store.clone();
    closed.get_mut(l.v_s).tensor.data_mut().fill(0.0);
    assert!(cross_domain(&l, &closed, &x).unwrap().data().iter().all(|&v| v == 0.0));
}

/// Evaluates every expert for every token, then keeps the retrieved ones.
fn dense_reference(store: &ParamStore<f64>, l: &MoeLayer, x: &Tensor<f64>) -> Vec<f64> {
    let c = &l.config;
    let (m, s, p, n, dq) = (c.d_model, c.d_shared, c.d_private, c.n_experts, c.d_query);
    let side = c.sub_keys();
    let w = |id: ParamId| store.get(id).tensor.data().to_vec();
    let tokens = x.len() / m;
    let (ws, vs) = (matmul_loops(x.data(), &w(l.w_s), tokens, m, s), matmul_loops(x.data(), &w(l.v_s), tokens, m, s));
    let gated: Vec<f64> = ws.iter().zip(&vs).map(|(a, b)| a * silu(*b)).collect();
    let shared = matmul_loops(&gated, &w(l.w2_s), tokens, s, m);
    let xp = matmul_loops(&gated, &w(l.w_in), tokens, s, p);
    let q = matmul_loops(&xp, &w(l.w_query), tokens, p, dq);
    let (k1, k2, ew, ev, eu) = (w(l.keys1), w(l.keys2), w(l.expert_w), w(l.expert_v), w(l.expert_u));
    let half = dq / 2;
    let mut out = shared;
    for t in 0..tokens {
        let qt = &q[t * dq..(t + 1) * dq];
        let mut scores: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let a: f64 = (0..half).map(|e| k1[(i / side) * half + e] * qt[e]).sum();
                let b: f64 = (0..half).map(|e| k2[(i % side) * half + e] * qt[half + e]).sum();
                (a + b, i)
            })
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut keep = vec![None; n];
        let top = &scores[..c.top_k];
        let mx = top[0].0;
        let z: f64 = top.iter().map(|s| (s.0 - mx).exp()).sum();
        for s in top {
            keep[s.1] = Some((s.0 - mx).exp() / z);
        }
        let xt = &xp[t * p..(t + 1) * p];
        for i in 0..n {
            let a: f64 = (0..p).map(|e| xt[e] * ew[i * p + e]).sum();
            let b: f64 = (0..p).map(|e| xt[e] * ev[i * p + e]).sum();
            let contrib = keep[i].unwrap_or(0.0) * a * silu(b);
            for j in 0..m {
                out[t * m + j] += contrib * eu[i * m + j];
            }
        }
    }
    out
}

#[test]
fn forward_matches_dense_evaluation() {
    for seed in 0..3 {
        let (store, l) = layer(&small(16, 4), seed);
        let mut r = rng::stream(seed, "x");
        let x = randn(&mut r, &[1, 4, 6]);
        let (y, _, _) = run(&store, &l, &x);
        assert!(max_diff(&y, &dense_reference(&store, &l, &x)) < 1e-10);
    }
}

#[test]
fn dead_experts_leave_the_shared_path() {
    let (mut store, l) = layer(&small(16, 4), 4);
    store.get_mut(l.expert_u).tensor.data_mut().fill(0.0);
    let mut r = rng::stream(4, "x");
    let x = randn(&mut r, &[5, 6]);
    let (y, _, _) = run(&store, &l, &x);
    let gated = cross_domain(&l, &store, &x).unwrap();
    let shared = matmul_loops(gated.data(), store.get(l.w2_s).tensor.data(), 5, 8, 6);
    assert!(max_diff(&y, &shared) < 1e-12);
}

#[test]
fn single_expert_gets_unit_weight() {
    let cfg = small(1, 1);
    let (store, l) = layer(&cfg, 5);
    let mut r = rng::stream(5, "x");
    let x = randn(&mut r, &[2, 6]);
    let (y, trace, gate) = run(&store, &l, &x);
    assert_eq!(gate, vec![1.0, 1.0]);
    assert_eq!(trace.indices, vec![0, 0]);
    assert!(max_diff(&y, &dense_reference(&store, &l, &x)) < 1e-12);
}

#[test]
fn router_weights_are_a_distribution() {
    let (store, l) = layer(&small(64, 8), 6);
    let mut r = rng::stream(6, "x");
    let (_, _, gate) = run(&store, &l, &randn(&mut r, &[2, 5, 6]));
    for row in gate.chunks(8) {
        assert!(row.iter().all(|&g| g >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn expert_gradients_touch_only_retrieved_rows() {
    let (store, l) = layer(&small(64, 4), 7);
    let mut r = rng::stream(7, "x");
    let x = randn(&mut r, &[3, 6]);
    let probe = randn(&mut r, &[3, 6]);
    let mut g = store.bind();
    let xv = g.constant(x);
    let mut t = MoeTrace::default();
    let y = l.forward_traced(&mut g, xv, Some(&mut t)).unwrap();
    let loss = probe_loss(&mut g, y, &probe);
    let grads = g.backward(loss).unwrap();
    let hit: std::collections::HashSet<usize> = t.indices.iter().copied().collect();
    for (id, width) in [(l.expert_w, 4), (l.expert_v, 4), (l.expert_u, 6)] {
        let gr = grads.get(id.var()).unwrap();
        for (row, vals) in gr.chunks(width).enumerate() {
            let nonzero = vals.iter().any(|&v| v != 0.0);
            assert!(!nonzero || hit.contains(&row), "row {row} has gradient but was not retrieved");
            if ![l.expert_w, l.expert_v].contains(&id) {
                assert_eq!(nonzero, hit.contains(&row), "row {row}");
            }
        }
    }
}

#[test]
fn parameter_count_matches_enumeration() {
    let cfg = MoeConfig {
        d_model: 64,
        d_shared: 128,
        d_private: 32,
        n_experts: 16,
        top_k: 4,
        d_query: 16,
    };
    let (store, _) = layer(&cfg, 8);
    let walked: usize = store.iter().map(|p| p.tensor.data().len()).sum();
    let b = cfg.count_params();
    assert_eq!(b.total, walked);
    assert_eq!(b.shared, 3 * 64 * 128);
    assert_eq!(b.experts, 16 * (2 * 32 + 64));
    assert_eq!(b.shared + b.retrieval + b.experts, b.total);
}

#[test]
fn retrieval_is_deterministic() {
    let (store, l) = layer(&small(256, 8), 9);
    let mut r = rng::stream(9, "x");
    let x = randn(&mut r, &[4, 6]);
    let (_, a, _) = run(&store, &l, &x);
    let (_, b, _) = run(&store, &l, &x);
    assert_eq!(a.indices, b.indices);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn product_top_k_matches_exhaustive_with_ties(
        s1 in prop::collection::vec(-3i32..3, 8),
        s2 in prop::collection::vec(-3i32..3, 8),
        k in 1usize..=64,
    ) {
        let s1: Vec<f64> = s1.into_iter().map(f64::from).collect();
        let s2: Vec<f64> = s2.into_iter().map(f64::from).collect();
        let a = product_top_k(&s1, &s2, k).unwrap();
        let b = exhaustive_top_k(&s1, &s2, k).unwrap();
        prop_assert_eq!(a.iter().map(|h| h.index).collect::<Vec<_>>(), b.iter().map(|h| h.index).collect::<Vec<_>>());
    }
}
