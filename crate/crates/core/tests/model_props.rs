mod common;

use cheems::harness::{Batch, MqarConfig, Schedule, TaskConfig, TrainConfig, Trainer};
use cheems::model::{LayerKind, Model, ModelConfig};
use cheems::ssd::PositionalMode;
use common::*;
use rand::Rng;

const MODES: [PositionalMode; 3] = [PositionalMode::Rope, PositionalMode::GateOnly, PositionalMode::ConvPlusD];

fn logits(m: &Model<f64>, tokens: &[usize]) -> Vec<f64> {
    m.logits(tokens, 1, tokens.len()).unwrap().data().to_vec()
}

#[test]
fn two_blocks_follow_the_seven_to_one_pattern() {
    let cfg = ModelConfig {
        n_cheems_blocks: 2,
        ..tiny_model(PositionalMode::Rope)
    };
    let m = Model::<f64>::build(&cfg).unwrap();
    let kinds: Vec<LayerKind> = m.manifest.iter().map(|e| e.kind).collect();
    let count = |k| kinds.iter().filter(|&&x| x == k).count();
    assert_eq!((count(LayerKind::Ssd), count(LayerKind::Attn), count(LayerKind::Moe)), (14, 2, 16));
    let mixers = m.mixer_kinds();
    for (i, k) in mixers.iter().enumerate() {
        assert_eq!(*k == LayerKind::Attn, i % 8 == 7, "mixer {i}");
    }
    assert_eq!(mixers.last(), Some(&LayerKind::Attn));
    // every mixer is followed by a moe
    for pair in kinds[1..33].chunks(2) {
        assert!(matches!(pair[0], LayerKind::Ssd | LayerKind::Attn));
        assert_eq!(pair[1], LayerKind::Moe);
    }
}

#[test]
fn parameter_count_matches_hand_tally() {
    // d 8, two heads of 4, state 4, moe 8/4/16/4
    let ssd = 8 * 8 + 2 * 8 * 4 + 8 * 2 + 2 + 2 + 8 * 8 + 8;
    let attn = 3 * 8 * 8 + (ssd - 8) + 8;
    let moe = 3 * 8 * 8 + 8 * 4 + 4 * 4 + 2 * 4 * 2 + 16 * (2 * 4 + 8) + 8;
    let ends = 11 * 8 + 8 + 8 * 11;
    let want = ends + 7 * ssd + attn + 8 * moe;
    for mode in [PositionalMode::Rope, PositionalMode::GateOnly] {
        let m = Model::<f64>::build(&tiny_model(mode)).unwrap();
        let walked: usize = m.params.iter().map(|p| p.tensor.len()).sum();
        assert_eq!(m.count_params(), want);
        assert_eq!(walked, want);
    }
    let conv = Model::<f64>::build(&tiny_model(PositionalMode::ConvPlusD)).unwrap();
    assert_eq!(conv.count_params(), want + 7 * (8 * 4 + 2));
}

#[test]
fn causal_in_every_mode() {
    let mut r = cheems::rng::stream(0, "tokens");
    let tokens: Vec<usize> = (0..16).map(|_| r.gen_range(0..11)).collect();
    for mode in MODES {
        let m = Model::<f64>::build(&tiny_model(mode)).unwrap();
        let base = logits(&m, &tokens);
        for t in 0..16 {
            let mut p = tokens.clone();
            p[t] = (p[t] + 1) % 11;
            let y = logits(&m, &p);
            assert_eq!(&y[..t * 11], &base[..t * 11], "{mode:?} position {t}");
        }
    }
}

#[test]
fn build_and_forward_are_deterministic() {
    let tokens: Vec<usize> = (0..12).map(|i| (i * 5) % 11).collect();
    for mode in MODES {
        let a = Model::<f64>::build(&tiny_model(mode)).unwrap();
        let b = Model::<f64>::build(&tiny_model(mode)).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert_eq!(logits(&a, &tokens), logits(&a, &tokens));
        assert_eq!(logits(&a, &tokens), logits(&b, &tokens));
    }
}

#[test]
fn attention_free_control_keeps_budget_close() {
    let main = Model::<f64>::build(&ModelConfig::default()).unwrap();
    let control = Model::<f64>::build(&ModelConfig {
        attention_free: true,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(!control.mixer_kinds().contains(&LayerKind::Attn));
    let (a, b) = (main.count_params() as f64, control.count_params() as f64);
    assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
}

#[test]
fn overfits_a_fixed_set() {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_cheems_blocks: 2,
        ssd: cheems::ssd::SsdConfig {
            head_dim: 8,
            ..ssd_cfg(16, 4)
        },
        attn: cheems::attention::AttnConfig {
            head_dim: 8,
            ..attn_cfg(16, cheems::attention::ValueMode::InnerSsd)
        },
        moe: moe_cfg(16),
        max_positions: 16,
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let mut m = Model::<f32>::build(&cfg).unwrap();
    let mut r = cheems::rng::stream(1, "data");
    let seqs: Vec<Vec<usize>> = (0..32).map(|_| (0..9).map(|_| r.gen_range(0..11)).collect()).collect();
    let batch = Batch {
        inputs: seqs.iter().flat_map(|s| s[..8].to_vec()).collect(),
        targets: seqs.iter().flat_map(|s| s[1..].to_vec()).collect(),
        weights: vec![true; 32 * 8],
        batch: 32,
        len: 8,
    };
    let tc = TrainConfig {
        batch_size: 32,
        schedule: Schedule {
            max_lr: 1e-2,
            min_lr: 1e-3,
            warmup_frac: 0.05,
            total_steps: 200,
        },
        task: TaskConfig::Mqar(MqarConfig {
            vocab: 10,
            n_pairs: 2,
            n_queries: 1,
            seq_len: 9,
        }),
        record_throughput: false,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&mut m, &tc, 0).unwrap();
    let first = tr.step_on(&batch).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = tr.step_on(&batch).unwrap().loss;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}
