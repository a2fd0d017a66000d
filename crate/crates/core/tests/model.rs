use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thinkact::model::{
    build_hybrid_mask, decode_actions_autoregressive, decode_actions_parallel, forward, generate_cot,
    sequence_logprobs, ActionTokenizer, Decoding, ModelConfig, PolicySnapshot, PolicyStep, PrefixAttention,
    SequenceLayout, VocabSpec, ACT_QUERY, BOS, THINK_CLOSE, THINK_OPEN,
};

fn vocab(bins: usize) -> VocabSpec {
    let words = ["move", "to", "block", "zone_a", "gripper", "at", ";", "subtask", "approach", "(1,2)"];
    VocabSpec::new(words.iter().map(|s| s.to_string()).collect(), bins).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        mlp_dim: 24,
        chunk_len: 2,
        action_dim: 3,
        bins: 8,
        max_cot_len: 8,
        max_context: 24,
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

fn snapshot(seed: u64) -> PolicySnapshot {
    let cfg = ModelConfig {
        init_seed: seed,
        ..small_config()
    };
    PolicySnapshot::init(cfg, vocab(8)).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, v: &VocabSpec, n: usize) -> Vec<usize> {
    let r = v.text_range();
    (0..n).map(|_| rng.random_range(r.clone())).collect()
}

/// Per-cell statement of the three attention rules.
fn rule(layout: SequenceLayout, q: usize, k: usize) -> bool {
    let p = layout.prefix_len;
    let c = layout.context_len();
    if q < p {
        k < p
    } else if q < c {
        k <= q
    } else {
        true
    }
}

#[test]
fn mask_matches_per_cell_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let layout = SequenceLayout::new(rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..6));
        let m = build_hybrid_mask(layout, PrefixAttention::Bidirectional);
        for q in 0..layout.total() {
            for k in 0..layout.total() {
                assert_eq!(m.allowed(q, k), rule(layout, q, k), "{layout:?} q={q} k={k}");
            }
        }
    }
}

#[test]
fn zero_weights_give_uniform_logits() {
    let snap = PolicySnapshot::zeros(small_config(), vocab(8)).unwrap();
    let layout = SequenceLayout::new(3, 2, 6);
    let mut tokens = vec![BOS, 6, 7, THINK_OPEN, THINK_CLOSE];
    tokens.extend([ACT_QUERY; 6]);
    let logits = forward(&snap, &tokens, layout).unwrap();
    let first = logits.values()[0];
    assert!(logits.values().iter().all(|&l| l == first));
}

#[test]
fn forward_rejects_length_mismatch() {
    let snap = snapshot(0);
    assert!(forward(&snap, &[BOS, 6], SequenceLayout::new(3, 0, 0)).is_err());
}

#[test]
fn mask_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let snap = snapshot(3);
    let v = snap.vocab().clone();
    let slots = snap.config().action_slots();
    let mut witnessed = false;
    for _ in 0..20 {
        let p = rng.random_range(1..6);
        let inner = rng.random_range(0..4);
        let mut tokens = vec![BOS];
        tokens.extend(random_text(&mut rng, &v, p - 1));
        tokens.push(THINK_OPEN);
        tokens.extend(random_text(&mut rng, &v, inner));
        tokens.push(THINK_CLOSE);
        let layout = SequenceLayout::new(p, inner + 2, slots);
        let ar = v.action_range();
        tokens.extend((0..slots).map(|_| rng.random_range(ar.clone())));
        let base = forward(&snap, &tokens, layout).unwrap();
        let ctx = layout.context_len();

        let mut pert = tokens.clone();
        let slot = rng.random_range(0..slots);
        let j = ctx + slot;
        pert[j] = if pert[j] == ar.start { ar.start + 1 } else { ar.start };
        let out = forward(&snap, &pert, layout).unwrap();
        for q in 0..ctx {
            assert_eq!(base.row(q), out.row(q), "action perturbation leaked into row {q}");
        }
        if (0..slots).any(|s| s != slot && base.row(ctx + s) != out.row(ctx + s)) {
            witnessed = true;
        }

        let t = rng.random_range(p..ctx);
        let mut pert = tokens.clone();
        pert[t] = if pert[t] == 6 { 7 } else { 6 };
        let out = forward(&snap, &pert, layout).unwrap();
        for q in p..t {
            assert_eq!(base.row(q), out.row(q), "reasoning token {t} leaked into row {q}");
        }
    }
    assert!(witnessed, "no action slot ever saw another slot");
}

#[test]
fn greedy_cot_matches_rescoring() {
    let snap = snapshot(5);
    let prefix = vec![BOS, 6, 7, 8];
    let out = generate_cot(&snap, &prefix, 8, &mut Decoding::Greedy).unwrap();
    assert_eq!(out.tokens[0], THINK_OPEN);
    assert_eq!(*out.tokens.last().unwrap(), THINK_CLOSE);
    let generated = out.tokens.len() - 1 - usize::from(out.truncated);
    for t in 1..=generated {
        let mut seq = prefix.clone();
        seq.extend_from_slice(&out.tokens[..t]);
        let logits = forward(&snap, &seq, SequenceLayout::new(prefix.len(), t, 0)).unwrap();
        let row = logits.row(seq.len() - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(out.tokens[t], best, "token {t}");
    }
    let again = generate_cot(&snap, &prefix, 8, &mut Decoding::Greedy).unwrap();
    assert_eq!(out, again);
}

#[test]
fn cot_length_two_is_empty_trace() {
    let snap = snapshot(6);
    let out = generate_cot(&snap, &[BOS, 6], 2, &mut Decoding::Greedy).unwrap();
    assert_eq!(out.tokens, vec![THINK_OPEN, THINK_CLOSE]);
}

#[test]
fn parallel_decode_is_one_pass_and_argmax() {
    let snap = snapshot(7);
    let context = vec![BOS, 6, 7, THINK_OPEN, 8, THINK_CLOSE];
    let before = snap.forward_passes();
    let dec = decode_actions_parallel(&snap, &context, 3, &mut Decoding::Greedy).unwrap();
    assert_eq!(snap.forward_passes() - before, 1);
    let slots = snap.config().action_slots();
    assert_eq!(dec.tokens.len(), slots);

    let mut input = context.clone();
    input.extend(std::iter::repeat_n(ACT_QUERY, slots));
    let logits = forward(&snap, &input, SequenceLayout::new(3, 3, slots)).unwrap();
    let ar = snap.vocab().action_range();
    for (i, &tok) in dec.tokens.iter().enumerate() {
        let row = &logits.row(6 + i)[ar.clone()];
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        assert_eq!(tok, ar.start + best);
    }

    let before = snap.forward_passes();
    let (chunk, tokens) = decode_actions_autoregressive(&snap, &context, 3).unwrap();
    assert_eq!(snap.forward_passes() - before, slots as u64);
    assert_eq!(tokens.len(), slots);
    assert_eq!((chunk.horizon, chunk.dims), (2, 3));
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let z: f64 = row.iter().map(|l| l.exp()).sum();
    row[k] - z.ln()
}

#[test]
fn logprobs_match_per_position_rescoring() {
    let snap = snapshot(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ar = snap.vocab().action_range();
    let step = PolicyStep {
        prefix: vec![BOS, 6, 7],
        cot: vec![THINK_OPEN, 8, 9, THINK_CLOSE],
        actions: (0..6).map(|_| rng.random_range(ar.clone())).collect(),
    };
    let got = sequence_logprobs(&snap, &step).unwrap();
    assert_eq!(got.len(), 3 + 6);
    let mut expect = Vec::new();
    for t in 1..step.cot.len() {
        let mut seq = step.prefix.clone();
        seq.extend_from_slice(&step.cot[..t]);
        let logits = forward(&snap, &seq, SequenceLayout::new(3, t, 0)).unwrap();
        expect.push(log_softmax_at(logits.row(seq.len() - 1), step.cot[t]));
    }
    let logits = forward(&snap, &step.model_input(), step.layout()).unwrap();
    for (i, &a) in step.actions.iter().enumerate() {
        expect.push(log_softmax_at(logits.row(7 + i), a));
    }
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn uniform_model_logprobs() {
    let snap = PolicySnapshot::zeros(small_config(), vocab(8)).unwrap();
    let step = PolicyStep {
        prefix: vec![BOS],
        cot: vec![THINK_OPEN, 6, THINK_CLOSE],
        actions: vec![snap.vocab().action_token(0); 6],
    };
    let ln_v = (snap.vocab().size() as f64).ln();
    for lp in sequence_logprobs(&snap, &step).unwrap() {
        assert!((lp + ln_v).abs() < 1e-12);
    }
}

#[test]
fn sampled_generation_is_seeded() {
    let snap = snapshot(10);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec = Decoding::Sample {
            temperature: 1.0,
            rng: &mut rng,
        };
        generate_cot(&snap, &[BOS, 6], 8, &mut dec).unwrap()
    };
    assert_eq!(run(1), run(1));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    let snap = snapshot(11);
    snap.save(&path).unwrap();
    let back = PolicySnapshot::load(&path).unwrap();
    assert!(snap.same_parameters(&back));
    assert_eq!(snap.config(), back.config());
    let tokens = [BOS, 6, THINK_OPEN, THINK_CLOSE];
    let layout = SequenceLayout::new(2, 2, 0);
    assert_eq!(
        forward(&snap, &tokens, layout).unwrap().values(),
        forward(&back, &tokens, layout).unwrap().values()
    );
}

#[test]
fn action_round_trip_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tok = ActionTokenizer::new(256).unwrap();
    for _ in 0..1000 {
        let values: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let back = tok.detokenize(&tok.tokenize(&values).unwrap()).unwrap();
        for (v, b) in values.iter().zip(&back) {
            assert!((v - b).abs() <= tok.bin_width() / 2.0 + 1e-12);
        }
    }
}
