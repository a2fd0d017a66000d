use thinkact::data::{build_dataset, policy_vocab, CotRecord, DataConfig};
use thinkact::env::SuiteConfig;
use thinkact::model::{bind_params, forward_on_tape, ActionTokenizer, ModelConfig, PolicySnapshot, VocabSpec, THINK_CLOSE};
use thinkact::sft::{
    batch_gradient, build_examples, build_training_example, train_sft, LrSchedule, SftConfig, TrainingExample,
    METRICS_FILE,
};
use thinkact::Tape;

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        model_dim: 16,
        mlp_dim: 24,
        bins: 16,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

fn fixture(n_demos: usize) -> (Vec<CotRecord>, VocabSpec, ModelConfig) {
    let suite = SuiteConfig::default();
    let model = small_model();
    let ds = build_dataset(&suite, &DataConfig { n_demos, seed: 4 }, &model).unwrap();
    (ds.records, policy_vocab(&suite, model.bins).unwrap(), model)
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

#[test]
fn supervision_covers_trace_and_action_slots() {
    let (records, vocab, model) = fixture(1);
    for r in &records {
        let ex = build_training_example(r, &vocab, &model).unwrap();
        let p = ex.layout.prefix_len;
        assert_eq!(count(&ex.loss_mask), r.cot_tokens.len() - 1 + model.action_slots());
        assert_eq!(count(&ex.cot_mask()), r.cot_tokens.len() - 1);
        assert_eq!(count(&ex.action_mask()), model.action_slots());
        assert!(ex.loss_mask[..p].iter().all(|&m| !m));
        assert_eq!(ex.targets[ex.layout.context_len() - 2], THINK_CLOSE);
        assert!(!ex.loss_mask[ex.layout.context_len() - 1]);
    }
}

#[test]
fn action_targets_round_trip_to_bins() {
    let (records, vocab, model) = fixture(2);
    let tok = ActionTokenizer::new(model.bins).unwrap();
    for r in &records {
        let ex = build_training_example(r, &vocab, &model).unwrap();
        let start = ex.layout.action_start();
        let bins: Vec<usize> = ex.targets[start..].iter().map(|&t| vocab.bin_of(t).unwrap()).collect();
        assert_eq!(bins, r.action_tokens);
        assert_eq!(tok.tokenize(&tok.detokenize(&bins).unwrap()).unwrap(), bins);
    }
}

#[test]
fn prefix_logits_get_zero_gradient() {
    let (records, vocab, model) = fixture(1);
    let snap = PolicySnapshot::init(model, vocab.clone()).unwrap();
    let ex = build_training_example(&records[0], &vocab, snap.config()).unwrap();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &snap, true);
    let out = forward_on_tape(&mut tape, &snap, &bound, &ex.tokens, ex.layout).unwrap();
    let logits = tape.leaf(std::sync::Arc::new(tape.value(out).clone()), true);
    let loss = tape.cross_entropy(logits, &ex.targets, &ex.loss_mask).unwrap();
    let g = tape.backward(loss).unwrap();
    let grad = g.get(logits).unwrap();
    let v = vocab.size();
    for pos in 0..ex.layout.prefix_len {
        assert!(grad[pos * v..(pos + 1) * v].iter().all(|&x| x == 0.0), "position {pos}");
    }
    let first = ex.layout.prefix_len * v;
    assert!(grad[first..first + v].iter().any(|&x| x != 0.0));
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let (records, vocab, model) = fixture(1);
    let snap = PolicySnapshot::zeros(model, vocab.clone()).unwrap();
    let ex = build_examples(&records[..4], &vocab, snap.config());
    let (m, _) = batch_gradient(&ex, &snap, &SftConfig::default()).unwrap();
    let ln_v = (vocab.size() as f64).ln();
    assert!((m.loss - ln_v).abs() < 1e-12, "{} vs {}", m.loss, ln_v);
    assert!((m.cot_loss - ln_v).abs() < 1e-12);
    assert!((m.action_loss - ln_v).abs() < 1e-12);
}

#[test]
fn loss_decomposes_into_token_weighted_parts() {
    let (records, vocab, model) = fixture(1);
    let snap = PolicySnapshot::init(model, vocab.clone()).unwrap();
    let ex = build_examples(&records[..6], &vocab, snap.config());
    let n_c: usize = ex.iter().map(|e| count(&e.cot_mask())).sum();
    let n_a: usize = ex.iter().map(|e| count(&e.action_mask())).sum();
    let cfg = SftConfig {
        cot_weight: 0.3,
        action_weight: 2.0,
        ..SftConfig::default()
    };
    let (m, _) = batch_gradient(&ex, &snap, &cfg).unwrap();
    let expect = (0.3 * m.cot_loss * n_c as f64 + 2.0 * m.action_loss * n_a as f64) / (n_c + n_a) as f64;
    assert!((m.loss - expect).abs() < 1e-12);
}

#[test]
fn one_forward_pass_per_example() {
    let (records, vocab, model) = fixture(1);
    let snap = PolicySnapshot::init(model, vocab.clone()).unwrap();
    let ex = build_examples(&records[..5], &vocab, snap.config());
    let before = snap.forward_passes();
    batch_gradient(&ex, &snap, &SftConfig::default()).unwrap();
    assert_eq!(snap.forward_passes() - before, 5);
}

#[test]
fn empty_trace_supervises_actions_only() {
    let (records, vocab, model) = fixture(1);
    let ex = build_training_example(&records[0], &vocab, &model).unwrap();
    let e = ex.with_empty_cot();
    assert_eq!(e.layout.cot_len, 2);
    assert_eq!(count(&e.cot_mask()), 0);
    assert_eq!(count(&e.action_mask()), model.action_slots());
    assert_eq!(&e.targets[e.layout.action_start()..], &ex.targets[ex.layout.action_start()..]);
}

#[test]
fn overfits_a_single_example() {
    let (records, vocab, model) = fixture(1);
    let snap = PolicySnapshot::init(model, vocab.clone()).unwrap();
    let ex: Vec<TrainingExample> = build_examples(&records[..1], &vocab, snap.config());
    let cfg = SftConfig {
        batch_size: 1,
        learning_rate: 1e-2,
        steps: 500,
        cot_dropout: 0.0,
        schedule: LrSchedule::Constant,
        checkpoint_every: 0,
        ..SftConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train_sft(&cfg, snap, &ex, dir.path()).unwrap();
    let first = out.metrics.iter().position(|m| m.loss < 0.01);
    assert!(first.is_some(), "final loss {}", out.metrics.last().unwrap().loss);
}

#[test]
fn training_is_deterministic() {
    let (records, vocab, model) = fixture(1);
    let ex = build_examples(&records, &vocab, &model);
    let cfg = SftConfig {
        batch_size: 4,
        steps: 12,
        checkpoint_every: 5,
        ..SftConfig::default()
    };
    let run = |dir: &std::path::Path| {
        let snap = PolicySnapshot::init(model.clone(), vocab.clone()).unwrap();
        train_sft(&cfg, snap, &ex, dir).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert!(ra.snapshot.same_parameters(&rb.snapshot));
    assert_eq!(
        std::fs::read(a.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(b.path().join(METRICS_FILE)).unwrap()
    );
    assert_eq!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rb.checkpoint).unwrap());
    assert!(a.path().join("checkpoints/step-000005.ckpt").exists());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(LrSchedule::Cosine.rate(1.0, 0, 11), 1.0);
    assert!((LrSchedule::Cosine.rate(1.0, 10, 11) - 0.1).abs() < 1e-15);
    assert!((LrSchedule::Cosine.rate(1.0, 5, 11) - 0.55).abs() < 1e-12);
    assert_eq!(LrSchedule::Constant.rate(0.3, 7, 11), 0.3);
}

#[test]
fn rejects_bad_config() {
    assert!(SftConfig { batch_size: 0, ..SftConfig::default() }.validate().is_err());
    assert!(SftConfig { cot_dropout: 1.5, ..SftConfig::default() }.validate().is_err());
    assert!(SftConfig::default().validate().is_ok());
}
