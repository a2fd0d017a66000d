//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thinkact::commands;
use thinkact::config::RunConfig;
use thinkact::data::{build_dataset, policy_vocab, validate_schema, write_dataset, DataConfig, Source, DATASET_FILE};
use thinkact::env::SuiteConfig;
use thinkact::eval::{evaluate, measure_latency, run_ablation_suite, AblationConfig, CotMode, EvalConfig};
use thinkact::model::{forward, ModelConfig, PolicySnapshot, PolicyStep, SequenceLayout, BOS, THINK_CLOSE, THINK_OPEN};
use thinkact::optim::Adam;
use thinkact::rl::{
    clipped_surrogate, collect_rollouts, compute_group_advantage, grpo_gradient, grpo_step, is_clipped, kl_penalty,
    objective_from_parts, surrogate_on_tape, GrpoConfig, RewardConfig, RlMetrics, Trajectory, METRICS_FILE,
};
use thinkact::tensor::gradcheck::check_all;
use thinkact::{Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1

fn autodiff() -> Outcome {
    let reports = check_all(100, 0).map_err(err)?;
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    for r in &reports {
        ensure(r.instances >= 100, format!("{} ran {} instances", r.name, r.instances))?;
        ensure(r.max_rel_error < 1e-4, format!("{} rel error {:.3e}", r.name, r.max_rel_error))?;
    }
    Ok(format!("{} primitives x 100, worst {} {:.2e}", reports.len(), worst.name, worst.max_rel_error))
}

// 2

fn mask_independence() -> Outcome {
    let suite = SuiteConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut witnessed = 0;
    let layouts = 60;
    for i in 0..layouts {
        let cfg = ModelConfig {
            init_seed: i,
            ..ModelConfig::default()
        };
        let snap = PolicySnapshot::init(cfg.clone(), policy_vocab(&suite, cfg.bins).map_err(err)?).map_err(err)?;
        let v = snap.vocab().clone();
        let (text, ar) = (v.text_range(), v.action_range());
        let slots = cfg.action_slots();
        let p = rng.random_range(1..20);
        let inner = rng.random_range(0..=cfg.max_cot_len - 2);
        let mut tokens = vec![BOS];
        tokens.extend((1..p).map(|_| rng.random_range(text.clone())));
        tokens.push(THINK_OPEN);
        tokens.extend((0..inner).map(|_| rng.random_range(text.clone())));
        tokens.push(THINK_CLOSE);
        tokens.extend((0..slots).map(|_| rng.random_range(ar.clone())));
        let layout = SequenceLayout::new(p, inner + 2, slots);
        let ctx = layout.context_len();
        let base = forward(&snap, &tokens, layout).map_err(err)?;

        let slot = rng.random_range(0..slots);
        let mut pert = tokens.clone();
        pert[ctx + slot] = if pert[ctx + slot] == ar.start { ar.start + 1 } else { ar.start };
        let out = forward(&snap, &pert, layout).map_err(err)?;
        for q in 0..ctx {
            ensure(base.row(q) == out.row(q), format!("layout {i}: action slot leaked into row {q}"))?;
        }
        if (0..slots).any(|s| s != slot && base.row(ctx + s) != out.row(ctx + s)) {
            witnessed += 1;
        }

        let t = rng.random_range(p..ctx);
        let mut pert = tokens.clone();
        pert[t] = if pert[t] == text.start { text.start + 1 } else { text.start };
        let out = forward(&snap, &pert, layout).map_err(err)?;
        for q in p..t {
            ensure(base.row(q) == out.row(q), format!("layout {i}: trace token {t} leaked into row {q}"))?;
        }
    }
    ensure(witnessed > 0, "no action slot ever saw another slot")?;
    Ok(format!("{layouts} layouts exact, cross-slot dependence in {witnessed}"))
}

// 3

fn parallel_decoding(sft_ckpt: Option<&Path>) -> Outcome {
    let suite = SuiteConfig::default();
    let snap = match sft_ckpt {
        Some(p) => PolicySnapshot::load(p).map_err(err)?,
        None => PolicySnapshot::init(ModelConfig::default(), policy_vocab(&suite, 256).map_err(err)?).map_err(err)?,
    };
    let c = snap.config();
    ensure(c.chunk_len == 5 && c.action_dim == 3, "not at default h and d")?;
    let (report, timing) = measure_latency(&snap, &suite, 50).map_err(err)?;
    ensure(report.hybrid.action_passes_per_chunk == 1, format!("hybrid {}", report.hybrid.action_passes_per_chunk))?;
    ensure(
        report.ar_emulation.action_passes_per_chunk == 15,
        format!("ar {}", report.ar_emulation.action_passes_per_chunk),
    )?;
    ensure(
        timing.hybrid_action_seconds < timing.ar_action_seconds,
        format!("hybrid {:.4}s vs ar {:.4}s", timing.hybrid_action_seconds, timing.ar_action_seconds),
    )?;
    Ok(format!(
        "passes 1 vs 15; action block {:.4}s vs {:.4}s ({:.1}x)",
        timing.hybrid_action_seconds,
        timing.ar_action_seconds,
        timing.ar_action_seconds / timing.hybrid_action_seconds
    ))
}

// 4

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn surrogate_grad(z: &[f64], tok: usize, behavior: f64, adv: f64, cfg: &GrpoConfig) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let zv = tape.leaf(Arc::new(Tensor::matrix(1, z.len(), z.to_vec()).map_err(err)?), true);
    let lp = tape.log_softmax(zv).map_err(err)?;
    let g = tape.gather(lp, &[(0, tok)]).map_err(err)?;
    let (s, _) = surrogate_on_tape(&mut tape, g, &[behavior], adv, cfg.eps_low, cfg.eps_high).map_err(err)?;
    let grads = tape.backward(s).map_err(err)?;
    Ok(grads.get(zv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; z.len()]))
}

fn check_advantages(rewards: &[f64]) -> Result<(), String> {
    let a = compute_group_advantage(rewards);
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std <= 1e-6 {
        return ensure(a.iter().all(|&x| x == 0.0), format!("degenerate group {rewards:?} not zeroed"));
    }
    let am = a.iter().sum::<f64>() / n;
    let astd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / n).sqrt();
    ensure(am.abs() < 1e-9 && (astd - 1.0).abs() < 1e-9, format!("group {rewards:?}: mean {am:e} std {astd}"))
}

fn grpo_math() -> Outcome {
    let cfg = GrpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let g = rng.random_range(2..17);
        let rewards: Vec<f64> = match rng.random_range(0..3) {
            0 => vec![[0.0, 0.1, 1.1][rng.random_range(0..3)]; g],
            1 => (0..g).map(|_| [0.0, 0.1, 1.0, 1.1][rng.random_range(0..4)]).collect(),
            _ => (0..g).map(|_| rng.random_range(0.0..1.1)).collect(),
        };
        check_advantages(&rewards)?;
    }

    let h = 1e-5;
    let mut worst_clip: f64 = 0.0;
    for _ in 0..200 {
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tok = rng.random_range(0..6);
        let upper = rng.random::<bool>();
        let ratio: f64 = if upper {
            rng.random_range(1.0 + cfg.eps_high + 0.05..3.0)
        } else {
            rng.random_range(0.2..1.0 - cfg.eps_low - 0.05)
        };
        let adv = if upper { rng.random_range(0.1..2.0) } else { -rng.random_range(0.1..2.0) };
        ensure(is_clipped(ratio, adv, cfg.eps_low, cfg.eps_high), "instance not clipped")?;
        let behavior = log_softmax(&z)[tok] - ratio.ln();
        let scalar = |z: &[f64]| {
            let w = (log_softmax(z)[tok] - behavior).exp();
            clipped_surrogate(&[w], adv, cfg.eps_low, cfg.eps_high)[0]
        };
        let g = surrogate_grad(&z, tok, behavior, adv, &cfg)?;
        for k in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let fd = (scalar(&zp) - scalar(&zm)) / (2.0 * h);
            worst_clip = worst_clip.max(fd.abs()).max(g[k].abs());
        }
    }
    ensure(worst_clip < 1e-8, format!("clipped gradient {worst_clip:e}"))?;

    let suite = SuiteConfig::default();
    let tiny = |seed: u64| -> Result<PolicySnapshot, String> {
        let mc = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            mlp_dim: 16,
            bins: 16,
            init_std: 0.3,
            init_seed: seed,
            ..ModelConfig::default()
        };
        PolicySnapshot::init(mc, policy_vocab(&suite, 16).map_err(err)?).map_err(err)
    };
    let mut snap = tiny(1)?;
    let reference = snap.clone();
    let group = collect_rollouts(&snap, &suite, &suite.tasks()[2], 4, 5, 1.0, &RewardConfig::default()).map_err(err)?;
    check_advantages(&group.rewards())?;
    let steps: Vec<PolicyStep> = group.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.policy_step())).collect();
    let kl0 = kl_penalty(&snap, &reference, &steps).map_err(err)?;
    ensure(kl0 == 0.0, format!("kl at init {kl0:e}"))?;
    for seed in 2..12 {
        let kl = kl_penalty(&tiny(seed)?, &reference, &steps).map_err(err)?;
        ensure(kl >= 0.0, format!("negative kl {kl:e}"))?;
    }

    let advs = [1.0, -1.0, 0.5, -0.5];
    let batch: Vec<(&Trajectory, f64)> = group.trajectories.iter().zip(advs).collect();
    let train = GrpoConfig {
        learning_rate: 5e-3,
        ..GrpoConfig::default()
    };
    let mut opt = Adam::new(snap.params(), train.adam);
    let mut worst_obj: f64 = 0.0;
    for _ in 0..4 {
        let (stats, _) = grpo_gradient(&batch, &snap, &reference, &train).map_err(err)?;
        let recomputed = objective_from_parts(&stats.ratios, &stats.advantages, stats.kl, &train);
        worst_obj = worst_obj.max((stats.objective - recomputed).abs());
        ensure(stats.kl >= 0.0, "negative kl during training")?;
        grpo_step(&batch, &mut snap, &reference, &mut opt, &train).map_err(err)?;
    }
    ensure(worst_obj < 1e-10, format!("objective mismatch {worst_obj:e}"))?;
    Ok(format!("500 groups, 200 clipped FD max {worst_clip:.1e}, objective mismatch {worst_obj:.1e}"))
}

// 5

fn data_pipeline() -> Outcome {
    let suite = SuiteConfig::default();
    let model = ModelConfig::default();
    let data = DataConfig { n_demos: 100, seed: 0 };
    let ds = build_dataset(&suite, &data, &model).map_err(err)?;
    ensure(ds.demos.len() == 100, format!("{} demos kept", ds.demos.len()))?;
    for (i, demo) in ds.demos.iter().enumerate() {
        let flags: Vec<bool> = demo.records.iter().map(|r| r.gripper_open).collect();
        let toggles: Vec<usize> = (1..flags.len()).filter(|&k| flags[k] != flags[k - 1]).collect();
        ensure(toggles.len() == 2, format!("demo {i}: {} gripper toggles", toggles.len()))?;
        ensure(flags[0] && !flags[toggles[0]] && flags[toggles[1]], format!("demo {i}: not grasp then release"))?;
        let expect: BTreeSet<usize> = [0, toggles[0], toggles[1], flags.len() - 1].into_iter().collect();
        let got: BTreeSet<usize> = ds
            .records
            .iter()
            .filter(|r| r.demo == i && r.source == Source::Keyframe)
            .map(|r| r.frame_idx)
            .collect();
        ensure(got == expect, format!("demo {i}: keyframes {got:?} expected {expect:?}"))?;
    }
    for r in &ds.records {
        validate_schema(&r.cot_tokens, model.max_cot_len).map_err(|e| format!("record {r:?}: {e}"))?;
    }
    ensure(ds.manifest.schema_rejections.is_empty(), format!("rejections {:?}", ds.manifest.schema_rejections))?;
    ensure(ds.manifest.temporal_drops == 0, format!("{} temporal drops", ds.manifest.temporal_drops))?;
    let dirs = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    write_dataset(dirs.0.path(), &ds).map_err(err)?;
    write_dataset(dirs.1.path(), &build_dataset(&suite, &data, &model).map_err(err)?).map_err(err)?;
    let diffs = diff_trees(dirs.0.path(), dirs.1.path(), &[])?;
    ensure(diffs.is_empty(), format!("rerun differs: {diffs:?}"))?;
    Ok(format!("100 demos, {} records, byte-identical rerun", ds.records.len()))
}

// 6

struct SftRun {
    checkpoint: PathBuf,
    sr: f64,
}

fn greedy_sr(ckpt: &Path, suite: &SuiteConfig) -> Result<f64, String> {
    let snap = PolicySnapshot::load(ckpt).map_err(err)?;
    Ok(evaluate(&snap, suite, &EvalConfig::default()).map_err(err)?.report.average_sr)
}

fn end_to_end_sft(out: &Path, slot: &mut Option<SftRun>) -> Outcome {
    let mut cfg = RunConfig::default();
    let data_dir = commands::datagen(&cfg, out).map_err(err)?;
    cfg.sft.dataset = Some(data_dir.join(DATASET_FILE));
    let run = commands::sft(&cfg, out).map_err(err)?;
    let checkpoint = run.join("final.ckpt");
    let sr = greedy_sr(&checkpoint, &cfg.suite)?;
    *slot = Some(SftRun { checkpoint, sr });
    ensure(sr >= 0.80, format!("greedy sr {sr:.3} < 0.80"))?;
    Ok(format!("500 demos, greedy sr {sr:.3} over 10 tasks x 20 conditions"))
}

// 7

fn rl_improvement(out: &Path, sft: &SftRun, finals: &mut Vec<PathBuf>) -> Outcome {
    let base = RunConfig::default();
    let mut rewards: Vec<Vec<f64>> = Vec::new();
    let mut deltas = Vec::new();
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.rl.seed = seed;
        let dir = commands::rl(&cfg, &sft.checkpoint, out).map_err(err)?;
        let text = std::fs::read_to_string(dir.join(METRICS_FILE)).map_err(err)?;
        let metrics: Vec<RlMetrics> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(err)?;
        rewards.push(metrics.iter().map(|m| m.mean_reward).collect());
        let ckpt = dir.join("final.ckpt");
        deltas.push(greedy_sr(&ckpt, &base.suite)? - sft.sr);
        finals.push(ckpt);
    }
    let improved = deltas.iter().filter(|&&d| d >= 0.02 - 1e-9).count();
    let iters = rewards[0].len();
    let mean: Vec<f64> = (0..iters).map(|i| rewards.iter().map(|r| r[i]).sum::<f64>() / 3.0).collect();
    let windows: Vec<f64> = mean.chunks_exact(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let monotone = windows.windows(2).all(|w| w[1] >= w[0]);
    let detail = format!(
        "sr deltas {:?} pp, windows {:?}",
        deltas.iter().map(|d| (d * 1000.0).round() / 10.0).collect::<Vec<_>>(),
        windows.iter().map(|w| (w * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure(improved >= 2, format!("only {improved} of 3 seeds gained 2pp; {detail}"))?;
    ensure(windows.len() >= 2 && monotone, format!("smoothed reward decreases; {detail}"))?;
    Ok(detail)
}

// 8

fn cot_ablation(sft: &SftRun, rl: Option<&Path>) -> Outcome {
    let suite = SuiteConfig::default();
    let sft_snap = PolicySnapshot::load(&sft.checkpoint).map_err(err)?;
    let rl_snap = match rl {
        Some(p) => PolicySnapshot::load(p).map_err(err)?,
        None => return Err("no rl checkpoint".into()),
    };
    let cfg = AblationConfig::default();
    ensure(cfg.seeds.len() == 3, "ablation needs 3 seeds")?;
    let (report, _) = run_ablation_suite(&sft_snap, &rl_snap, &suite, &cfg).map_err(err)?;
    let mut detail = Vec::new();
    let mut failures = Vec::new();
    for policy in ["sft", "rl"] {
        let sr = |m| report.row(policy, m).map(|r| r.sr_mean).ok_or(format!("missing {policy} row"));
        let (full, mask, random) = (sr(CotMode::Full)?, sr(CotMode::Mask)?, sr(CotMode::Random)?);
        detail.push(format!("{policy} full {full:.3} mask {mask:.3} random {random:.3}"));
        if random >= mask {
            failures.push(format!("{policy}: random >= mask"));
        }
        if (full - mask).abs() > 0.05 + 1e-9 {
            failures.push(format!("{policy}: mask {:.1}pp from full", (full - mask).abs() * 100.0));
        }
    }
    let detail = detail.join("; ");
    ensure(failures.is_empty(), format!("{}; {detail}", failures.join(", ")))?;
    Ok(detail)
}

// 9

fn diff_trees(a: &Path, b: &Path, skip: &[&str]) -> Result<Vec<String>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let (mut fa, mut fb) = (BTreeSet::new(), BTreeSet::new());
    walk(a, a, &mut fa).map_err(err)?;
    walk(b, b, &mut fb).map_err(err)?;
    let mut diffs: Vec<String> = fa.symmetric_difference(&fb).map(|p| format!("only in one: {}", p.display())).collect();
    for rel in fa.intersection(&fb) {
        if skip.iter().any(|s| rel.file_name().is_some_and(|n| n == *s)) {
            continue;
        }
        if std::fs::read(a.join(rel)).map_err(err)? != std::fs::read(b.join(rel)).map_err(err)? {
            diffs.push(rel.display().to_string());
        }
    }
    Ok(diffs)
}

const SMALL: &str = r#"
[data]
n_demos = 10

[model]
layers = 1
heads = 2
model_dim = 16
mlp_dim = 32
B = 32

[sft]
steps = 20
batch_size = 4
checkpoint_every = 10

[rl]
group_size = 2
iterations = 2
minibatch_size = 8
epochs = 1
eval_conditions = 1
checkpoint_every = 1

[eval]
n_conditions = 2

[ablation]
n_conditions = 1
seeds = [0, 1]

[latency]
chunks = 5
"#;

fn run_every_command(cfg: &RunConfig, out: &Path) -> Result<usize, String> {
    let mut count = 0;
    commands::datagen(cfg, out).map_err(err)?;
    let sft = commands::sft(cfg, out).map_err(err)?.join("final.ckpt");
    let rl = commands::rl(cfg, &sft, out).map_err(err)?.join("final.ckpt");
    for mode in [CotMode::Full, CotMode::Mask, CotMode::Random] {
        let mut c = cfg.clone();
        c.eval.cot_mode = mode;
        commands::eval(&c, &rl, out).map_err(err)?;
        count += 1;
    }
    commands::ablate(cfg, &sft, &rl, out).map_err(err)?;
    commands::latency(cfg, &rl, out).map_err(err)?;
    Ok(count + 5)
}

fn determinism() -> Outcome {
    let cfg = RunConfig::from_toml(SMALL, Path::new("small.toml")).map_err(err)?;
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let runs = run_every_command(&cfg, a.path())?;
    run_every_command(&cfg, b.path())?;
    let diffs = diff_trees(a.path(), b.path(), &[commands::TIMING_FILE])?;
    ensure(diffs.is_empty(), format!("differing outputs: {diffs:?}"))?;
    let mut files = BTreeSet::new();
    for e in std::fs::read_dir(a.path()).map_err(err)? {
        files.insert(e.map_err(err)?.file_name());
    }
    Ok(format!("{runs} command runs into {} run dirs, byte-identical outside timing.json", files.len()))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {name}: {tag} ({secs:.1}s) {detail}");
    result.is_ok()
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let out = work.path().to_path_buf();
    let mut ok = Vec::new();
    let mut sft: Option<SftRun> = None;
    let mut finals = Vec::new();

    ok.push(report(1, "autodiff", autodiff));
    ok.push(report(2, "hybrid mask independence", mask_independence));
    ok.push(report(4, "grpo math", grpo_math));
    ok.push(report(5, "data pipeline", data_pipeline));
    ok.push(report(6, "end-to-end sft", || end_to_end_sft(&out, &mut sft)));
    let ckpt = sft.as_ref().map(|s| s.checkpoint.clone());
    ok.push(report(3, "parallel decoding", || parallel_decoding(ckpt.as_deref())));
    ok.push(report(7, "rl improvement", || match &sft {
        Some(s) => rl_improvement(&out, s, &mut finals),
        None => Err("no sft checkpoint".into()),
    }));
    ok.push(report(8, "trace ablation", || match &sft {
        Some(s) => cot_ablation(s, finals.first().map(|p| p.as_path())),
        None => Err("no sft checkpoint".into()),
    }));
    ok.push(report(9, "determinism", determinism));

    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed == ok.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
