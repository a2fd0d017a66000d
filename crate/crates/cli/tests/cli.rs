use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &str = r#"
[data]
n_demos = 4

[model]
layers = 1
heads = 2
model_dim = 16
mlp_dim = 16
B = 16

[sft]
steps = 3
batch_size = 4
checkpoint_every = 0

[rl]
group_size = 2
iterations = 1
minibatch_size = 8
epochs = 1
eval_conditions = 1
checkpoint_every = 0

[eval]
n_conditions = 1

[ablation]
n_conditions = 1
seeds = [0]

[latency]
chunks = 3
"#;

fn thinkact(args: &[&str]) -> PathBuf {
    let out = Command::new(env!("CARGO_BIN_EXE_thinkact")).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn run_all(root: &Path, config: &Path) -> Vec<PathBuf> {
    let c = config.to_str().unwrap();
    let o = root.to_str().unwrap();
    let data = thinkact(&["datagen", "--config", c, "--out", o]);
    let sft = thinkact(&["sft", "--config", c, "--out", o]);
    let ckpt = sft.join("final.ckpt");
    let rl = thinkact(&["rl", "--config", c, "--init", ckpt.to_str().unwrap(), "--out", o]);
    let rl_ckpt = rl.join("final.ckpt");
    let eval = thinkact(&["eval", "--config", c, "--checkpoint", ckpt.to_str().unwrap(), "--cot-mode", "mask", "--out", o]);
    let ablate = thinkact(&[
        "ablate",
        "--config",
        c,
        "--sft",
        ckpt.to_str().unwrap(),
        "--rl",
        rl_ckpt.to_str().unwrap(),
        "--out",
        o,
    ]);
    let latency = thinkact(&["latency", "--config", c, "--checkpoint", ckpt.to_str().unwrap(), "--out", o]);
    vec![data, sft, rl, eval, ablate, latency]
}

#[test]
fn every_command_runs_and_writes_its_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let dirs = run_all(&tmp.path().join("runs"), &config);
    let names = ["datagen", "sft", "rl", "eval", "ablate", "latency"];
    for (d, n) in dirs.iter().zip(names) {
        let base = d.file_name().unwrap().to_str().unwrap();
        assert!(base.starts_with(&format!("{n}-")) && base.len() == n.len() + 13, "{base}");
        assert!(d.join("config.toml").exists());
    }
    assert!(dirs[0].join("dataset.jsonl").exists());
    assert!(dirs[1].join("metrics.jsonl").exists());
    assert!(dirs[2].join("training.svg").exists());
    assert!(dirs[3].join("report.json").exists());
    assert!(dirs[4].join("ablation.md").exists());
    assert!(dirs[5].join("latency.json").exists());
}

#[test]
fn seed_flag_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let c = config.to_str().unwrap();
    let o = tmp.path().to_str().unwrap();
    let a = thinkact(&["datagen", "--config", c, "--out", o]);
    let b = thinkact(&["datagen", "--config", c, "--seed", "9", "--out", o]);
    assert_ne!(a, b);
    assert!(std::fs::read_to_string(b.join("config.toml")).unwrap().contains("seed = 9"));
}

#[test]
fn bad_config_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[sft]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_thinkact"))
        .args(["datagen", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
