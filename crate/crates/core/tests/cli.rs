//! Drives the binary end to end on a tiny model.

use std::path::Path;
use std::process::{Command, Output};

use blockdiff::trainer::TrainConfig;

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_blockdiff")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "blockdiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps: 12,
        checkpoint_every: 5,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        ..TrainConfig::default()
    }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_sample_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("config.txt");
    let ckpt = dir.path().join("run");
    std::fs::write(&config, tiny_config().to_text()).unwrap();

    run(&["gen-data", "--out", path(&data), "--episodes", "5", "--seed", "3"]);
    run(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&ckpt)]);

    let log = std::fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,mask_fraction_mean,wall_ms"));
    assert_eq!(lines.count(), 12);

    let eval = run(&["eval", "--ckpt", path(&ckpt), "--episodes", "2"]);
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("success "));

    for decoder in ["block", "full", "ar"] {
        let out = run(&["sample", "--ckpt", path(&ckpt), "--decoder", decoder, "--steps", "3"]);
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        assert_eq!(text.lines().count(), 3, "{decoder}: {text}");
    }
    let no_cache = run(&["sample", "--ckpt", path(&ckpt), "--no-cache"]);
    let cached = run(&["sample", "--ckpt", path(&ckpt)]);
    assert_eq!(no_cache.stdout, cached.stdout);

    let csv = dir.path().join("bench.csv");
    run(&["bench", "--ckpt", path(&ckpt), "--trials", "2", "--warmup", "1", "--csv", path(&csv)]);
    let report = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("config.txt");
    let ckpt = dir.path().join("run");
    run(&["gen-data", "--out", path(&data), "--episodes", "3", "--seed", "4"]);

    std::fs::write(&config, TrainConfig { steps: 5, ..tiny_config() }.to_text()).unwrap();
    run(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&ckpt)]);
    std::fs::write(&config, TrainConfig { steps: 8, ..tiny_config() }.to_text()).unwrap();
    run(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&ckpt), "--resume"]);

    let log = std::fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6", "7", "8"]);
}

#[test]
fn dump_masks_prints_a_grid() {
    let out = run(&["dump-masks", "--kind", "diffusion", "--prefix-len", "1", "--blocks", "2", "--block-len", "1"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1000\n1100\n1110\n1111\n");
}

#[test]
fn rejects_a_config_with_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.txt");
    std::fs::write(&config, format!("{}bogus = 1\n", tiny_config().to_text())).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_blockdiff"))
        .args(["train", "--config", path(&config), "--data", "missing.csv", "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
