use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[model]
t_p = 4
t_f = 4
d_model = 16
heads = 2
ffn_mult = 2
d_c = 16
encoder_layers = 1
denoiser_layers = 2
scorer_heads = 2
scorer_d_head = 8
scorer_d = 16
scorer_mlp = 16
[diffusion]
steps = 20
skip = 4
samples = 12
[selection]
k = 4
[eval]
k_values = [1, 4]
[synthetic]
scenes = 12
[train]
batch_size = 4
[bench]
steps = [20, 5]
samples = [4, 8]
warmup = 0
repeats = 2
max_scenes = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajdiff"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "synth-data", "--out", "d.jsonl"]);
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--run-dir", "r", "train-denoiser", "--data", "d.jsonl", "--epochs", "2"]);
    ok(d, &["--run-dir", "r", "train-scorer", "--data", "d.jsonl", "--epochs", "1"]);
    let summary = ok(d, &["--run-dir", "r", "predict", "--data", "d.jsonl", "--select", "all"]);
    assert!(summary.contains("nms") && summary.contains("fills"), "{summary}");
    let table = ok(d, &["--run-dir", "r", "evaluate", "--data", "d.jsonl"]);
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].contains("minFDE_4"));
    assert!(rows[1].starts_with("random") && rows[2].starts_with("coverage") && rows[3].starts_with("nms"));
    let bench = ok(d, &["--run-dir", "r", "bench", "--data", "d.jsonl", "--select", "coverage"]);
    assert_eq!(bench.lines().count(), 5, "{bench}");
    for f in [
        "config.toml",
        "stage1.ckpt",
        "scorer.ckpt",
        "predictions.jsonl",
        "report.txt",
        "report.json",
        "report_scenes.jsonl",
        "bench.json",
        "logs/train-denoiser.jsonl",
        "logs/train-scorer.jsonl",
    ] {
        assert!(d.join("r").join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(d.join("r/logs/train-denoiser.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string());
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--run-dir", "full", "train-denoiser", "--data", "d.jsonl", "--epochs", "3"]);
    ok(d, &["--config", "tiny.toml", "--run-dir", "part", "train-denoiser", "--data", "d.jsonl", "--epochs", "2"]);
    ok(
        d,
        &["--config", "tiny.toml", "--run-dir", "part", "train-denoiser", "--data", "d.jsonl", "--epochs", "3", "--resume", "part/stage1.ckpt"],
    );
    let last = |run: &str| {
        let log = std::fs::read_to_string(d.join(run).join("logs/train-denoiser.jsonl")).unwrap();
        log.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["event"] == "epoch")
            .last()
            .unwrap()
    };
    assert_eq!(last("full")["epoch"], 2);
    assert_eq!(last("full")["loss"], last("part")["loss"]);
    let full = std::fs::read(d.join("full/stage1.ckpt")).unwrap();
    let part = std::fs::read(d.join("part/stage1.ckpt")).unwrap();
    assert_eq!(full, part);
}

#[test]
fn random_selection_is_reproducible_from_the_seed() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--run-dir", "r", "train-denoiser", "--data", "d.jsonl", "--epochs", "1"]);
    let preds = |seed: &str, out: &str| {
        ok(d, &["--run-dir", "r", "--seed", seed, "predict", "--data", "d.jsonl", "--select", "random", "--out", out]);
        std::fs::read_to_string(d.join(out))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["indices"].clone(), v["trajectories"].clone())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(preds("5", "a.jsonl"), preds("5", "b.jsonl"));
    assert_ne!(preds("5", "a.jsonl"), preds("6", "c.jsonl"));
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = setup();
    let d = dir.path();
    let code = |args: &[&str]| run(d, args).status.code();
    // configuration
    assert_eq!(code(&["--config", "tiny.toml", "--set", "diffusion.skip=7", "synth-data", "--out", "x.jsonl"]), Some(2));
    assert_eq!(code(&["--set", "model.nonsense=1", "synth-data", "--out", "x.jsonl"]), Some(2));
    assert_eq!(code(&["--config", "tiny.toml", "--run-dir", "none", "predict", "--data", "d.jsonl"]), Some(2));
    assert_eq!(code(&["bogus-command"]), Some(2));
    // data
    assert_eq!(code(&["--config", "tiny.toml", "train-denoiser", "--data", "missing.jsonl"]), Some(3));
    std::fs::write(d.join("bad.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&["--config", "tiny.toml", "train-denoiser", "--data", "bad.jsonl"]), Some(3));
    // numeric: a learning rate this large diverges within the first epoch
    let out = run(
        d,
        &["--config", "tiny.toml", "--run-dir", "boom", "train-denoiser", "--data", "d.jsonl", "--epochs", "3", "--lr", "1e300"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_rejects_step_counts_that_do_not_divide() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--run-dir", "r", "train-denoiser", "--data", "d.jsonl", "--epochs", "1"]);
    let out = run(d, &["--run-dir", "r", "bench", "--data", "d.jsonl", "--select", "random", "--steps-grid", "20,3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not divide"));
}
