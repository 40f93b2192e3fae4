use std::path::Path;
use std::process::Command;

use tdrop::checkpoint::Checkpoint;
use tdrop::config::RunConfig;
use tdrop::encoder::ModelConfig;
use tdrop::pretrain::TrainConfig;
use tdrop::probe::ProbeSettings;

fn tdrop(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tdrop"))
        .args(args)
        .env_remove("TDROP_SEED")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    tdrop(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, n: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let args = [
        "gen-data", "--out", p(&out), "--utterances", n, "--frames", "16", "--phoneme-classes", "4",
        "--speakers", "3", "--seed", seed, "--mel-dims", "6",
    ];
    assert_eq!(code(&args), 0);
    out
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        model: ModelConfig {
            d_mel: 6,
            layers: 1,
            d_attn: 8,
            heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            total_steps: 6,
            batch_size: 2,
            log_interval: 1,
            ..TrainConfig::default()
        },
        probe: ProbeSettings {
            phoneme_classes: 4,
            speaker_classes: 3,
            hidden_dim: 8,
            steps: 20,
            batch_size: 16,
            ..ProbeSettings::default()
        },
        ..RunConfig::default()
    };
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "7", "4");
    let b = gen(dir.path(), "b", "7", "4");
    let c = gen(dir.path(), "c", "7", "5");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn gen_data_with_no_utterances_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(dir.path(), "empty", "0", "0");
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.trim(), "utterance_id,file,frames,split");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["pretrain", "--data", "x"]), 2);
    assert_eq!(code(&["probe", "--ckpt", "a", "--data", "b", "--task", "nonsense", "--out", "c"]), 2);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"dim": 3}}"#).unwrap();
    let data = gen(dir.path(), "d", "3", "0");
    assert_eq!(code(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("m"))]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nowhere");
    let out = dir.path().join("m.tdck");
    assert_eq!(code(&["pretrain", "--config", p(&cfg), "--data", p(&missing), "--out", p(&out)]), 3);

    let data = gen(dir.path(), "d", "6", "0");
    std::fs::write(data.join("utt_00000.fbnk"), b"FBNK\x01\0\0\0").unwrap();
    assert_eq!(code(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]), 3);

    let junk = dir.path().join("junk.tdck");
    std::fs::write(&junk, b"TDCK\x09\0\0\0").unwrap();
    let data = gen(dir.path(), "e", "6", "0");
    let results = dir.path().join("r.csv");
    assert_eq!(code(&["probe", "--ckpt", p(&junk), "--data", p(&data), "--task", "speaker-utt", "--out", p(&results)]), 3);
}

#[test]
fn mismatched_feature_width_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let path = dir.path().join("wide.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = gen(dir.path(), "d", "3", "0");
    assert_eq!(code(&["pretrain", "--config", p(&path), "--data", p(&data), "--out", p(&dir.path().join("m"))]), 2);
}

#[test]
fn pretrain_then_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen(dir.path(), "d", "20", "1");
    let ckpt = dir.path().join("m.tdck");
    assert_eq!(code(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]), 0);

    let metrics = std::fs::read_to_string(dir.path().join("m.tdck.metrics.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = metrics.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 6);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 3);
        assert_eq!(r[0], i.to_string());
        assert!(r[1].parse::<f32>().unwrap().is_finite());
    }

    let before = std::fs::read(&ckpt).unwrap();
    let sum = Checkpoint::load(&ckpt).unwrap().encoder().unwrap().params().checksum();
    let results = dir.path().join("results.csv");
    for task in ["phoneme-linear", "phoneme-hidden", "speaker-frame", "speaker-utt"] {
        let args = ["probe", "--ckpt", p(&ckpt), "--data", p(&data), "--task", task, "--out", p(&results), "--config", p(&cfg)];
        assert_eq!(code(&args), 0, "{task}");
    }
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert_eq!(Checkpoint::load(&ckpt).unwrap().encoder().unwrap().params().checksum(), sum);

    let text = std::fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "strategy,lambda_attn,lambda_layer,task,accuracy");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], "attention_then_layer");
        let acc: f64 = f[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn seed_variable_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen(dir.path(), "corpus", "6", "2");
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdrop"));
        cmd.args(["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
        match seed {
            Some(s) => cmd.env("TDROP_SEED", s),
            None => cmd.env_remove("TDROP_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a", Some("9")), run("b", Some("9")));
    assert_ne!(run("c", Some("9")), run("d", None));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdrop"));
    cmd.args(["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("e"))]);
    assert_eq!(cmd.env("TDROP_SEED", "abc").output().unwrap().status.code(), Some(2));
}

#[test]
fn sweep_writes_a_row_per_run_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen(dir.path(), "d", "20", "3");
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"runs": [{"strategy": "none", "lambda_attn": 0.8, "lambda_layer": 0.6},
                     {"strategy": "layer_only", "lambda_attn": 0.8, "lambda_layer": 0.4}],
            "tasks": ["speaker-utt", "phoneme-linear"]}"#,
    )
    .unwrap();
    let out = dir.path().join("sweep.csv");
    assert_eq!(code(&["sweep", "--config", p(&cfg), "--grid", p(&grid), "--out", p(&out), "--data", p(&data)]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("none,0.8,0.6,speaker-utt,"));
    assert!(lines[4].starts_with("layer_only,0.8,0.4,phoneme-linear,"));
}
