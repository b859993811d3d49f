//! End-to-end runs of the `caplab` binary against a throwaway output
//! root, covering the happy path and the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use caplab::config::RunConfig;

fn caplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caplab"))
        .args(args)
        .output()
        .expect("the binary should run")
}

fn tiny_config(name: &str) -> RunConfig {
    let mut config = RunConfig {
        run_name: name.to_string(),
        seed: 5,
        ..RunConfig::default()
    };
    config.world.n_train_pairs = 8;
    config.world.n_eval_pairs = 10;
    config.world.max_objects = 10;
    config.captioner.embed_dim = 8;
    config.captioner.hidden_dim = 12;
    config.captioner.max_len = 8;
    config.adaptation.k_propositions = 2;
    config.adaptation.epochs = 1;
    config.adaptation.batch_size = 4;
    config.train.epochs = 2;
    config.train.batch_size = 4;
    config.train.warmup_steps = 3;
    config.inference.m_captions = 2;
    config.inference.top_k = 3;
    config.eval.seeds = vec![11];
    config.eval.reliability_levels = vec![1.0];
    config.eval.caption_counts = vec![1, 2];
    config.eval.level_variants = vec![2, 4];
    config
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join(format!("{}.json", config.run_name));
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_runs_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let config_path = write_config(tmp.path(), &tiny_config("smoke"));

    let gen = caplab(&["gen-data", "--config", &config_path, "--out", out, "--threads", "2"]);
    assert_eq!(gen.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&gen.stderr));
    let stdout = String::from_utf8_lossy(&gen.stdout);
    assert!(stdout.contains("generated 8 train and 10 eval pairs"), "stdout: {stdout}");

    let train = caplab(&["train", "--config", &config_path, "--out", out]);
    assert_eq!(train.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&train.stderr));
    assert!(String::from_utf8_lossy(&train.stdout).contains("best epoch"));

    let eval = caplab(&["eval", "--config", &config_path, "--out", out]);
    assert_eq!(eval.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mean consensus score"));

    let analyze = caplab(&["analyze", "--config", &config_path, "--out", out]);
    assert_eq!(analyze.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&analyze.stderr));
    assert!(String::from_utf8_lossy(&analyze.stdout).contains("confidence correlation"));

    let ablate = caplab(&["ablate", "--config", &config_path, "--out", out]);
    assert_eq!(ablate.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ablate.stderr));
    assert!(String::from_utf8_lossy(&ablate.stdout).contains("objective cells"));

    let run_dir = tmp.path().join("runs/smoke");
    for artifact in [
        "config.json",
        "dataset.jsonl",
        "checkpoints/best.json",
        "history.csv",
        "report.json",
        "analysis.json",
        "ablations.json",
        "curves/objective_grid.csv",
    ] {
        assert!(run_dir.join(artifact).is_file(), "missing {artifact}");
    }
}

#[test]
fn exit_codes_separate_config_and_data_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();

    // Evaluating a run that was never generated is a data failure.
    let config_path = write_config(tmp.path(), &tiny_config("absent"));
    let eval = caplab(&["eval", "--config", &config_path, "--out", out]);
    assert_eq!(eval.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&eval.stderr).contains("gen-data"));

    // Training before data generation is too, with a pointer forward.
    let gen = caplab(&["gen-data", "--config", &config_path, "--out", out]);
    assert_eq!(gen.status.code(), Some(0));
    fs::remove_file(tmp.path().join("runs/absent/dataset.jsonl")).unwrap();
    let train = caplab(&["train", "--config", &config_path, "--out", out]);
    assert_eq!(train.status.code(), Some(3));

    // Recreating an existing run without --force is refused.
    let again = caplab(&["gen-data", "--config", &config_path, "--out", out]);
    assert_eq!(again.status.code(), Some(3));
    let forced = caplab(&["gen-data", "--config", &config_path, "--out", out, "--force"]);
    assert_eq!(forced.status.code(), Some(0));

    // An out-of-range setting is a config failure.
    let mut bad = tiny_config("bad");
    bad.train.alpha = 2.0;
    let bad_path = write_config(tmp.path(), &bad);
    let gen = caplab(&["gen-data", "--config", &bad_path, "--out", out]);
    assert_eq!(gen.status.code(), Some(2));

    // So are an unreadable and an unparsable config file.
    let gen = caplab(&["gen-data", "--config", "/nonexistent.json", "--out", out]);
    assert_eq!(gen.status.code(), Some(2));
    let garbled = tmp.path().join("garbled.json");
    fs::write(&garbled, "{not json").unwrap();
    let gen = caplab(&["gen-data", "--config", garbled.to_str().unwrap(), "--out", out]);
    assert_eq!(gen.status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let config_path = write_config(tmp.path(), &tiny_config("seeded"));

    let first = caplab(&["gen-data", "--config", &config_path, "--out", out]);
    assert_eq!(first.status.code(), Some(0));
    let baseline = fs::read(tmp.path().join("runs/seeded/dataset.jsonl")).unwrap();

    let reseeded = caplab(&["gen-data", "--config", &config_path, "--out", out, "--force", "--seed", "99"]);
    assert_eq!(reseeded.status.code(), Some(0));
    let changed = fs::read(tmp.path().join("runs/seeded/dataset.jsonl")).unwrap();
    assert_ne!(baseline, changed, "the seed override must reach the generator");
}
