//! End-to-end smoke tests for the `voltflow` binary: exit codes, artifact
//! layout, and the train → refine → generate → evaluate chain on a reduced
//! configuration.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voltflow"))
        .args(args)
        .output()
        .expect("binary is runnable")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Reduced configuration: tiny models, tiny corpora, few epochs.
const MINI_TOML: &str = r#"
seed = 3

[synth]
curve_len = 16

[velocity]
curve_len = 16
cond_hidden = 8
cond_embed = 4
trunk_width = 16
trunk_blocks = 1

[hierarchy]
curve_len = 16
hidden = 8
grid = [4.0, 43.0]

[fno]
width = 4
modes = 3
layers = 2

[data]
pretrain_per_domain = 24
pretrain_temps = [4.0, 24.0, 43.0]
target_train = 24
eval_per_group = 8

[training]
epochs_pretrain = 4
epochs_train = 2
epochs_refine = 2
steps_per_epoch = 2
batch_size = 4
refine_pool = 8
refine_sample_steps = 4

[eval]
ode_steps = 6
n_mc = 4
disc_per_group = 2
"#;

fn write_mini_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{MINI_TOML}\n{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["train", "--help"][..]] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    }
    assert!(stdout(&run(&["--help"])).contains("voltflow"));
}

#[test]
fn usage_errors_exit_one() {
    // unknown subcommand
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    // flag missing its value
    let out = run(&["synth", "--config"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    // no subcommand at all
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn missing_config_file_exits_one() {
    let out = run(&["synth", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
    assert!(stderr(&out).contains("--help"), "usage hint expected: {}", stderr(&out));
}

#[test]
fn invalid_config_value_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[training]\nlr_train = 0.0\n").unwrap();
    let out = run(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("lr_train"), "{}", stderr(&out));
}

#[test]
fn synth_writes_all_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_mini_config(tmp.path(), "");
    let out_dir = tmp.path().join("out");
    let out = run(&["synth", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for file in ["pretrain.csv", "train.csv", "eval_near.csv", "eval_train.csv"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let pretrain = std::fs::read_to_string(out_dir.join("pretrain.csv")).unwrap();
    assert!(pretrain.starts_with("battery_id,temperature_c,cycle,"), "{pretrain}");
    // header + 24 waveforms per domain x 2 domains
    assert_eq!(pretrain.lines().count(), 1 + 48);
}

#[test]
fn train_refine_generate_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_mini_config(tmp.path(), "");
    let dir = tmp.path().join("out");
    let dir_s = dir.to_str().unwrap().to_owned();

    // `train` chains stage 1 when no checkpoint exists yet.
    let out = run(&["train", "--config", &config, "--out", &dir_s]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.join("stage1.json").exists());
    assert!(dir.join("stage2.json").exists());
    assert!(dir.join("pretrain_report.json").exists());
    assert!(dir.join("train_trace.json").exists());

    let out = run(&["refine", "--config", &config, "--out", &dir_s]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.join("stage3.json").exists());
    assert!(dir.join("refine_diagnostics.json").exists());

    let out = run(&["generate", "--config", &config, "--out", &dir_s]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for group in ["near", "low1", "low2", "high1", "high2", "train"] {
        let path = dir.join(format!("generated_{group}.csv"));
        assert!(path.exists(), "missing {}", path.display());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 8, "8 generated waveforms per group");
        assert!(text.contains("gen-"), "generated ids are marked");
    }

    let out = run(&["evaluate", "--config", &config, "--out", &dir_s]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("rmse held-out mean"), "{table}");
    assert!(table.contains("discrimination accuracy"), "{table}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse_held_out_mean"].as_f64().unwrap().is_finite());
    assert!(dir.join("metrics.txt").exists());
    assert!(dir.join("features_near.csv").exists());
}

#[test]
fn disabled_stages_without_checkpoints_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_mini_config(
        tmp.path(),
        "[stages]\npretrain = false\ntrain = false\nrefine = false\n",
    );
    let dir = tmp.path().join("out");
    let out = run(&["evaluate", "--config", &config, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("stage2.json"), "{}", stderr(&out));
}

#[test]
fn divergent_learning_rate_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let toml =
        MINI_TOML.replace("epochs_pretrain = 4", "epochs_pretrain = 1\nlr_train = 1e200");
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, toml).unwrap();
    let dir = tmp.path().join("out");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn seed_override_changes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_mini_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "11")] {
        let out = run(&[
            "synth",
            "--config",
            &config,
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let read = |d: &Path| std::fs::read_to_string(d.join("pretrain.csv")).unwrap();
    assert_eq!(read(&a), read(&b), "same seed, same corpus");
    assert_ne!(read(&a), read(&c), "different seed, different corpus");
}
