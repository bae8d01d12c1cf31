//! End-to-end tests of the `forecast` binary: exit codes, config
//! resolution, artifact layout and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn forecast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forecast"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// A small three-class corpus plus the flags that keep the model tiny,
/// shared by the training-path tests.
fn gen_small_corpus(dir: &Path) -> PathBuf {
    let out = forecast(
        dir,
        &["gen-data", "--out", "corpus", "--seed", "7", "--classes", "3", "--dim", "6",
          "--informative", "3"],
    );
    assert_eq!(exit_code(&out), 0, "gen-data failed: {}", stderr(&out));
    dir.join("corpus").join("manifest.txt")
}

const SMALL_MODEL: [&str; 16] = [
    "--dh", "8", "--tfixed", "8", "--nf", "4", "--embed", "4", "--heads", "2", "--dff", "8",
    "--batch", "16", "--lr", "0.003",
];

#[test]
fn gen_data_writes_a_corpus_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = forecast(
        dir.path(),
        &["gen-data", "--out", "corpus", "--seed", "7", "--classes", "8", "--dim", "32"],
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("seed = 7"), "{text}");
    assert!(text.contains("classes = 8"), "{text}");
    assert!(dir.path().join("corpus/manifest.txt").is_file());
    assert!(dir.path().join("corpus/resolved.cfg").is_file());
    // The manifest indexes existing files.
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.txt")).unwrap();
    assert!(manifest.starts_with("fseq-manifest v1 N=8 d=32"), "{manifest}");
    assert!(manifest.lines().count() > 100, "three splits of sequences");
}

#[test]
fn train_then_eval_produces_checkpoints_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_small_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    let mut args = vec!["train", "--manifest", manifest, "--out", "run", "--epochs", "2",
                        "--seed", "1", "--pq", "30:30"];
    args.extend_from_slice(&SMALL_MODEL);
    let out = forecast(dir.path(), &args);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("beta = 0.5"), "echoes paper default: {text}");
    assert!(text.contains("epoch=1 "), "{text}");
    for artifact in ["best.fafc", "last.fafc", "train.log", "resolved.cfg"] {
        assert!(dir.path().join("run").join(artifact).is_file(), "{artifact} missing");
    }

    let mut args = vec!["eval", "--manifest", manifest, "--checkpoint", "run/best.fafc",
                        "--pq", "30:30,30:50", "--workers", "2"];
    args.extend_from_slice(&SMALL_MODEL[..12]); // model flags only
    let out = forecast(dir.path(), &args);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    assert!(report.starts_with("p,q,mean_per_class_acc\n"), "{report}");
    assert_eq!(report.lines().count(), 3, "two cells: {report}");
    assert!(stdout(&out).contains("mean"), "prints the table");
}

#[test]
fn identical_invocations_write_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_small_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();
    for run in ["a", "b"] {
        let mut args = vec!["train", "--manifest", manifest, "--out", run, "--epochs", "2",
                            "--seed", "9", "--pq", "30:30"];
        args.extend_from_slice(&SMALL_MODEL);
        let out = forecast(dir.path(), &args);
        assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    }
    for artifact in ["best.fafc", "last.fafc", "train.log"] {
        let a = std::fs::read(dir.path().join("a").join(artifact)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}

#[test]
fn config_file_fills_gaps_but_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_small_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# test config\nbeta = 0.25\nepochs = 1\n")
        .unwrap();

    let mut args = vec!["train", "--manifest", manifest, "--out", "run", "--config", "run.cfg",
                        "--beta", "0.75", "--seed", "1", "--pq", "30:30"];
    args.extend_from_slice(&SMALL_MODEL);
    let out = forecast(dir.path(), &args);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("beta = 0.75"), "flag beats file: {text}");
    assert!(text.contains("epochs = 1"), "file beats default: {text}");
    let resolved = std::fs::read_to_string(dir.path().join("run/resolved.cfg")).unwrap();
    assert!(resolved.contains("beta = 0.75"), "{resolved}");
}

#[test]
fn duplicate_config_keys_name_both_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "beta = 0.5\nmask = 10\nbeta = 0.7\n").unwrap();
    let out = forecast(dir.path(), &["grad-check", "--config", "bad.cfg"]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("duplicate key `beta`"), "{err}");
    assert!(err.contains("lines 1 and 3"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "betamax = 1\n").unwrap();
    let out = forecast(dir.path(), &["grad-check", "--config", "bad.cfg"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("unknown key `betamax`"), "{}", stderr(&out));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = forecast(dir.path(), &["train", "--manifest", "x", "--bogus"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).to_lowercase().contains("usage"), "{}", stderr(&out));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = forecast(dir.path(), &["train", "--manifest", "nowhere/manifest.txt"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("nowhere"), "names the input: {}", stderr(&out));
}

#[test]
fn grad_check_reports_the_maximum_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = forecast(dir.path(), &["grad-check", "--seed", "3"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("max_rel_err = "), "{text}");
    assert!(text.contains("seed = 3"), "{text}");
}

#[test]
fn help_lists_every_paper_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = forecast(dir.path(), &["train", "--help"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for flag in ["--beta", "--mask", "--heads", "--dff", "--dh", "--tfixed", "--nf", "--seed"] {
        assert!(text.contains(flag), "help misses {flag}: {text}");
    }
}
