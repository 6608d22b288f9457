use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpl_core::{load_checkpoint, load_dataset_from, AttributeEmbedder};
use tempfile::TempDir;

fn cpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run cpl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

/// A temp dir holding a default synthetic dataset under `data/`.
fn with_data(extra: &[&str]) -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-synth", "--out", "data"];
    args.extend_from_slice(extra);
    ok(cpl(tmp.path(), &args));
    let manifest = tmp.path().join("data/manifest.txt");
    (tmp, manifest)
}

#[test]
fn gen_synth_writes_a_loadable_dataset() {
    let (tmp, manifest) = with_data(&[]);
    for f in ["features.cplf", "labels.csv", "attributes.csv", "classes.txt", "manifest.txt", "gen-synth.config.echo"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f} missing");
    }
    let ds = load_dataset_from(&manifest).unwrap();
    assert_eq!((ds.seen_classes.len(), ds.unseen_classes.len(), ds.d_feat(), ds.d_attr()), (27, 10, 64, 16));
}

#[test]
fn noise_free_oracle_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(cpl(tmp.path(), &["gen-synth", "--noise-sigma", "0"]));
    assert!(stdout(&o).contains("unseen classes): 100.0%"), "{}", stdout(&o));
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    ok(cpl(tmp.path(), &["gen-synth", "--seed", "7", "--out", "a"]));
    ok(cpl(tmp.path(), &["gen-synth", "--seed", "7", "--out", "b"]));
    ok(cpl(tmp.path(), &["gen-synth", "--seed", "8", "--out", "c"]));
    let read = |d: &str| fs::read(tmp.path().join(d).join("features.cplf")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let (tmp, _) = with_data(&[]);
    ok(cpl(tmp.path(), &["train", "--manifest", "data/manifest.txt", "--epochs", "0", "--hidden", "32", "--seed", "4"]));
    let ck = load_checkpoint(tmp.path().join("run/checkpoint.cplm")).unwrap();
    assert_eq!(ck.embedder, AttributeEmbedder::init(ck.dims(), 4));
    assert_eq!(ck.adam.step, 0);
    assert_eq!(fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap(), "epoch,episode,cep,pec,combined,millis\n");
}

#[test]
fn train_then_evaluate_near_the_oracle() {
    let (tmp, _) = with_data(&[]);
    let o = ok(cpl(tmp.path(), &["gen-synth", "--out", "data"]));
    let oracle: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("oracle accuracy (nearest true mean, unseen classes): "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .expect("oracle line");
    ok(cpl(tmp.path(), &["train", "--manifest", "data/manifest.txt"]));

    let log = fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,episode,cep,pec,combined,millis\n"));
    assert_eq!(log.lines().count(), 1 + 40 * 14);

    let zsl = ok(cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt", "--min-accuracy", "0.5"]));
    let out = stdout(&zsl);
    assert!(out.contains("Acc_U") && !out.contains("Acc_S") && !out.contains("H     ="), "{out}");
    let acc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("Acc_U = "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!(acc >= oracle - 5.0, "{acc} vs oracle {oracle}");

    let csv = fs::read(tmp.path().join("run/report.csv")).unwrap();
    ok(cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt"]));
    assert_eq!(fs::read(tmp.path().join("run/report.csv")).unwrap(), csv, "eval is not deterministic");
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("class_id,n,correct,accuracy\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 11);
    assert!(text.lines().last().unwrap().starts_with("# setting=zsl acc_unseen="));

    let gzsl = ok(cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt", "--setting", "gzsl"]));
    let out = stdout(&gzsl);
    assert!(out.contains("Acc_U") && out.contains("Acc_S") && out.contains("H     ="), "{out}");
    let csv = fs::read_to_string(tmp.path().join("run/report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 38);

    let strict = cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt", "--min-accuracy", "1.01"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn modes_and_ablations_complete() {
    let (tmp, _) = with_data(&[]);
    let common = ["train", "--manifest", "data/manifest.txt", "--hidden", "128", "--epochs", "5"];
    for (out, extra) in [
        ("task", vec!["--mode", "task"]),
        ("sample", vec!["--mode", "sample"]),
        ("b1", vec!["--lambda", "0"]),
        ("b2", vec!["--cep-only"]),
        ("coverage", vec!["--schedule", "coverage", "--aggregation", "sum", "--unit-attributes"]),
    ] {
        let mut args = common.to_vec();
        args.extend(["--out", out]);
        args.extend(extra);
        ok(cpl(tmp.path(), &args));
        ok(cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt", "--out", out]));
    }
    let echo = |d: &str| fs::read_to_string(tmp.path().join(d).join("train.config.echo")).unwrap();
    assert!(echo("task").contains("mode=task\n"));
    assert!(echo("sample").contains("mode=sample\n"));
    assert!(echo("b2").contains("cep-only=true\n"));
    assert!(echo("coverage").contains("schedule=coverage\n") && echo("coverage").contains("unit-attributes=true\n"));
    let task = fs::read(tmp.path().join("task/checkpoint.cplm")).unwrap();
    let sample = fs::read(tmp.path().join("sample/checkpoint.cplm")).unwrap();
    assert_ne!(task, sample);
}

/// Only completion and a sanity floor are checked: the default synthetic
/// benchmark saturates, so no peak over C is visible.
#[test]
fn class_count_sweep_runs() {
    let (tmp, _) = with_data(&[]);
    for c in ["3", "6", "9", "12"] {
        let out = format!("c{c}");
        ok(cpl(tmp.path(), &["train", "--manifest", "data/manifest.txt", "--c", c, "--out", &out]));
        ok(cpl(tmp.path(), &["eval", "--manifest", "data/manifest.txt", "--out", &out, "--min-accuracy", "0.5"]));
    }
}

#[test]
fn resume_matches_a_single_run() {
    let (tmp, _) = with_data(&[]);
    let base = ["train", "--manifest", "data/manifest.txt", "--hidden", "64"];
    ok(cpl(tmp.path(), &[&base[..], &["--epochs", "6", "--out", "full"]].concat()));
    ok(cpl(tmp.path(), &[&base[..], &["--epochs", "3", "--out", "half"]].concat()));
    ok(cpl(tmp.path(), &[&base[..], &["--epochs", "3", "--out", "rest", "--resume", "half/checkpoint.cplm"]].concat()));
    assert_eq!(
        fs::read(tmp.path().join("full/checkpoint.cplm")).unwrap(),
        fs::read(tmp.path().join("rest/checkpoint.cplm")).unwrap()
    );
}

#[test]
fn config_file_with_flag_override() {
    let (tmp, _) = with_data(&[]);
    fs::write(
        tmp.path().join("run.cfg"),
        "# ablation\nmanifest = data/manifest.txt\nlambda=0.5\nhidden=16\nepochs=1\nweight_decay=0\n",
    )
    .unwrap();
    ok(cpl(tmp.path(), &["train", "--config", "run.cfg", "--lambda", "0.25"]));
    let echo = fs::read_to_string(tmp.path().join("run/train.config.echo")).unwrap();
    for line in ["lambda=0.25", "hidden=16", "epochs=1", "weight-decay=0", "c=10", "gamma=0.9", "seed=0"] {
        assert!(echo.lines().any(|l| l == line), "{line} not in\n{echo}");
    }
    let ck = load_checkpoint(tmp.path().join("run/checkpoint.cplm")).unwrap();
    assert_eq!((ck.hyperparams.lambda, ck.hyperparams.hidden_size), (0.25, 16));

    fs::write(tmp.path().join("bad.cfg"), "lambda=0.5\nlearning_rate=1\n").unwrap();
    let o = cpl(tmp.path(), &["train", "--config", "bad.cfg", "--manifest", "data/manifest.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning-rate"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let (tmp, _) = with_data(&["--d-attr", "8"]);
    let code = |args: &[&str]| cpl(tmp.path(), args).status.code();

    assert_eq!(code(&[]), Some(2));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["train", "--manifest", "data/manifest.txt", "--lambda", "1.5"]), Some(2));
    assert_eq!(code(&["train", "--manifest", "data/manifest.txt", "--lambda", "abc"]), Some(2));
    assert_eq!(code(&["train", "--manifest", "data/manifest.txt", "--c", "40"]), Some(2));
    assert_eq!(code(&["train", "--manifest", "nowhere/manifest.txt"]), Some(3));
    assert_eq!(code(&["train", "--config", "nowhere.cfg"]), Some(3));

    fs::write(tmp.path().join("junk.cplm"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--manifest", "data/manifest.txt", "--checkpoint", "junk.cplm"]), Some(3));

    // Checkpoint trained on 8-d attributes against a 16-d dataset.
    ok(cpl(tmp.path(), &["train", "--manifest", "data/manifest.txt", "--hidden", "8", "--epochs", "1"]));
    ok(cpl(tmp.path(), &["gen-synth", "--out", "other"]));
    let o = cpl(tmp.path(), &["eval", "--manifest", "other/manifest.txt"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("d_attr=8") && err.contains("d_attr=16"), "{err}");
}

#[test]
fn gradcheck_command() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(cpl(tmp.path(), &["gradcheck"]));
    assert!(stdout(&a).contains("max relative error"));
    let b = ok(cpl(tmp.path(), &["gradcheck", "--trials", "100", "--seed", "3"]));
    let c = ok(cpl(tmp.path(), &["gradcheck", "--trials", "100", "--seed", "3"]));
    assert_eq!(stdout(&b), stdout(&c));
    let bad = cpl(tmp.path(), &["gradcheck", "--trials", "5", "--inject-fault", "sign-flip"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("w2["), "{}", stderr(&bad));
    assert!(tmp.path().join("gradcheck/gradcheck.config.echo").exists());
}
