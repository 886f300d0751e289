use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
output_dir = "run"
seeds = [0]
methods = ["random", "msvcl"]

[dataset]
resolution = 32
mapper_fit_subjects = 25

[dataset.seen_counts]
pretrain_unlabeled = 25
detect_train = 4
detect_val = 2
detect_test = 5

[dataset.unseen_counts]
pretrain_unlabeled = 0
detect_train = 0
detect_val = 0
detect_test = 5

[pretrain]
steps = 3
batch_n_sources = 4

[detect]
epochs = 1
batch_size = 2
"#;

fn msvcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn msvcl")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_and_missing_subcommand_exit_1() {
    assert_eq!(msvcl(&["--bogus"]).status.code(), Some(1));
    assert_eq!(msvcl(&[]).status.code(), Some(1));
    assert_eq!(msvcl(&["pretrain", "--scheme", "moco"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = msvcl(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("run-all"));
}

#[test]
fn bad_config_exits_1_with_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[pretrain]\nlearning_rate = 0.1\n");
    let o = msvcl(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[detect]\nweight_decay = 10000.0\n");
    assert_eq!(msvcl(&["--config", cfg.to_str().unwrap(), "show-config"]).status.code(), Some(1));

    let missing = dir.path().join("nope.toml");
    assert_eq!(msvcl(&["--config", missing.to_str().unwrap(), "report"]).status.code(), Some(1));
}

#[test]
fn stage_without_prerequisite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = msvcl(&["--config", cfg.to_str().unwrap(), "finetune", "--scheme", "random"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing artifact"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let o = msvcl(&["gradcheck", "--configs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("nt_xent"));
    let o = msvcl(&["gradcheck", "--configs", "2", "--corrupt-for-test"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = msvcl(&["show-config"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = write_config(dir.path(), &stdout(&o));
    let again = msvcl(&["--config", cfg.to_str().unwrap(), "show-config"]);
    assert_eq!(again.status.code(), Some(0));
    // output_dir is resolved against the file location on load
    let strip = |s: String| s.lines().filter(|l| !l.starts_with("output_dir")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(stdout(&o)), strip(stdout(&again)));
}

#[test]
fn stepwise_pipeline_then_cached_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = msvcl(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };

    let data = ok(&["--config", c, "gen-data"]);
    assert!(stdout(&data).contains("possible_positives"));
    for scheme in ["random", "msvcl"] {
        ok(&["--config", c, "pretrain", "--scheme", scheme]);
        ok(&["--config", c, "finetune", "--scheme", scheme]);
        let e = ok(&["--config", c, "eval", "--scheme", scheme]);
        assert!(stdout(&e).starts_with("method,style_A"), "{}", stdout(&e));
        ok(&["--config", c, "probe", "--scheme", scheme]);
    }
    let run = dir.path().join("run");
    for f in ["pretrain/msvcl-s0/encoder.ckpt", "pretrain/msvcl-s0/loss.csv", "finetune/random-s0/detector.ckpt",
        "eval/msvcl-s0/eval.json", "eval/msvcl-s0/detections_E.jsonl", "probe/random-s0/projection.csv"]
    {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = ok(&["--config", c, "report"]);
    let csv = stdout(&report);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().all(|l| l.split(',').count() == 8));

    let ckpt = std::fs::read(run.join("pretrain/msvcl-s0/encoder.ckpt")).unwrap();
    let ledger_len = std::fs::read_to_string(run.join("ledger.jsonl")).unwrap().lines().count();
    let all = ok(&["--config", c, "run-all"]);
    assert_eq!(stdout(&all), csv);
    // every stage was up to date, so nothing new was recorded
    assert_eq!(std::fs::read_to_string(run.join("ledger.jsonl")).unwrap().lines().count(), ledger_len);

    ok(&["--config", c, "--force", "pretrain", "--scheme", "msvcl"]);
    assert_eq!(std::fs::read(run.join("pretrain/msvcl-s0/encoder.ckpt")).unwrap(), ckpt);
}
