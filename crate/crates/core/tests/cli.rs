use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hyperpoint");

const TINY: &str = r#"
version = 1

[train]
epochs = 2
batch_size = 2
seed = 5

[synth]
train_per_class = 1
test_per_class = 1
"#;

fn run(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().expect("spawn hyperpoint")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = run(&["train", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = run(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "eval", "gradcheck", "verify", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--config"], &[&dir.path().join("absent.toml"), Path::new("--out"), dir.path()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn malformed_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "version = 1\n[train]\nepochs = \"many\"\n").unwrap();
    let out = run(&["train", "--config"], &[&cfg, Path::new("--out"), dir.path()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let o = run(&["synth", "--seed", seed, "--config"], &[&cfg, Path::new("--out"), out]);
        assert!(o.status.success());
    }
    let read = |d: &Path| std::fs::read(d.join("train").join("00000.pcsq")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(std::fs::read_dir(a.join("test")).unwrap().count(), 4);
}

#[test]
fn train_then_eval_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    assert!(run(&["synth", "--config"], &[&cfg, Path::new("--out"), &data]).status.success());
    let o = run(&["train", "--epochs", "1", "--batch-size", "3", "--config"], &[&cfg, Path::new("--out"), &run_dir, Path::new("--data"), &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,train,") && lines[2].starts_with("1,test,"));
    let saved = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(saved.contains("epochs = 1") && saved.contains("batch_size = 3"));

    let o = run(&["eval", "--out"], &[&run_dir, Path::new("--data"), &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = std::fs::read_to_string(run_dir.join("eval.csv")).unwrap();
    let row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    let trained: Vec<&str> = lines[2].split(',').collect();
    // evaluating the saved checkpoint reproduces the final test metrics
    assert_eq!(row[2..], trained[2..]);
}

#[test]
fn eval_without_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(run(&["eval", "--config"], &[&cfg, Path::new("--out"), dir.path()]).status.code(), Some(1));
}

#[test]
fn gradcheck_of_one_scope_passes() {
    let o = run(&["gradcheck", "--scope", "tensor"], &[]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel. error"));
}

#[test]
fn unknown_scope_exits_2() {
    assert_eq!(run(&["gradcheck", "--scope", "everything"], &[]).status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let o = run(&["verify"], &[]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
}
