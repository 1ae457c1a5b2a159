use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_crossvae");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small synthetic dataset written through the CLI itself.
fn dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = run(&["synthetic", "--users", "40", "--items", "50", "--rank", "3", "--density", "0.3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("ratings.csv")
}

const SMALL: &[&str] = &["--format", "csv", "--k", "3", "--k-prime", "4", "--widths", "8", "--attention-softmax", "--lr", "0.005"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(SMALL).chain(extra).copied().collect()
}

#[test]
fn every_subcommand_help_lists_defaults() {
    for sub in ["train", "evaluate", "ablate", "sparsity", "gradcheck", "subsample", "split", "synthetic"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("[default:"), "{sub} help shows no defaults");
        assert!(text.contains("--config"), "{sub}");
    }
    let text = String::from_utf8_lossy(&run(&["train", "--help"]).stdout).into_owned();
    for flag in [
        "--dataset", "--format", "--seed", "--k ", "--k-prime", "--layers ", "--layers-prime", "--widths", "--beta-u",
        "--beta-v", "--batch-users", "--batch-items", "--attention ", "--attention-softmax", "--sequential",
        "--rank-over", "--max-iterations", "--patience", "--out",
    ] {
        assert!(text.contains(flag), "train help lacks {flag}");
    }
    assert!(text.contains("[default: 0.001]") && text.contains("[default: local]"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset not found"));
    let o = run(&["train", "--dataset", "/nonexistent/ratings.dat"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset not found"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--attention", "sideways"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn one_iteration_writes_one_log_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    let o = run(&with(&["train", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()], &["--max-iterations", "1"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for f in ["checkpoint.json", "metrics.csv", "metrics.json", "convergence.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let splits: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(splits, ["train", "val", "test"]);

    // Evaluating the checkpoint reproduces the metrics.
    let eval_out = dir.path().join("eval");
    let o = run(&[
        "evaluate", "--format", "csv", "--dataset", data.to_str().unwrap(),
        "--checkpoint", out.join("checkpoint.json").to_str().unwrap(), "--out", eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(eval_out.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    let base = ["train", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(run(&with(&base, &["--max-iterations", "2"])).status.success());
    let ck = out.join("checkpoint.json");
    let o = run(&with(&base, &["--max-iterations", "3", "--resume", ck.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("training_log.csv")).unwrap();
    let its: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(its, ["1", "2", "3"]);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("dataset = {:?}\nformat = \"csv\"\nk = 2\nk_prime = 4\nwidths = [6]\nmax_iterations = 3\nattention_softmax = true\n", data)).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--max-iterations", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("training_log.csv")).unwrap().lines().count(), 2);
    let ck: serde_like::Value = serde_like::parse(&fs::read_to_string(out.join("checkpoint.json")).unwrap());
    assert_eq!(ck.k, 2);

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

/// Pulls `"k":<n>` out of the checkpoint's hyperparameters without a JSON dependency.
mod serde_like {
    pub struct Value {
        pub k: usize,
    }

    pub fn parse(text: &str) -> Value {
        let at = text.find("\"hyperparams\"").unwrap();
        let rest = &text[at..];
        let k = rest.find("\"k\":").unwrap() + 4;
        let digits: String = rest[k..].chars().take_while(|c| c.is_ascii_digit()).collect();
        Value { k: digits.parse().unwrap() }
    }
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_op() {
    let o = run(&["gradcheck", "--instances", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["gradcheck", "--instances", "10", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("sigmoid (max rel err"), "{err}");
    assert!(!err.contains("relu"), "{err}");
    assert_eq!(run(&["gradcheck", "--inject-fault", "nope"]).status.code(), Some(2));
}

#[test]
fn ablate_writes_four_variant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("ab");
    let o = run(&with(&["ablate", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()], &["--max-iterations", "2", "--charts"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no-attention", "no-cross-feedback", "no-data-input"]);
    assert!(fs::read_to_string(out.join("ablation_curves.svg")).unwrap().contains("<svg"));
}

#[test]
fn sparsity_writes_five_increasing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("sp");
    let o = run(&with(&["sparsity", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()], &["--max-iterations", "1", "--parallel"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("sparsity.csv")).unwrap();
    let fr: Vec<f64> = table.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(fr.len(), 5);
    assert!(fr.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn split_and_subsample_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("s");
    let o = run(&["split", "--format", "csv", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("split.csv")).unwrap();
    let n = fs::read_to_string(&data).unwrap().lines().count() - 1;
    assert_eq!(manifest.lines().count() - 1, n);
    assert!(out.join("user_ids.csv").exists() && out.join("item_ids.csv").exists());

    let o = run(&["subsample", "--format", "csv", "--dataset", data.to_str().unwrap(), "--fraction", "0.1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sample = fs::read_to_string(out.join("sample.csv")).unwrap().lines().count() - 1;
    let rest = fs::read_to_string(out.join("rest.csv")).unwrap().lines().count() - 1;
    assert_eq!(sample, (0.1 * n as f64).ceil() as usize);
    assert_eq!(sample + rest, n);
    assert_eq!(run(&["subsample", "--format", "csv", "--dataset", data.to_str().unwrap(), "--fraction", "1.5"]).status.code(), Some(2));
}
