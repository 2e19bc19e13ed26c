use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hico")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A 16-video corpus with `d_feat`-dim features.
fn small_corpus(dir: &Path, seed: &str, d_feat: usize) -> PathBuf {
    let cfg = write_json(
        dir,
        &format!("gen_{seed}_{d_feat}.json"),
        &format!(r#"{{"n_videos": 16, "n_topics": 4, "d_feat": {d_feat}, "duration_min": 20, "duration_max": 30}}"#),
    );
    let out = dir.join(format!("corpus_{seed}_{d_feat}"));
    let o = hico(&["gen", "--config", p(&cfg), "--seed", seed, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("corpus.json")
}

const SHORT_TRAIN: &str = r#"{"epochs": 2, "batch_videos": 4, "model": {"d_feat": 8, "encoder_hidden": 16, "d_repr": 8, "head_hidden": 8, "d_z": 8, "d_t": 8, "phi_hidden": 8}}"#;

fn short_train(dir: &Path, corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = write_json(dir, "train.json", SHORT_TRAIN);
    let mut args = vec!["train", "--corpus", p(corpus), "--config", p(&cfg), "--seed", "1", "--out", p(out)];
    args.extend_from_slice(extra);
    hico(&args)
}

#[test]
fn gen_writes_loadable_corpus() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let c = hico::timeline::Corpus::load(&corpus).unwrap();
    assert_eq!(c.len(), 16);
    assert_eq!(c.d_feat(), 8);
    let cfg = read_json(&corpus.with_file_name("corpus_config.json"));
    assert_eq!(cfg["n_videos"], 16);
    let manifest = read_json(&corpus.with_file_name("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["subcommand"], "gen");
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    std::fs::create_dir_all(&dir_a).unwrap();
    std::fs::create_dir_all(&dir_b).unwrap();
    let a = std::fs::read(small_corpus(&dir_a, "5", 8)).unwrap();
    let b = std::fs::read(small_corpus(&dir_b, "5", 8)).unwrap();
    let c = std::fs::read(small_corpus(&dir_b, "6", 8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gen_rejects_empty_corpus() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(tmp.path(), "c.json", r#"{"n_videos": 0}"#);
    let o = hico(&["gen", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let manifest = read_json(&tmp.path().join("o/manifest.json"));
    assert_eq!(manifest["status"], "failed");
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(tmp.path(), "c.json", r#"{"n_vidoes": 10}"#);
    let o = hico(&["gen", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_vidoes"), "{}", stderr(&o));
}

#[test]
fn train_outputs_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let (a, b) = (tmp.path().join("ta"), tmp.path().join("tb"));
    for out in [&a, &b] {
        let o = short_train(tmp.path(), &corpus, out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train_config.json", "checkpoint.json", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["finished_at"].is_string());
}

#[test]
fn train_without_corpus_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = hico(&["train", "--corpus", p(&tmp.path().join("missing.json")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.json"));
}

#[test]
fn ablation_flags_reach_config() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let out = tmp.path().join("t");
    let o = short_train(tmp.path(), &corpus, &out, &["--no-vcl", "--no-tcl", "--no-gs", "--concat", "uni", "--topical-cap", "inf"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = read_json(&out.join("train_config.json"));
    assert_eq!(cfg["sampler"]["gs_visual"], false);
    assert_eq!(cfg["sampler"]["gs_topical"], false);
    assert_eq!(cfg["loss"]["enable_tcl"], false);
    assert_eq!(cfg["loss"]["include_vk_negatives"], false);
    assert_eq!(cfg["loss"]["topical_pairs"], "none");
    assert_eq!(cfg["loss"]["concat_mode"], "unidirectional");
    let t: hico::trainer::TrainConfig = serde_json::from_value(cfg).unwrap();
    assert!(t.sampler.delta_cap.is_infinite());
    assert!(t.sampler.topical_cap.is_infinite());
}

#[test]
fn divergence_exits_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let mut cfg: Value = serde_json::from_str(SHORT_TRAIN).unwrap();
    cfg["lr"] = 1e12.into();
    cfg["warmup_epochs"] = 0.into();
    let cfg = write_json(tmp.path(), "div.json", &cfg.to_string());
    let o = hico(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn random_init_eval_reports_recall_rows() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let out = tmp.path().join("e");
    let o = hico(&["eval", "--corpus", p(&corpus), "--random-init", "--seed", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,k,value"));
    for k in [1, 5, 10, 20] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("recall,{k},"))), "{csv}");
    }
    assert!(csv.lines().any(|l| l.starts_with("probe_accuracy,,")));
    assert!(out.join("summary.txt").exists());
}

#[test]
fn checkpoint_eval_rejects_mismatched_dims() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), "0", 8);
    let other = small_corpus(tmp.path(), "0", 6);
    let t = tmp.path().join("t");
    assert!(short_train(tmp.path(), &corpus, &t, &[]).status.success());
    let ok = hico(&["eval", "--corpus", p(&corpus), "--checkpoint", p(&t.join("checkpoint.json")), "--out", p(&tmp.path().join("e1"))]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let o = hico(&["eval", "--corpus", p(&other), "--checkpoint", p(&t.join("checkpoint.json")), "--out", p(&tmp.path().join("e2"))]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("expected 8") && msg.contains("got 6"), "{msg}");
}

#[test]
fn gradcheck_passes_and_catches_injected_flip() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g");
    let o = hico(&["gradcheck", "--points", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    let o = hico(&["gradcheck", "--points", "2", "--inject-sign-flip", "tp_loss", "--out", p(&tmp.path().join("f"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tp_loss"));

    let o = hico(&["gradcheck", "--inject-sign-flip", "bogus", "--out", p(&tmp.path().join("u"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn theory_writes_per_seed_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(tmp.path(), "t.json", r#"{"seeds": [0, 1, 2], "budget": 100, "n_prime": 50, "bootstrap_resamples": 200}"#);
    let out = tmp.path().join("th");
    let o = hico(&["theory", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("theory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,method,p,h,delta_hat,sigma2,budget,excess_risk"));
    assert_eq!(lines.count(), 6);

    let o = hico(&["theory", "--config", p(&cfg), "--control", "--out", p(&tmp.path().join("c"))]);
    assert!(o.status.success());
    let used = read_json(&tmp.path().join("c/theory_config.json"));
    assert_eq!(used["h"], 0.0);
    assert_eq!(used["delta_hat"], 0.0);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(hico(&["train"]).status.code(), Some(1));
    assert_eq!(hico(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hico(&["gen", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(hico(&["--help"]).status.code(), Some(0));
}
