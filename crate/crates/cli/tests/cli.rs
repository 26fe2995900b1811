use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use debias_core::experiment::{read_report_csv, MethodResult};
use debias_core::posthoc::{NullspaceProjector, Projector};
use debias_core::trainer::{read_metrics, Objective, Phase};
use debias_core::{checkpoint, data, Vocab};
use serde_json::json;
use tempfile::TempDir;

fn mini_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/mini_corpus.txt")
}

/// A config small enough for every command to finish in well under a second.
fn write_config(dir: &Path, schedule: serde_json::Value) -> PathBuf {
    let cfg = json!({
        "paths": { "corpus": mini_corpus(), "out_dir": dir.join("out") },
        "model": { "d_model": 16, "d_ff": 32, "n_layers": 1, "n_heads": 2, "init_std": 0.1 },
        "schedule": schedule,
        "task": { "n_train": 60, "n_test": 40 },
        "probe": { "max_epochs": 10 },
        "n_seeds": 2,
        "pretrain_steps": 20,
        "debias_pretrain_steps": 10,
        "finetune_steps": 10
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn default_schedule() -> serde_json::Value {
    json!({ "mode": "prefine_p", "total_steps": 20, "finetune_steps": 10, "learning_rate": 0.1, "debias_learning_rate": 0.01 })
}

fn debias(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) -> String {
    let out = debias(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), default_schedule());
    let out = dir.path().join("out");
    (dir, cfg, out)
}

#[test]
fn mine_reproduces_golden_pair_file() {
    let (_dir, cfg, out) = setup();
    let stdout = ok(&cfg, &["mine"]);
    assert!(stdout.starts_with("468 pairs"));
    assert_eq!(fs::read_to_string(out.join("pairs.jsonl")).unwrap(), data::MINI_CORPUS_PAIRS);
}

#[test]
fn mine_respects_max_pairs() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["mine", "--max-pairs", "10"]);
    assert_eq!(fs::read_to_string(out.join("pairs.jsonl")).unwrap().lines().count(), 10);
}

#[test]
fn missing_corpus_is_a_config_error() {
    let (_dir, cfg, _) = setup();
    let out = debias(&cfg, &["mine", "--corpus", "/nonexistent/corpus.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/corpus.txt"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = debias(Path::new("/nonexistent/config.json"), &["mine"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_are_usage_errors() {
    let (_dir, cfg, _) = setup();
    assert_eq!(debias(&cfg, &["train", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(debias(&cfg, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(debias(&cfg, &["probe", "--method", "svm"]).status.code(), Some(2));
}

#[test]
fn plain_pretrain_checkpoint_loads_and_embeds() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["train", "--mode", "plain_pretrain", "--steps", "200"]);
    let model = checkpoint::load(out.join("model.dbf1")).unwrap();
    let vocab = Vocab::load(out.join("vocab.txt")).unwrap();
    assert_eq!(model.config.vocab_size, vocab.len());
    let e = model.embed(&vocab.tokenize("she is a nurse .", 32)).unwrap();
    assert_eq!(e.len(), 16);
    assert!(e.iter().all(|x| x.is_finite()));
    let log = read_metrics(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.iter().all(|r| r.objective == Objective::Mlm));
}

#[test]
fn prefine_metrics_cover_both_phases() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["train"]);
    let log = read_metrics(out.join("metrics.jsonl")).unwrap();
    for (phase, objective) in [
        (Phase::Pretrain, Objective::Mlm),
        (Phase::Pretrain, Objective::Debias),
        (Phase::Finetune, Objective::Finetune),
        (Phase::Finetune, Objective::Debias),
    ] {
        assert!(log.iter().any(|r| r.phase == phase && r.objective == objective), "{phase:?} {objective:?}");
    }
    assert!(log.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn train_can_continue_from_a_checkpoint() {
    let (dir, cfg, out) = setup();
    ok(&cfg, &["train", "--mode", "plain_pretrain", "--steps", "20"]);
    let base = dir.path().join("base.dbf1");
    fs::rename(out.join("model.dbf1"), &base).unwrap();
    fs::copy(out.join("vocab.txt"), dir.path().join("vocab.txt")).unwrap();
    ok(&cfg, &["train", "--mode", "fine_p", "--steps", "10", "--init", base.to_str().unwrap()]);
    assert_eq!(read_metrics(out.join("metrics.jsonl")).unwrap().len(), 20);
}

#[test]
fn collapse_guard_exits_with_numeric_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({ "mode": "debias_only", "total_steps": 20, "collapse_floor": 2.0, "guard_interval": 1 }),
    );
    let out = debias(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("collapse"));
}

#[test]
fn probe_report_has_two_runs_per_seed() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["train"]);
    ok(&cfg, &["probe", "--method", "prefine_p"]);
    let r = MethodResult::load(out.join("probe_prefine_p.json")).unwrap();
    assert_eq!(r.linear.len() + r.nonlinear.len(), 2 * 2);
    assert_eq!(r.baseline.len(), 2);
    assert_eq!(r.accuracy.len(), 2);
}

#[test]
fn identity_projector_equals_no_projector() {
    let (dir, cfg, out) = setup();
    ok(&cfg, &["train"]);
    let identity = dir.path().join("identity.prj1");
    Projector::Inlp(NullspaceProjector::identity(16)).save(&identity).unwrap();
    ok(&cfg, &["probe"]);
    let plain = MethodResult::load(out.join("probe_original.json")).unwrap();
    ok(&cfg, &["probe", "--projector", identity.to_str().unwrap()]);
    let projected = MethodResult::load(out.join("probe_original.json")).unwrap();
    for (a, b) in plain.linear.iter().chain(&plain.nonlinear).zip(projected.linear.iter().chain(&projected.nonlinear)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn posthoc_commands_write_projectors() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["train"]);
    let stdout = ok(&cfg, &["posthoc", "sentdebias", "--k", "2"]);
    assert!(stdout.contains("explained variance"), "{stdout}");
    match Projector::load(out.join("projector_sentdebias.prj1")).unwrap() {
        Projector::SentDebias(s) => assert_eq!(s.k(), 2),
        other => panic!("wrong projector {}", other.method()),
    }
    let stdout = ok(&cfg, &["posthoc", "nullitout", "--iters", "3"]);
    assert!(stdout.contains("accuracies"), "{stdout}");
    match Projector::load(out.join("projector_nullitout.prj1")).unwrap() {
        Projector::Inlp(n) => assert!(n.iterations() <= 3),
        other => panic!("wrong projector {}", other.method()),
    }
    let bad = debias(&cfg, &["posthoc", "fairfil"]);
    assert_eq!(bad.status.code(), Some(2));
    let not_posthoc = debias(&cfg, &["posthoc", "fine_p"]);
    assert_eq!(not_posthoc.status.code(), Some(2));
}

#[test]
fn report_of_one_method_has_method_and_baseline_rows() {
    let (_dir, cfg, out) = setup();
    ok(&cfg, &["train"]);
    ok(&cfg, &["probe"]);
    ok(&cfg, &["report"]);
    let rows = read_report_csv(fs::File::open(out.join("report.csv")).unwrap()).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["original", "baseline"]);
    let text = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(text.starts_with("method,accuracy,linear bias,nonlinear bias\n"));
}

#[test]
fn report_without_inputs_fails() {
    let (_dir, cfg, _) = setup();
    assert_eq!(debias(&cfg, &["report"]).status.code(), Some(2));
}

fn snapshot(out: &Path, files: &[&str]) -> Vec<Vec<u8>> {
    files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect()
}

const OUTPUTS: [&str; 8] = [
    "pairs.jsonl",
    "model.dbf1",
    "vocab.txt",
    "metrics.jsonl",
    "projector_sentdebias.prj1",
    "projector_nullitout.prj1",
    "probe_nullitout.json",
    "report.csv",
];

fn pipeline(cfg: &Path, seed: &str) {
    ok(cfg, &["--seed", seed, "mine"]);
    ok(cfg, &["--seed", seed, "train"]);
    ok(cfg, &["--seed", seed, "posthoc", "sentdebias"]);
    ok(cfg, &["--seed", seed, "posthoc", "nullitout"]);
    let projector = cfg.with_file_name("out").join("projector_nullitout.prj1");
    ok(cfg, &["--seed", seed, "probe", "--method", "nullitout", "--projector", projector.to_str().unwrap()]);
    ok(cfg, &["--seed", seed, "report"]);
}

#[test]
fn every_command_is_deterministic() {
    let (_dir, cfg, out) = setup();
    pipeline(&cfg, "7");
    let first = snapshot(&out, &OUTPUTS);
    pipeline(&cfg, "7");
    assert_eq!(snapshot(&out, &OUTPUTS), first);
    ok(&cfg, &["--seed", "8", "train"]);
    assert_ne!(fs::read(out.join("metrics.jsonl")).unwrap(), first[3]);
}

#[test]
fn out_flag_overrides_config() {
    let (dir, cfg, _) = setup();
    let other = dir.path().join("elsewhere");
    ok(&cfg, &["--out", other.to_str().unwrap(), "mine", "--max-pairs", "3"]);
    assert_eq!(fs::read_to_string(other.join("pairs.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn experiment_writes_every_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), default_schedule());
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["n_seeds"] = json!(1);
    fs::write(&cfg, v.to_string()).unwrap();
    ok(&cfg, &["experiment"]);
    let out = dir.path().join("out");
    let rows = read_report_csv(fs::File::open(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().find(|r| r.method == "pre_p").unwrap().accuracy.is_none());
    for m in ["original", "sentdebias", "nullitout", "fine_p", "pre_p", "prefine_p"] {
        assert!(out.join(format!("probe_{m}.json")).exists(), "{m}");
    }
}
