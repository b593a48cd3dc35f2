use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spes-loc"))
        .args(args)
        .env_remove("SPES_LOC_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--patients",
    "5",
    "--electrodes",
    "12",
    "--trials",
    "3",
    "--sampling-rate",
    "512",
    "--soz-fraction",
    "0.25",
];

fn synth_into(dir: &Path, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(dir), "--seed", seed];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    spes(&args)
}

#[test]
fn missing_cohort_is_usage_error() {
    let o = spes(&["train", "--family", "cnn_convergent"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(spes(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(spes(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn validation_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = spes(&["synth", "--out", p(dir.path()), "--patients", "3", "--soz-fraction", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn synth_is_deterministic_and_idempotent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(synth_into(a.path(), "7", &[]).status.success());
    assert!(synth_into(b.path(), "7", &[]).status.success());
    let hash = |d: &Path| fs::read_to_string(d.join("cohort.sha256")).unwrap();
    assert_eq!(hash(a.path()), hash(b.path()));

    let manifest = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("run_manifest.synth.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest(a.path())["fingerprint"], manifest(b.path())["fingerprint"]);
    assert_eq!(manifest(a.path())["seed"], 7);

    let again = synth_into(a.path(), "7", &[]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("up to date"));
    let forced = synth_into(a.path(), "7", &["--force"]);
    assert!(!stdout(&forced).contains("up to date"));
    assert_eq!(hash(a.path()), hash(b.path()));

    let c = tempfile::tempdir().unwrap();
    synth_into(c.path(), "8", &[]);
    assert_ne!(hash(a.path()), hash(c.path()));
}

#[test]
fn empty_results_report_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = spes(&["report", "--out", p(dir.path())]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("no runs"));
}

#[test]
fn full_pipeline_on_tiny_cohort() {
    let root = tempfile::tempdir().unwrap();
    let cohort = root.path().join("cohort");
    let banks = root.path().join("banks");
    let tuned = root.path().join("tuned");
    let results = root.path().join("results");
    assert!(synth_into(&cohort, "3", &[]).status.success());
    let o = spes(&["preprocess", "--cohort", p(&cohort), "--out", p(&banks)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(banks.join("bank.json").exists());

    let conf = root.path().join("tiny.conf");
    fs::write(&conf, "# tiny networks\nbase_width=2\nembedding_dim=8\nepochs=1\nbatch_size=8\ncnn_convergent.channel_budget=6\ncnn_divergent.channel_budget=6\n").unwrap();

    let o = spes(&[
        "tune", "--cohort", p(&banks), "--out", p(&tuned), "--family", "cnn_convergent", "--config", p(&conf),
        "--trials", "2", "--tune-epochs", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tuned_conf = tuned.join("tuned/cnn_convergent.conf");
    let text = fs::read_to_string(&tuned_conf).unwrap();
    assert!(text.contains("family=cnn_convergent"));

    // the tuned file is scoped to its family by its `family=` line
    let train_args = [
        "train", "--cohort", p(&banks), "--out", p(&results), "--config", p(&conf), "--config", p(&tuned_conf),
        "--seed", "5",
    ];
    let o = spes(&train_args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ledger = fs::read_to_string(results.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 75);
    assert_eq!(fs::read_dir(results.join("checkpoints")).unwrap().count(), 75);
    let used = fs::read_to_string(results.join("configs/cnn_convergent.conf")).unwrap();
    let lr = |t: &str| t.lines().find(|l| l.starts_with("learning_rate=")).map(String::from);
    assert_eq!(lr(&used), lr(&text));

    let again = spes(&train_args);
    assert!(stdout(&again).contains("up to date"));

    let o = spes(&["evaluate", "--out", p(&results)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(results.join("metrics.json")).unwrap()).unwrap();
    let reports = metrics["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert_eq!(r["runs"].as_array().unwrap().len(), 25);
    }

    let o = spes(&["ablate", "--cohort", p(&banks), "--out", p(&results), "--sizes", "1,4,30", "--draws", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = spes(&["report", "--out", p(&results)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("cnn_transformer"));
    for f in ["roc_cnn_convergent.tsv", "outcome_cnn_transformer.tsv", "ablation.tsv"] {
        assert!(results.join("series").join(f).exists(), "{f}");
    }
    let ablation = fs::read_to_string(results.join("series/ablation.tsv")).unwrap();
    assert_eq!(ablation.lines().filter(|l| !l.starts_with('#')).count(), 3);
    for m in ["train", "evaluate", "ablate", "report"] {
        assert!(results.join(format!("run_manifest.{m}.json")).exists());
    }
}
