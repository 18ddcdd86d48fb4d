use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clipgcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipgcd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clipgcd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stepwise_commands_reproduce_the_composed_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--classes", "6", "--per-class", "20", "--captions-per-class", "5", "--seed", "3", "--out-dir", "data"]);
    ok(d, &["split", "--labels", "data/labels.csv", "--seed", "3", "--out", "split.csv"]);
    ok(d, &["index", "--corpus-text", "data/corpus.txt", "--corpus-emb", "data/corpus.emb", "--out", "index.cix"]);
    ok(d, &["retrieve", "--index", "index.cix", "--queries", "data/images.emb", "--k", "4", "--out", "hits.csv"]);
    let hits = fs::read_to_string(d.join("hits.csv")).unwrap();
    assert_eq!(hits.lines().count(), 1 + 120 * 4);
    ok(d, &["augment", "--images", "data/images.emb", "--index", "index.cix", "--k", "4", "--out", "fused.emb"]);
    assert!(d.join("fused.emb.provenance.csv").exists());
    ok(d, &["cluster", "--features", "fused.emb", "--split", "split.csv", "--k", "6", "--seed", "3", "--out", "assign.csv"]);
    assert!(d.join("assign.csv.centroids.emb").exists());
    assert!(d.join("assign.csv.objective.csv").exists());
    let summary = ok(d, &["eval", "--pred", "assign.csv", "--truth", "data/labels.csv", "--split", "split.csv", "--out", "report.csv"]);
    assert!(summary.starts_with("All/Old/New = "));

    fs::write(
        d.join("demo.cfg"),
        "images = data/images.emb\nlabels = data/labels.csv\ncorpus_text = data/corpus.txt\n\
         corpus_emb = data/corpus.emb\nseed = 3\n",
    )
    .unwrap();
    let composed = ok(d, &["run", "--config", "demo.cfg", "--out-dir", "run"]);
    assert_eq!(composed, summary);
    assert_eq!(fs::read(d.join("run/report.csv")).unwrap(), fs::read(d.join("report.csv")).unwrap());
    assert_eq!(fs::read(d.join("run/fused.emb")).unwrap(), fs::read(d.join("fused.emb")).unwrap());
    assert_eq!(fs::read(d.join("run/split.csv")).unwrap(), fs::read(d.join("split.csv")).unwrap());

    let sweep = ok(d, &["sweep-topk", "--config", "demo.cfg", "--k", "0,1,4", "--out-dir", "sweep"]);
    assert_eq!(sweep.lines().count(), 4);
    assert!(d.join("sweep/k4/report.csv").exists());

    ok(d, &["synth", "--classes", "6", "--per-class", "20", "--captions-per-class", "5", "--seed", "3", "--alpha", "0.2", "--out-dir", "other"]);
    let table = ok(d, &[
        "compare-corpora", "--config", "demo.cfg",
        "--corpus", "aligned=data/corpus.txt,data/corpus.emb",
        "--corpus", "weak=other/corpus.txt,other/corpus.emb",
        "--out-dir", "corpora",
    ]);
    assert!(table.starts_with("dataset,corpus,acc_all,acc_old,acc_new\ndemo,aligned,"));
    assert!(table.contains("\nAverage,weak,"));
}

#[test]
fn head_training_and_refined_fusion() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--classes", "4", "--per-class", "10", "--dims-image", "8", "--dims-text", "8", "--out-dir", "data"]);
    ok(d, &["split", "--labels", "data/labels.csv", "--out", "split.csv"]);
    ok(d, &["train-head", "--images", "data/images.emb", "--split", "split.csv", "--epochs", "3", "--lr", "0.001", "--out", "head.emb"]);
    let trace = fs::read_to_string(d.join("head.emb.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    ok(d, &["augment", "--images", "data/images.emb", "--no-text", "--head", "head.emb", "--out", "refined.emb"]);
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = clipgcd(d, &["cluster", "--features", "nope.emb", "--split", "nope.csv", "--k", "3", "--out", "a.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[cluster]"));

    ok(d, &["synth", "--classes", "4", "--per-class", "10", "--out-dir", "data"]);
    fs::write(d.join("bad.cfg"), "images = data/images.emb\nlabels = data/labels.csv\nuse_text = false\nk_total = 1\n").unwrap();
    let out = clipgcd(d, &["run", "--config", "bad.cfg", "--out-dir", "run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error: [cluster]"), "{err}");

    let out = clipgcd(d, &["run", "--config", "bad.cfg", "--set", "bogus=1"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));
}
