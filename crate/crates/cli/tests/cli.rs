use std::path::Path;
use std::process::{Command, Output};

fn ctxf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stats_of_the_bundled_cifar_graph() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "kg.source = cifar\n").unwrap();
    let o = ctxf(dir.path(), &["--config", "c.cfg", "kg", "stats"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        "34 classes, 16 properties, 69 individuals, 270 triples"
    );
}

#[test]
fn build_then_query_then_stats_of_the_view() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "kg.source = cifar\nrun.out = run\n").unwrap();
    let o = ctxf(dir.path(), &["--config", "c.cfg", "kg", "build"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/kg/gkg.kgt").exists());
    let o = ctxf(dir.path(), &["--config", "c.cfg", "kg", "query", "--view", "visual"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("44 nodes"), "{}", stdout(&o));
    let o = ctxf(dir.path(), &["kg", "stats", "--input", "run/kg/visual.kgt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 properties"), "{}", stdout(&o));
}

#[test]
fn custom_query_with_unknown_predicate_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxf(
        dir.path(),
        &["kg", "query", "--predicates", "hasWings", "--name", "wings"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    let o = ctxf(dir.path(), &["kg", "query"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxf(dir.path(), &["embed", "--view", "visual", "--method", "transe"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ctxf(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_a_trainer_without_embedding_points_at_embed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.cfg"),
        "dataset.train_per_class = 2\ntrain.epochs = 1\nrun.modes = trainer\n",
    )
    .unwrap();
    let o = ctxf(dir.path(), &["--config", "c.cfg", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("ctxf embed --view visual --method gae"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn bad_config_file_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "train.bogus = 1\n").unwrap();
    let o = ctxf(dir.path(), &["--config", "bad.cfg", "kg", "stats"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.cfg"));
    assert!(stderr(&o).contains("train.bogus"));
}

#[test]
fn invalid_thread_cap_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ctxf"))
        .current_dir(dir.path())
        .env("CTXF_THREADS", "zero")
        .args(["kg", "stats"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn small_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "dataset.train_per_class = 6
dataset.test_per_class = 3
run.views = visual
run.modes = trainer,peer,baseline
run.out = out
train.epochs = 1
train.batch_size = 20
encoder.widths = 4,8
encoder.head_hidden = 16
gae.epochs = 20
gat.heads = 2
gat.hidden = 8
linear.epochs = 5
";
    std::fs::write(dir.path().join("c.cfg"), cfg).unwrap();
    for args in [
        vec!["--config", "c.cfg", "kg", "build"],
        vec!["--config", "c.cfg", "embed", "--view", "visual"],
        vec!["--config", "c.cfg", "train"],
        vec!["--config", "c.cfg", "eval"],
    ] {
        let o = ctxf(dir.path(), &args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for f in [
        "embed/visual_gae.ctxe",
        "embed/visual_gae_similarity.csv",
        "embed/visual_gae_similarity.svg",
        "train/trainer_visual.ctxf",
        "train/peer_visual.ctxf",
        "train/baseline.ctxf",
        "train/baseline_log.csv",
        "eval/metrics_source_gp.csv",
        "eval/metrics_target_ll.csv",
        "eval/deltas_source_gp.csv",
        "eval/supercategory_errors.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("eval/metrics_source_gp.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.lines().next().unwrap().ends_with(",All"));
}
