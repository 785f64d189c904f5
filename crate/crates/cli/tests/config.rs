use ctxf_cli::config::{model_name, DataSource, KgSource};
use ctxf_cli::ExperimentConfig;
use ctxf_core::infusion::Mode;
use ctxf_core::kg::ViewName;
use ctxf_core::kge::KgeMethod;

#[test]
fn empty_text_gives_defaults() {
    let cfg = ExperimentConfig::parse("# nothing\n\n").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.dataset.source, DataSource::Synthetic);
    assert_eq!(cfg.train.epochs, 10);
}

#[test]
fn keys_override_defaults() {
    let text = "
        dataset.train_per_class = 30
        run.views = visual, taxonomical
        run.modes = trainer,peer,baseline
        run.seed = 7
        embed.method = gat
        kg.source = cifar
        train.epochs = 3
        encoder.widths = 8,16
        augment.scale = 0.6, 1.0
        shift.background_swap = true
    ";
    let cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.dataset.train_per_class, 30);
    assert_eq!(cfg.views, vec![ViewName::Visual, ViewName::Taxonomical]);
    assert_eq!(cfg.modes, vec![Mode::Trainer, Mode::Peer, Mode::Baseline]);
    assert_eq!(cfg.method, KgeMethod::Gat);
    assert_eq!(cfg.kg, KgSource::BundledCifar);
    assert_eq!(cfg.train.encoder.widths, vec![8, 16]);
    assert_eq!(cfg.train.augment.scale, (0.6, 1.0));
    assert!(cfg.dataset.shift.background_swap);
    assert_eq!(cfg.train_config().seed, 7);
}

#[test]
fn runs_list_the_baseline_once() {
    let cfg = ExperimentConfig::parse("run.views = visual,functional\nrun.modes = trainer,baseline\n").unwrap();
    let names: Vec<String> = cfg.runs().into_iter().map(|(v, m)| model_name(v, m)).collect();
    assert_eq!(names, vec!["trainer_visual", "trainer_functional", "baseline"]);
}

#[test]
fn malformed_configs_are_rejected() {
    for text in [
        "train.epochs = 0",
        "train.epochs = ten",
        "nosection = 1",
        "train.epochs 3",
        "train.unknown = 1",
        "train.epochs = 2\ntrain.epochs = 3",
        "run.modes = teacher",
        "dataset.source = cifar",
        "run.modes =",
        "encoder.widths = 8,8,8,8,8",
    ] {
        assert!(ExperimentConfig::parse(text).is_err(), "{text:?} parsed");
    }
}

#[test]
fn cifar_source_needs_a_path() {
    let cfg = ExperimentConfig::parse("dataset.source = cifar\ndataset.cifar_path = /data/cifar").unwrap();
    assert_eq!(cfg.dataset.source, DataSource::Cifar("/data/cifar".into()));
}
