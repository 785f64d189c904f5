//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ctxf_core::datasets::DomainShift;
use ctxf_core::infusion::{Mode, TrainRunConfig};
use ctxf_core::kg::ViewName;
use ctxf_core::kge::{EmbedConfig, KgeMethod};
use ctxf_core::predict::{LinearConfig, DEFAULT_RIDGE};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum KgSource {
    /// The bundled graph matching the dataset source.
    Bundled,
    BundledCifar,
    BundledSynthetic,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Seed for data generation, independent of the training seed.
    pub seed: u64,
    pub shift: DomainShift,
    /// Source class replaced in the target domain by an unseen class.
    pub drop_class: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub kg: KgSource,
    pub views: Vec<ViewName>,
    pub modes: Vec<Mode>,
    pub method: KgeMethod,
    pub seed: u64,
    pub out: PathBuf,
    pub embed: EmbedConfig,
    pub train: TrainRunConfig,
    pub ridge: f64,
    pub linear: LinearConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                source: DataSource::Synthetic,
                train_per_class: 200,
                test_per_class: 50,
                seed: 0,
                shift: DomainShift {
                    brightness: 0.1,
                    size_scale: 0.85,
                    background_swap: false,
                    noise_std: 0.1,
                },
                drop_class: Some("Ember".into()),
            },
            kg: KgSource::Bundled,
            views: vec![ViewName::Visual],
            modes: vec![Mode::Trainer, Mode::Baseline],
            method: KgeMethod::Gae,
            seed: 0,
            out: PathBuf::from("out"),
            embed: EmbedConfig::default(),
            train: TrainRunConfig {
                epochs: 10,
                ..TrainRunConfig::default()
            },
            ridge: DEFAULT_RIDGE,
            linear: LinearConfig::default(),
        }
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f32, f32)> {
    match parse_list::<f32>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => bail!("{key}: expected two comma-separated numbers"),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Parse `section.key = value` lines on top of the defaults. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `section.key = value`", n + 1))?;
            let key = key.trim();
            if !key.contains('.') {
                bail!("line {}: key {key:?} has no section", n + 1);
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key}", n + 1);
            }
        }
        let mut cfg = Self::default();
        for (key, value) in &entries {
            cfg.apply(key, value, &entries)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str, all: &BTreeMap<String, String>) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset.source" => {
                self.dataset.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar" => {
                        let path = all
                            .get("dataset.cifar_path")
                            .ok_or_else(|| anyhow!("dataset.source = cifar needs dataset.cifar_path"))?;
                        DataSource::Cifar(PathBuf::from(path))
                    }
                    other => bail!("dataset.source: unknown source {other:?}"),
                }
            }
            "dataset.cifar_path" => {}
            "dataset.train_per_class" => self.dataset.train_per_class = parse_value(key, v)?,
            "dataset.test_per_class" => self.dataset.test_per_class = parse_value(key, v)?,
            "dataset.seed" => self.dataset.seed = parse_value(key, v)?,
            "dataset.drop_class" => self.dataset.drop_class = (v != "none" && !v.is_empty()).then(|| v.to_string()),
            "shift.brightness" => self.dataset.shift.brightness = parse_value(key, v)?,
            "shift.size_scale" => self.dataset.shift.size_scale = parse_value(key, v)?,
            "shift.background_swap" => self.dataset.shift.background_swap = parse_value(key, v)?,
            "shift.noise_std" => self.dataset.shift.noise_std = parse_value(key, v)?,
            "kg.source" => {
                self.kg = match v {
                    "bundled" => KgSource::Bundled,
                    "cifar" => KgSource::BundledCifar,
                    "synthetic" => KgSource::BundledSynthetic,
                    path => KgSource::File(PathBuf::from(path)),
                }
            }
            "run.views" => self.views = parse_list(key, v)?,
            "run.modes" => self.modes = parse_list(key, v)?,
            "run.seed" => self.seed = parse_value(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "embed.method" => self.method = parse_value(key, v)?,
            "gae.hidden" => self.embed.gae.hidden = parse_value(key, v)?,
            "gae.out" => self.embed.gae.out = parse_value(key, v)?,
            "gae.epochs" => self.embed.gae.epochs = parse_value(key, v)?,
            "gae.lr" => self.embed.gae.lr = parse_value(key, v)?,
            "gat.heads" => self.embed.gat.heads = parse_value(key, v)?,
            "gat.hidden" => self.embed.gat.hidden = parse_value(key, v)?,
            "gat.out" => self.embed.gat.out = parse_value(key, v)?,
            "gat.slope" => self.embed.gat.slope = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.lr" => t.lr = parse_value(key, v)?,
            "train.lr_decay" => t.lr_decay = parse_value(key, v)?,
            "train.tau" => t.tau = parse_value(key, v)?,
            "encoder.widths" => t.encoder.widths = parse_list(key, v)?,
            "encoder.head_hidden" => t.encoder.head_hidden = parse_value(key, v)?,
            "augment.scale" => t.augment.scale = parse_pair(key, v)?,
            "augment.ratio" => t.augment.ratio = parse_pair(key, v)?,
            "augment.flip" => t.augment.flip_p = parse_value(key, v)?,
            "augment.brightness" => t.augment.brightness = parse_value(key, v)?,
            "augment.contrast" => t.augment.contrast = parse_value(key, v)?,
            "augment.saturation" => t.augment.saturation = parse_value(key, v)?,
            "augment.grayscale" => t.augment.grayscale_p = parse_value(key, v)?,
            "eval.ridge" => self.ridge = parse_value(key, v)?,
            "linear.epochs" => self.linear.epochs = parse_value(key, v)?,
            "linear.lr" => self.linear.lr = parse_value(key, v)?,
            "linear.batch_size" => self.linear.batch_size = parse_value(key, v)?,
            other => bail!("unknown config key {other}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() && self.modes.iter().any(|m| *m != Mode::Baseline) {
            bail!("run.views is empty but a graph-supervised mode is requested");
        }
        if self.modes.is_empty() {
            bail!("run.modes must name at least one of trainer, peer, baseline");
        }
        if self.dataset.train_per_class < 2 || self.dataset.test_per_class == 0 {
            bail!("dataset needs at least two training and one test sample per class");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainRunConfig {
        TrainRunConfig {
            seed: self.seed,
            gat: self.embed.gat.clone(),
            ..self.train.clone()
        }
    }

    /// (view, mode) pairs to train; the baseline appears once without a view.
    pub fn runs(&self) -> Vec<(Option<ViewName>, Mode)> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            if mode == Mode::Baseline {
                out.push((None, mode));
            } else {
                out.extend(self.views.iter().map(|&v| (Some(v), mode)));
            }
        }
        out
    }
}

/// File stem of a trained model: `baseline` or `<mode>_<view>`.
pub fn model_name(view: Option<ViewName>, mode: Mode) -> String {
    match view {
        Some(v) => format!("{mode}_{}", v.as_str()),
        None => mode.to_string(),
    }
}
