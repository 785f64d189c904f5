//! The kg, embed, train and eval stages. Every artifact lands under the
//! configured output directory.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ctxf_core::analysis::{class_mean_embeddings, cosine_matrix, delta_table, emit_heatmap, SimilarityMatrix};
use ctxf_core::datasets::{generate, load_cifar10, shift, ImageDataset, SyntheticSpec};
use ctxf_core::infusion::{train_contextual, Mode, Supervision, TrainedModel};
use ctxf_core::kg::{
    build_cifar_gkg, build_synthetic_gkg, extract_view, KnowledgeGraph, ViewName, ViewSpec, ViewSubgraph,
};
use ctxf_core::kge::{embed_view, KgEmbedding, KgeMethod};
use ctxf_core::predict::{evaluate, metrics_csv, Evaluation, GaussianHead, LinearHead};
use log::{info, warn};

use crate::config::{model_name, DataSource, ExperimentConfig, KgSource};

/// Output layout below the run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn kg(&self) -> Result<PathBuf> {
        self.dir("kg")
    }

    pub fn embed(&self) -> Result<PathBuf> {
        self.dir("embed")
    }

    pub fn train(&self) -> Result<PathBuf> {
        self.dir("train")
    }

    pub fn eval(&self) -> Result<PathBuf> {
        self.dir("eval")
    }

    pub fn embedding_file(&self, view: ViewName, method: KgeMethod) -> PathBuf {
        self.root
            .join("embed")
            .join(format!("{}_{}.ctxe", view.as_str(), method.as_str()))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("train").join(format!("{name}.ctxf"))
    }
}

/// Worker cap from `CTXF_THREADS`; everything here runs on one thread, so
/// the value is only validated and reported.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CTXF_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("CTXF_THREADS must be a positive integer, got {v:?}"),
        },
    }
}

pub fn load_graph(cfg: &ExperimentConfig) -> Result<KnowledgeGraph> {
    match (&cfg.kg, &cfg.dataset.source) {
        (KgSource::File(path), _) => {
            KnowledgeGraph::read(path).with_context(|| format!("reading graph {}", path.display()))
        }
        (KgSource::BundledSynthetic, _) | (KgSource::Bundled, DataSource::Synthetic) => {
            Ok(build_synthetic_gkg(&SyntheticSpec::default_ten())?)
        }
        (KgSource::BundledCifar, _) | (KgSource::Bundled, DataSource::Cifar(_)) => Ok(build_cifar_gkg()),
    }
}

pub fn kg_build(cfg: &ExperimentConfig, layout: &Layout) -> Result<PathBuf> {
    let g = load_graph(cfg)?;
    g.validate()?;
    let path = layout.kg()?.join("gkg.kgt");
    g.write(&path)?;
    Ok(path)
}

pub fn kg_query(g: &KnowledgeGraph, spec: &ViewSpec, layout: &Layout) -> Result<(ViewSubgraph, PathBuf)> {
    let sub = extract_view(g, spec)?;
    let path = layout.kg()?.join(format!("{}.kgt", spec.name));
    sub.to_graph()?.write(&path)?;
    Ok((sub, path))
}

pub fn kg_stats_line(g: &KnowledgeGraph) -> String {
    let s = g.stats();
    format!(
        "{} classes, {} properties, {} individuals, {} triples",
        s.classes, s.properties, s.individuals, s.triples
    )
}

#[derive(Clone, Debug)]
pub struct EmbedOutput {
    pub embedding: KgEmbedding,
    pub path: PathBuf,
    pub similarity: SimilarityMatrix,
    pub heatmap: (PathBuf, PathBuf),
}

pub fn embed(cfg: &ExperimentConfig, view: ViewName, method: KgeMethod, layout: &Layout) -> Result<EmbedOutput> {
    let g = load_graph(cfg)?;
    let sub = extract_view(&g, &ViewSpec::standard(view))
        .with_context(|| format!("extracting the {} view", view.as_str()))?;
    let embedding = embed_view(&sub, method, &cfg.embed, cfg.seed)?;
    let dir = layout.embed()?;
    let path = layout.embedding_file(view, method);
    embedding.save(&path)?;
    let similarity = cosine_matrix(embedding.class_names(), &embedding.matrix())?;
    let heatmap = emit_heatmap(
        &similarity,
        dir.join(format!("{}_{}_similarity", view.as_str(), method.as_str())),
    )?;
    info!("wrote {}", path.display());
    Ok(EmbedOutput {
        embedding,
        path,
        similarity,
        heatmap,
    })
}

/// Source train/test splits and the shifted target split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub target: ImageDataset,
    /// Supercategory of every class named in any split.
    pub groups: Vec<(String, String)>,
}

const TEST_STREAM: u64 = 0x7e57;
const TARGET_STREAM: u64 = 0x7a26e7;

fn per_class_subset(ds: &ImageDataset, n: usize) -> ImageDataset {
    let mut taken = vec![0usize; ds.class_names().len()];
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let y = ds.labels()[i];
            taken[y] += 1;
            taken[y] <= n
        })
        .collect();
    ds.subset(&idx)
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    match &d.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec::default_ten();
            let train = generate(&spec, d.train_per_class, d.seed)?;
            let test = generate(&spec, d.test_per_class, d.seed ^ TEST_STREAM)?;
            let target_spec = match &d.drop_class {
                Some(name) => {
                    let idx = spec
                        .classes
                        .iter()
                        .position(|c| &c.name == name)
                        .with_context(|| format!("dataset.drop_class {name} is not a source class"))?;
                    spec.with_swap(idx, SyntheticSpec::unseen_class())?
                }
                None => spec.clone(),
            };
            let clean = generate(&target_spec, d.test_per_class, d.seed ^ TARGET_STREAM)?;
            let target = shift(&clean, &d.shift, d.seed ^ TARGET_STREAM)?;
            let mut groups: Vec<(String, String)> =
                spec.class_names().into_iter().zip(spec.supercategories()).collect();
            for (name, sup) in target_spec.class_names().into_iter().zip(target_spec.supercategories()) {
                if !groups.iter().any(|(n, _)| *n == name) {
                    groups.push((name, sup));
                }
            }
            Ok(Splits {
                train,
                test,
                target,
                groups,
            })
        }
        DataSource::Cifar(dir) => {
            let (train, test) = load_cifar10(dir)?;
            let train = per_class_subset(&train, d.train_per_class);
            let test = per_class_subset(&test, d.test_per_class);
            let target = shift(&test, &d.shift, d.seed ^ TARGET_STREAM)?;
            let groups = train
                .class_names()
                .iter()
                .map(|n| {
                    let artifact = ["Airplane", "Automobile", "Ship", "Truck"].contains(&n.as_str());
                    (n.clone(), if artifact { "Artifact" } else { "Organism" }.to_string())
                })
                .collect();
            Ok(Splits {
                train,
                test,
                target,
                groups,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub name: String,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub model: TrainedModel,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub models: Vec<TrainOutput>,
    pub warnings: Vec<String>,
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<TrainReport> {
    let splits = load_splits(cfg)?;
    let dir = layout.train()?;
    let run_cfg = cfg.train_config();
    let mut report = TrainReport::default();
    let mut graph = None;
    for (view, mode) in cfg.runs() {
        let name = model_name(view, mode);
        info!("training {name}");
        let model = match (view, mode) {
            (Some(view), Mode::Trainer) => {
                let path = layout.embedding_file(view, cfg.method);
                if !path.exists() {
                    bail!(
                        "embedding {} not found; run `ctxf embed --view {} --method {}` first",
                        path.display(),
                        view.as_str(),
                        cfg.method.as_str()
                    );
                }
                let emb = KgEmbedding::load(&path)?;
                train_contextual(&splits.train, Supervision::Trainer(&emb), &run_cfg)?
            }
            (Some(view), Mode::Peer) => {
                if graph.is_none() {
                    graph = Some(load_graph(cfg)?);
                }
                let g = graph.as_ref().expect("graph loaded above");
                let sub = extract_view(g, &ViewSpec::standard(view))?;
                train_contextual(&splits.train, Supervision::Peer(&sub), &run_cfg)?
            }
            _ => {
                let msg = "baseline training ignores the kg section".to_string();
                warn!("{msg}");
                report.warnings.push(msg);
                train_contextual(&splits.train, Supervision::Baseline, &run_cfg)?
            }
        };
        let checkpoint = layout.checkpoint(&name);
        model.save(&checkpoint)?;
        let log = dir.join(format!("{name}_log.csv"));
        fs::write(&log, model.log.to_csv())?;
        report.models.push(TrainOutput {
            name,
            checkpoint,
            log,
            model,
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Gaussian,
    Linear,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Gaussian => "gp",
            Head::Linear => "ll",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScoredModel {
    pub model: String,
    pub head: Head,
    pub domain: Domain,
    pub evaluation: Evaluation,
    /// Share of misclassifications that stay within the true supercategory.
    pub within_group_errors: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub scores: Vec<ScoredModel>,
    pub files: Vec<PathBuf>,
    pub similarities: Vec<(String, SimilarityMatrix)>,
}

impl EvalReport {
    pub fn get(&self, model: &str, head: Head, domain: Domain) -> Option<&ScoredModel> {
        self.scores
            .iter()
            .find(|s| s.model == model && s.head == head && s.domain == domain)
    }
}

/// Re-label `ds` into `names`, which must contain all of its classes.
fn relabel(ds: &ImageDataset, names: &[String]) -> Result<ImageDataset> {
    let map: Vec<usize> = ds
        .class_names()
        .iter()
        .map(|n| {
            names
                .iter()
                .position(|m| m == n)
                .context("class missing from the joint list")
        })
        .collect::<Result<_>>()?;
    let labels = ds.labels().iter().map(|&y| map[y]).collect();
    Ok(ImageDataset::new(
        ds.dims(),
        ds.pixels().to_vec(),
        labels,
        names.to_vec(),
    )?)
}

pub fn eval(cfg: &ExperimentConfig, layout: &Layout) -> Result<EvalReport> {
    let splits = load_splits(cfg)?;
    let dir = layout.eval()?;
    let source_names = splits.train.class_names().to_vec();
    let n_known = source_names.len();
    let mut joint = source_names.clone();
    for n in splits.target.class_names() {
        if !joint.contains(n) {
            joint.push(n.clone());
        }
    }
    let target = relabel(&splits.target, &joint)?;
    let group_of = |names: &[String]| -> Vec<String> {
        names
            .iter()
            .map(|n| {
                splits
                    .groups
                    .iter()
                    .find(|(c, _)| c == n)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_default()
            })
            .collect()
    };
    let groups = group_of(&joint);
    let group_ids: Vec<usize> = groups
        .iter()
        .map(|g| groups.iter().position(|h| h == g).unwrap_or(0))
        .collect();

    let (h, w, _) = splits.train.dims();
    let mut report = EvalReport::default();
    for (view, mode) in cfg.runs() {
        let name = model_name(view, mode);
        let path = layout.checkpoint(&name);
        if !path.exists() {
            bail!("checkpoint {} not found; run `ctxf train` first", path.display());
        }
        let model = TrainedModel::load(&path, mode, h, w).with_context(|| format!("loading {}", path.display()))?;
        let enc = &model.encoder;
        let z_train = enc.embed_dataset(&splits.train)?;
        let gp = GaussianHead::fit(&z_train, splits.train.labels(), n_known, cfg.ridge)?;
        let mut linear_cfg = cfg.linear.clone();
        linear_cfg.seed = cfg.seed;
        let ll = LinearHead::fit(&z_train, splits.train.labels(), n_known, &linear_cfg)?;
        for (domain, ds, names) in [
            (Domain::Source, &splits.test, &source_names),
            (Domain::Target, &target, &joint),
        ] {
            let z = enc.embed_dataset(ds)?;
            for head in [Head::Gaussian, Head::Linear] {
                let pred = match head {
                    Head::Gaussian => gp.predict(&z)?,
                    Head::Linear => ll.predict(&z)?,
                };
                let evaluation = evaluate(&pred, ds.labels(), names, n_known)?;
                let within_group_errors = known_only_within(&evaluation, &group_ids, n_known);
                report.scores.push(ScoredModel {
                    model: name.clone(),
                    head,
                    domain,
                    evaluation,
                    within_group_errors,
                });
            }
        }
        for (domain, ds) in [(Domain::Source, &splits.test), (Domain::Target, &splits.target)] {
            let means = class_mean_embeddings(enc, ds)?;
            let m = cosine_matrix(ds.class_names(), &means)?;
            let (csv, svg) = emit_heatmap(&m, dir.join(format!("{name}_{}_similarity", domain.as_str())))?;
            report.files.extend([csv, svg]);
            report.similarities.push((format!("{name}_{}", domain.as_str()), m));
        }
    }

    for domain in [Domain::Source, Domain::Target] {
        for head in [Head::Gaussian, Head::Linear] {
            let rows: Vec<(String, Evaluation)> = report
                .scores
                .iter()
                .filter(|s| s.domain == domain && s.head == head)
                .map(|s| (s.model.clone(), s.evaluation.clone()))
                .collect();
            let stem = format!("{}_{}", domain.as_str(), head.as_str());
            let path = dir.join(format!("metrics_{stem}.csv"));
            fs::write(&path, metrics_csv(&rows)?)?;
            report.files.push(path);
            let base = rows.iter().find(|(n, _)| n == "baseline");
            let others: Vec<(String, Evaluation)> = rows.iter().filter(|(n, _)| n != "baseline").cloned().collect();
            if let (Some((bn, be)), false) = (base, others.is_empty()) {
                let table = delta_table((bn, be), &others)?;
                let path = dir.join(format!("deltas_{stem}.csv"));
                fs::write(&path, table.to_csv())?;
                report.files.push(path);
            }
        }
    }
    let path = dir.join("supercategory_errors.csv");
    fs::write(&path, supercategory_csv(&report))?;
    report.files.push(path);
    Ok(report)
}

/// Within-supercategory share of errors on samples of known classes.
fn known_only_within(ev: &Evaluation, groups: &[usize], n_known: usize) -> Option<f64> {
    let mut known = ev.clone();
    for row in known.confusion.iter_mut().skip(n_known) {
        row.iter_mut().for_each(|c| *c = 0);
    }
    known.within_group_error_rate(groups)
}

fn supercategory_csv(report: &EvalReport) -> String {
    let mut out = String::from("model,domain,head,accuracy,within_supercategory_error_share\n");
    for s in &report.scores {
        let share = s
            .within_group_errors
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{},{},{},{:.4},{share}\n",
            s.model,
            s.domain.as_str(),
            s.head.as_str(),
            s.evaluation.overall
        ));
    }
    out
}
