use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxf_cli::config::ExperimentConfig;
use ctxf_cli::pipeline::{self, Layout};
use ctxf_core::kg::{KnowledgeGraph, ViewName, ViewSpec};
use ctxf_core::kge::KgeMethod;

#[derive(Parser, Debug)]
#[command(name = "ctxf", version, about = "Knowledge-graph contextual training pipeline")]
struct Cli {
    /// Experiment config with `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, query or summarize the knowledge graph.
    #[command(subcommand)]
    Kg(KgCommand),
    /// Embed one view of the graph.
    Embed {
        #[arg(long, value_enum)]
        view: ViewArg,
        #[arg(long, value_enum, default_value = "gae")]
        method: MethodArg,
    },
    /// Train every (view, mode) pair in the config.
    Train,
    /// Evaluate trained checkpoints on the source and target domains.
    Eval,
}

#[derive(Subcommand, Debug)]
enum KgCommand {
    /// Write the configured graph to `kg/gkg.kgt`.
    Build,
    /// Extract a view into `kg/<name>.kgt`.
    Query(QueryArgs),
    /// Print class, property, individual and triple counts.
    Stats {
        /// Read this `.kgt` file instead of the configured graph.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// A standard view.
    #[arg(long, value_enum, conflicts_with = "predicates")]
    view: Option<ViewArg>,
    /// Comma-separated predicate names for a custom view.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    predicates: Option<Vec<String>>,
    /// Name of a custom view.
    #[arg(long, default_value = "custom")]
    name: String,
    /// Keep `type` chains reachable from the selection (custom views).
    #[arg(long)]
    closure: bool,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewArg {
    Visual,
    Taxonomical,
    Functional,
    Full,
}

impl From<ViewArg> for ViewName {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Visual => ViewName::Visual,
            ViewArg::Taxonomical => ViewName::Taxonomical,
            ViewArg::Functional => ViewName::Functional,
            ViewArg::Full => ViewName::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Gae,
    Gat,
}

impl From<MethodArg> for KgeMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gae => KgeMethod::Gae,
            MethodArg::Gat => KgeMethod::Gat,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn graph(cfg: &ExperimentConfig, input: Option<&PathBuf>) -> Result<KnowledgeGraph> {
    match input {
        Some(p) => KnowledgeGraph::read(p).with_context(|| format!("reading {}", p.display())),
        None => pipeline::load_graph(cfg),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let threads = pipeline::threads_from_env()?;
    log::debug!("worker cap {threads}");
    let layout = Layout::new(&cfg.out);
    match cli.command {
        Command::Kg(KgCommand::Build) => {
            let path = pipeline::kg_build(&cfg, &layout)?;
            println!("wrote {}", path.display());
        }
        Command::Kg(KgCommand::Query(q)) => {
            let g = graph(&cfg, q.input.as_ref())?;
            let spec = match (q.view, q.predicates) {
                (Some(v), _) => ViewSpec::standard(v.into()),
                (None, Some(preds)) => ViewSpec::custom(&q.name, preds, q.closure)?,
                (None, None) => anyhow::bail!("kg query needs --view or --predicates"),
            };
            let (sub, path) = pipeline::kg_query(&g, &spec, &layout)?;
            println!(
                "{} view: {} nodes, {} triples -> {}",
                spec.name,
                sub.n_nodes(),
                sub.triples().len(),
                path.display()
            );
        }
        Command::Kg(KgCommand::Stats { input }) => {
            let g = graph(&cfg, input.as_ref())?;
            println!("{}", pipeline::kg_stats_line(&g));
        }
        Command::Embed { view, method } => {
            let out = pipeline::embed(&cfg, view.into(), method.into(), &layout)?;
            println!(
                "wrote {} ({} classes x {})",
                out.path.display(),
                out.embedding.len(),
                out.embedding.dim()
            );
        }
        Command::Train => {
            let report = pipeline::train(&cfg, &layout)?;
            for m in &report.models {
                let last = m.model.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
                println!("{}: final loss {last:.4} -> {}", m.name, m.checkpoint.display());
            }
        }
        Command::Eval => {
            let report = pipeline::eval(&cfg, &layout)?;
            for s in &report.scores {
                println!(
                    "{:<24} {:<6} {:<2} accuracy {:6.2}%",
                    s.model,
                    s.domain.as_str(),
                    s.head.as_str(),
                    100.0 * s.evaluation.overall
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
