use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clipgcd::augment::{augment_dataset, write_provenance, AugmentOptions, FuseOptions};
use clipgcd::cluster::{self, SSKMeansConfig};
use clipgcd::embedstore::{load_matrix, make_split, read_labels, read_split, write_split};
use clipgcd::eval::{read_predictions, subset_report, SubsetProtocol};
use clipgcd::harness::{self, CorpusSpec, PipelineConfig};
use clipgcd::reprloss::{train_head, write_trace, LossConfig, ProjectionHead, TrainConfig};
use clipgcd::retrieval::{read_corpus_text, write_hits, CorpusIndex};
use clipgcd::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "clipgcd", version, about = "Retrieval-augmented category discovery over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/caption dataset.
    Synth(SynthArgs),
    /// Split a label file into labeled and unlabeled parts.
    Split(SplitArgs),
    /// Build a caption index from texts and embeddings.
    Index(IndexArgs),
    /// Top-k caption retrieval for a matrix of queries.
    Retrieve(RetrieveArgs),
    /// Fuse image views with their retrieved caption views.
    Augment(AugmentArgs),
    /// Train a projection head with the contrastive objective.
    TrainHead(TrainHeadArgs),
    /// Semi-supervised k-means over feature rows.
    Cluster(ClusterArgs),
    /// Score predictions on the unlabeled items of a split.
    Eval(EvalArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
    /// Rerun the pipeline for several caption counts.
    SweepTopk(SweepArgs),
    /// Run dataset configs against several caption corpora.
    CompareCorpora(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dims_image: usize,
    #[arg(long, default_value_t = 64)]
    dims_text: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 20)]
    captions_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma_image: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_text: f64,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    seen_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    labeled_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus_text: PathBuf,
    #[arg(long)]
    corpus_emb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Emit image views only.
    #[arg(long)]
    no_text: bool,
    /// Keep raw views unnormalized.
    #[arg(long)]
    no_normalize: bool,
    /// Refine image views through a trained head.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Provenance CSV; defaults to `<out>.provenance.csv`.
    #[arg(long)]
    provenance: Option<PathBuf>,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0.25)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long)]
    out_dims: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = cluster::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = cluster::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
    /// Centroids EMB1; defaults to `<out>.centroids.emb`.
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// Objective trace CSV; defaults to `<out>.objective.csv`.
    #[arg(long)]
    objective: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Fit separate matchings for Old and New.
    #[arg(long)]
    per_subset: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 4, 8, 16])]
    k: Vec<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Dataset config; repeat for several datasets.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// `name=TEXT_FILE,EMB_FILE`; at least two.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Pipeline errors already render as `[stage] cause`.
fn flat(e: harness::PipelineError) -> anyhow::Error {
    anyhow!("{e}")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(&args.config).context("[config]")?;
    cfg.apply_overrides(&args.overrides).context("[config]")?;
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    eprint!("{}", cfg.resolved());
    Ok(cfg)
}

fn parse_corpus(spec: &str) -> Result<CorpusSpec> {
    let (name, files) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("[config] corpus {spec:?} is not name=TEXT,EMB"))?;
    let (text, emb) = files
        .split_once(',')
        .ok_or_else(|| anyhow!("[config] corpus {spec:?} is not name=TEXT,EMB"))?;
    Ok(CorpusSpec {
        name: name.to_owned(),
        text: text.into(),
        emb: emb.into(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                num_classes: a.classes,
                dims_image: a.dims_image,
                dims_text: a.dims_text,
                items_per_class: a.per_class,
                captions_per_class: a.captions_per_class,
                sigma_image: a.sigma_image,
                sigma_text: a.sigma_text,
                alpha: a.alpha,
                seed: a.seed,
            };
            let data = synth::generate(&cfg).context("[synth]")?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            data.write_to(&a.out_dir).context("[synth]")?;
        }
        Command::Split(a) => {
            let labels = read_labels(&a.labels).context("[split]")?;
            let split = make_split(&labels, a.seen_fraction, a.labeled_fraction, a.seed).context("[split]")?;
            write_split(&split, &a.out).context("[split]")?;
            eprintln!(
                "seen {} of {} classes; {} labeled, {} unlabeled",
                split.num_seen_classes(),
                split.num_total_classes(),
                split.labeled_ids().len(),
                split.unlabeled_ids().len()
            );
        }
        Command::Index(a) => {
            let texts = read_corpus_text(&a.corpus_text).context("[index]")?;
            let emb = load_matrix(&a.corpus_emb).context("[index]")?;
            CorpusIndex::build(texts, &emb)
                .and_then(|i| i.save(&a.out))
                .context("[index]")?;
        }
        Command::Retrieve(a) => {
            let index = CorpusIndex::load(&a.index).context("[retrieve]")?;
            let queries = load_matrix(&a.queries).context("[retrieve]")?;
            let hits = index.batch_query(&queries, a.k).context("[retrieve]")?;
            write_hits(queries.ids(), &hits, &a.out).context("[retrieve]")?;
        }
        Command::Augment(a) => {
            let images = load_matrix(&a.images).context("[augment]")?;
            let index = match (&a.index, a.no_text || a.k == 0) {
                (Some(p), false) => Some(CorpusIndex::load(p).context("[augment]")?),
                (None, false) => bail!("[augment] --index is required unless --no-text or --k 0"),
                _ => None,
            };
            let head = a.head.as_ref().map(ProjectionHead::load).transpose().context("[augment]")?;
            let opts = AugmentOptions {
                k: a.k,
                fuse: FuseOptions {
                    normalize: !a.no_normalize,
                    use_text: !a.no_text,
                },
                head: head.as_ref(),
                query_with_head: false,
            };
            let out = augment_dataset(&images, index.as_ref(), &opts).context("[augment]")?;
            out.fused.save(&a.out).context("[augment]")?;
            let prov = a.provenance.unwrap_or_else(|| sibling(&a.out, ".provenance.csv"));
            write_provenance(&out.provenance, prov).context("[augment]")?;
        }
        Command::TrainHead(a) => {
            let images = load_matrix(&a.images).context("[train-head]")?;
            let split = read_split(&a.split).context("[train-head]")?;
            let loss = LossConfig::new(a.tau, a.lambda).context("[train-head]")?;
            let train = TrainConfig {
                epochs: a.epochs,
                lr: a.lr,
                seed: a.seed,
                batch_size: a.batch_size,
                noise_sigma: a.noise_sigma,
                out_dims: a.out_dims,
            };
            let trained = train_head(&images, &split, &loss, &train).context("[train-head]")?;
            trained.head.save(&a.out).context("[train-head]")?;
            let trace = a.trace.unwrap_or_else(|| sibling(&a.out, ".trace.csv"));
            write_trace(&trained.trace, trace).context("[train-head]")?;
        }
        Command::Cluster(a) => {
            let features = load_matrix(&a.features).context("[cluster]")?;
            let split = read_split(&a.split).context("[cluster]")?;
            let config = SSKMeansConfig {
                k_total: a.k,
                max_iters: a.max_iters,
                tolerance: a.tolerance,
                seed: a.seed,
            };
            let result = cluster::run(&features, &split, &config).context("[cluster]")?;
            cluster::write_assignments(&result, &a.out).context("[cluster]")?;
            let centroids = a.centroids.unwrap_or_else(|| sibling(&a.out, ".centroids.emb"));
            result
                .centroid_matrix()
                .and_then(|m| m.save(centroids))
                .context("[cluster]")?;
            let objective = a.objective.unwrap_or_else(|| sibling(&a.out, ".objective.csv"));
            cluster::write_objective_trace(&result, objective).context("[cluster]")?;
            eprintln!("{} iterations", result.iterations_run);
        }
        Command::Eval(a) => {
            let pred = read_predictions(&a.pred).context("[eval]")?;
            let truth = read_labels(&a.truth).context("[eval]")?;
            let split = read_split(&a.split).context("[eval]")?;
            let protocol = if a.per_subset {
                SubsetProtocol::PerSubset
            } else {
                SubsetProtocol::SharedFit
            };
            let report = subset_report(&pred, &truth, &split, protocol).context("[eval]")?;
            report.save(&a.out).context("[eval]")?;
            println!("{}", report.summary_line());
        }
        Command::Run(a) => {
            let cfg = load_config(&a.config)?;
            let outcome = harness::run_pipeline(&cfg).map_err(flat)?;
            println!("{}", outcome.report.summary_line());
        }
        Command::SweepTopk(a) => {
            let cfg = load_config(&a.config)?;
            let rows = harness::sweep_topk(&cfg, &a.k).map_err(flat)?;
            print!("{}", harness::sweep_table(&rows));
        }
        Command::CompareCorpora(a) => {
            let mut configs = Vec::with_capacity(a.configs.len());
            for path in &a.configs {
                let mut cfg = PipelineConfig::from_file(path).context("[config]")?;
                cfg.apply_overrides(&a.overrides).context("[config]")?;
                configs.push(cfg);
            }
            let corpora = a.corpora.iter().map(|c| parse_corpus(c)).collect::<Result<Vec<_>>>()?;
            let table = harness::compare_corpora(&configs, &corpora, &a.out_dir).map_err(flat)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
