//! End-to-end orchestration: split, optional head training, retrieval,
//! fusion, clustering and evaluation, plus the top-k and corpus sweeps.
//!
//! A run is configured by a UTF-8 `key = value` file (`#` starts a comment).
//! Relative paths resolve against the config file's directory. Every run
//! persists its intermediate files so each stage can be replayed alone.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{augment_dataset, write_provenance, AugmentOptions, FuseOptions};
use crate::cluster::{self, SSKMeansConfig};
use crate::embedstore::{load_matrix, make_split, read_labels, write_split, DatasetSplit, EmbeddingMatrix, LabelMap};
use crate::eval::{pct, subset_report, EvalReport, Predictions, SubsetProtocol};
use crate::reprloss::{train_head, write_trace, LossConfig, ProjectionHead, TrainConfig};
use crate::retrieval::{read_corpus_text, CorpusIndex, DEFAULT_TOP_K};
use crate::{Error, Result};

pub const SPLIT_FILE: &str = "split.csv";
pub const HEAD_FILE: &str = "head.emb";
pub const HEAD_TRACE_FILE: &str = "head_trace.csv";
pub const INDEX_FILE: &str = "index.cix";
pub const FUSED_FILE: &str = "fused.emb";
pub const PROVENANCE_FILE: &str = "provenance.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const CENTROIDS_FILE: &str = "centroids.emb";
pub const OBJECTIVE_FILE: &str = "objective.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.resolved.txt";
pub const SWEEP_FILE: &str = "sweep_topk.csv";
pub const CORPORA_FILE: &str = "compare_corpora.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Split,
    Train,
    Index,
    Augment,
    Cluster,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Train => "train-head",
            Stage::Index => "index",
            Stage::Augment => "augment",
            Stage::Cluster => "cluster",
            Stage::Eval => "eval",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

/// Everything that shapes a run except file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    /// Captions per image; 0 clusters image views only.
    pub k_retrieve: usize,
    pub use_text: bool,
    pub normalize: bool,
    pub seen_fraction: f64,
    pub labeled_fraction: f64,
    pub split_seed: u64,
    pub cluster_seed: u64,
    /// Defaults to the number of classes in the label file.
    pub k_total: Option<usize>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub train_head: bool,
    pub query_with_head: bool,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub subset_protocol: SubsetProtocol,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            k_retrieve: DEFAULT_TOP_K,
            use_text: true,
            normalize: true,
            seen_fraction: 0.5,
            labeled_fraction: 0.5,
            split_seed: 0,
            cluster_seed: 0,
            k_total: None,
            max_iters: cluster::DEFAULT_MAX_ITERS,
            tolerance: cluster::DEFAULT_TOLERANCE,
            train_head: false,
            query_with_head: false,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            subset_protocol: SubsetProtocol::SharedFit,
        }
    }
}

impl PipelineParams {
    fn text_enabled(&self) -> bool {
        self.use_text && self.k_retrieve > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub name: String,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub corpus_text: Option<PathBuf>,
    pub corpus_emb: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub params: PipelineParams,
    base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            images: None,
            labels: None,
            corpus_text: None,
            corpus_emb: None,
            out_dir: PathBuf::from("run"),
            params: PipelineParams::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Self::from_text(&text, &base)?;
        if cfg.name == "dataset" {
            if let Some(stem) = path.file_stem() {
                cfg.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self {
            base_dir: base_dir.to_path_buf(),
            ..Self::default()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: expected key = value", n + 1),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn path(&self, v: &str) -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    /// Applies one `key=value` setting (config line or flag override).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.params;
        match key {
            "name" => self.name = v.to_owned(),
            "images" => self.images = Some(self.path(v)),
            "labels" => self.labels = Some(self.path(v)),
            "corpus_text" => self.corpus_text = Some(self.path(v)),
            "corpus_emb" => self.corpus_emb = Some(self.path(v)),
            "out_dir" => self.out_dir = self.path(v),
            "k_retrieve" => p.k_retrieve = parse_num(key, v)?,
            "use_text" => p.use_text = parse_bool(key, v)?,
            "normalize" => p.normalize = parse_bool(key, v)?,
            "seen_fraction" => p.seen_fraction = parse_num(key, v)?,
            "labeled_fraction" => p.labeled_fraction = parse_num(key, v)?,
            "seed" => {
                let s = parse_num(key, v)?;
                p.split_seed = s;
                p.cluster_seed = s;
                p.train.seed = s;
            }
            "split_seed" => p.split_seed = parse_num(key, v)?,
            "cluster_seed" => p.cluster_seed = parse_num(key, v)?,
            "head_seed" => p.train.seed = parse_num(key, v)?,
            "k_total" => {
                p.k_total = match v {
                    "" | "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "max_iters" => p.max_iters = parse_num(key, v)?,
            "tolerance" => p.tolerance = parse_num(key, v)?,
            "train_head" => p.train_head = parse_bool(key, v)?,
            "query_with_head" => p.query_with_head = parse_bool(key, v)?,
            "tau" => p.loss.tau = parse_num(key, v)?,
            "lambda" => p.loss.lambda = parse_num(key, v)?,
            "epochs" => p.train.epochs = parse_num(key, v)?,
            "lr" => p.train.lr = parse_num(key, v)?,
            "batch_size" => p.train.batch_size = parse_num(key, v)?,
            "noise_sigma" => p.train.noise_sigma = parse_num(key, v)?,
            "head_out_dims" => {
                p.train.out_dims = match v {
                    "" | "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "subset_protocol" => {
                p.subset_protocol = match v {
                    "shared" => SubsetProtocol::SharedFit,
                    "per_subset" => SubsetProtocol::PerSubset,
                    _ => {
                        return Err(Error::invalid(format!(
                            "subset_protocol must be shared or per_subset, got {v:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Resolved settings as `key = value` lines in a fixed order. The output
    /// directory is left out so reruns elsewhere stay byte-identical.
    pub fn resolved(&self) -> String {
        let p = &self.params;
        let opt = |x: &Option<PathBuf>| x.as_ref().map_or(String::new(), |p| p.display().to_string());
        let lines = [
            ("name", self.name.clone()),
            ("images", opt(&self.images)),
            ("labels", opt(&self.labels)),
            ("corpus_text", opt(&self.corpus_text)),
            ("corpus_emb", opt(&self.corpus_emb)),
            ("k_retrieve", p.k_retrieve.to_string()),
            ("use_text", p.use_text.to_string()),
            ("normalize", p.normalize.to_string()),
            ("seen_fraction", p.seen_fraction.to_string()),
            ("labeled_fraction", p.labeled_fraction.to_string()),
            ("split_seed", p.split_seed.to_string()),
            ("cluster_seed", p.cluster_seed.to_string()),
            ("k_total", p.k_total.map_or("auto".into(), |k| k.to_string())),
            ("max_iters", p.max_iters.to_string()),
            ("tolerance", p.tolerance.to_string()),
            ("train_head", p.train_head.to_string()),
            ("query_with_head", p.query_with_head.to_string()),
            ("tau", p.loss.tau.to_string()),
            ("lambda", p.loss.lambda.to_string()),
            ("epochs", p.train.epochs.to_string()),
            ("lr", p.train.lr.to_string()),
            ("batch_size", p.train.batch_size.to_string()),
            ("noise_sigma", p.train.noise_sigma.to_string()),
            ("head_seed", p.train.seed.to_string()),
            (
                "head_out_dims",
                p.train.out_dims.map_or("auto".into(), |k| k.to_string()),
            ),
            (
                "subset_protocol",
                match p.subset_protocol {
                    SubsetProtocol::SharedFit => "shared".into(),
                    SubsetProtocol::PerSubset => "per_subset".into(),
                },
            ),
        ];
        lines
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load_inputs(&self) -> Result<PipelineInputs, PipelineError> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::invalid(format!("config is missing {key:?}")))
                .at(Stage::Config)
        };
        let images = load_matrix(need(&self.images, "images")?).at(Stage::Load)?;
        let labels = read_labels(need(&self.labels, "labels")?).at(Stage::Load)?;
        let corpus = if self.params.text_enabled() {
            let texts = read_corpus_text(need(&self.corpus_text, "corpus_text")?).at(Stage::Load)?;
            let emb = load_matrix(need(&self.corpus_emb, "corpus_emb")?).at(Stage::Load)?;
            Some(Corpus { texts, embeddings: emb })
        } else {
            None
        };
        Ok(PipelineInputs {
            images,
            labels,
            corpus,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub texts: Vec<String>,
    pub embeddings: EmbeddingMatrix,
}

impl Corpus {
    pub fn load(text: impl AsRef<Path>, emb: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            texts: read_corpus_text(text)?,
            embeddings: load_matrix(emb)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub images: EmbeddingMatrix,
    pub labels: LabelMap,
    pub corpus: Option<Corpus>,
}

/// Shared Stage I state: split, head and index are independent of `k`.
struct Prepared {
    split: DatasetSplit,
    images: EmbeddingMatrix,
    head: Option<ProjectionHead>,
    index: Option<CorpusIndex>,
    k_total: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub split: DatasetSplit,
    pub clustering: cluster::ClusteringResult,
    pub head_trace: Option<Vec<f64>>,
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).at(Stage::Write)
}

fn prepare(
    inputs: &PipelineInputs,
    params: &PipelineParams,
    out: Option<&Path>,
) -> Result<(Prepared, Option<Vec<f64>>), PipelineError> {
    let split = make_split(
        &inputs.labels,
        params.seen_fraction,
        params.labeled_fraction,
        params.split_seed,
    )
    .at(Stage::Split)?;
    let ids: Vec<String> = split.iter().map(|(id, _)| id.to_owned()).collect();
    let images = inputs.images.select(&ids).at(Stage::Split)?;

    let mut head = None;
    let mut trace = None;
    if params.train_head {
        let trained = train_head(&images, &split, &params.loss, &params.train).at(Stage::Train)?;
        // Use the head at its persisted precision so later stages replay from the file.
        head = Some(ProjectionHead::from_matrix(&trained.head.to_matrix()).at(Stage::Train)?);
        trace = Some(trained.trace);
    }

    let index = match (&inputs.corpus, params.text_enabled()) {
        (Some(c), true) => Some(CorpusIndex::build(c.texts.clone(), &c.embeddings).at(Stage::Index)?),
        (None, true) => {
            return Err(PipelineError {
                stage: Stage::Index,
                source: Error::invalid("text view enabled but no corpus supplied"),
            })
        }
        _ => None,
    };

    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_split(&split, dir.join(SPLIT_FILE)).at(Stage::Write)?;
        if let (Some(h), Some(t)) = (&head, &trace) {
            h.save(dir.join(HEAD_FILE)).at(Stage::Write)?;
            write_trace(t, dir.join(HEAD_TRACE_FILE)).at(Stage::Write)?;
        }
        if let Some(idx) = &index {
            idx.save(dir.join(INDEX_FILE)).at(Stage::Write)?;
        }
    }
    let k_total = params.k_total.unwrap_or(split.num_total_classes());
    Ok((
        Prepared {
            split,
            images,
            head,
            index,
            k_total,
        },
        trace,
    ))
}

fn finish(
    prep: &Prepared,
    params: &PipelineParams,
    k: usize,
    out: Option<&Path>,
) -> Result<(EvalReport, cluster::ClusteringResult), PipelineError> {
    let opts = AugmentOptions {
        k: if params.use_text { k } else { 0 },
        fuse: FuseOptions {
            normalize: params.normalize,
            use_text: params.use_text,
        },
        head: prep.head.as_ref(),
        query_with_head: params.query_with_head,
    };
    let augmented = augment_dataset(&prep.images, prep.index.as_ref(), &opts).at(Stage::Augment)?;

    let config = SSKMeansConfig {
        k_total: prep.k_total,
        max_iters: params.max_iters,
        tolerance: params.tolerance,
        seed: params.cluster_seed,
    };
    let result = cluster::run(&augmented.fused, &prep.split, &config).at(Stage::Cluster)?;

    let pred: Predictions = result
        .ids
        .iter()
        .cloned()
        .zip(result.assignment.iter().copied())
        .collect();
    let report = subset_report(&pred, &prep.split.truth(), &prep.split, params.subset_protocol)
        .at(Stage::Eval)?;

    if let Some(dir) = out {
        ensure_dir(dir)?;
        augmented.fused.save(dir.join(FUSED_FILE)).at(Stage::Write)?;
        write_provenance(&augmented.provenance, dir.join(PROVENANCE_FILE)).at(Stage::Write)?;
        cluster::write_assignments(&result, dir.join(ASSIGNMENTS_FILE)).at(Stage::Write)?;
        result
            .centroid_matrix()
            .and_then(|m| m.save(dir.join(CENTROIDS_FILE)))
            .at(Stage::Write)?;
        cluster::write_objective_trace(&result, dir.join(OBJECTIVE_FILE)).at(Stage::Write)?;
        report.save(dir.join(REPORT_FILE)).at(Stage::Write)?;
    }
    Ok((report, result))
}

/// Runs the full pipeline on in-memory inputs, persisting artifacts to `out`
/// when given.
pub fn run_on_inputs(
    inputs: &PipelineInputs,
    params: &PipelineParams,
    out: Option<&Path>,
) -> Result<RunOutcome, PipelineError> {
    let (prep, head_trace) = prepare(inputs, params, out)?;
    let (report, clustering) = finish(&prep, params, params.k_retrieve, out)?;
    Ok(RunOutcome {
        report,
        split: prep.split,
        clustering,
        head_trace,
    })
}

/// Loads the configured files, runs the pipeline into `config.out_dir` and
/// records the resolved configuration there.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    let inputs = config.load_inputs()?;
    let out = config.out_dir.as_path();
    ensure_dir(out)?;
    fs::write(out.join(CONFIG_FILE), config.resolved())
        .map_err(|e| Error::io(out.join(CONFIG_FILE), e))
        .at(Stage::Write)?;
    run_on_inputs(&inputs, &config.params, Some(out))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub report: EvalReport,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,acc_all,acc_old,acc_new\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.k,
            pct(Some(r.report.acc_all)),
            pct(r.report.acc_old),
            pct(r.report.acc_new)
        ));
    }
    out
}

/// One run per `k` on shared split, head and index; `k = 0` is image-only.
pub fn sweep_topk_on_inputs(
    inputs: &PipelineInputs,
    params: &PipelineParams,
    k_values: &[usize],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, PipelineError> {
    if k_values.is_empty() {
        return Err(PipelineError {
            stage: Stage::Config,
            source: Error::invalid("no k values to sweep"),
        });
    }
    let max_k = k_values.iter().copied().max().unwrap();
    let mut prep_params = params.clone();
    prep_params.k_retrieve = max_k;
    let (prep, _) = prepare(inputs, &prep_params, out)?;
    if let Some(idx) = &prep.index {
        if max_k > idx.len() {
            return Err(PipelineError {
                stage: Stage::Config,
                source: Error::invalid(format!("k = {max_k} exceeds corpus size {}", idx.len())),
            });
        }
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let dir = out.map(|d| d.join(format!("k{k}")));
        let (report, _) = finish(&prep, params, k, dir.as_deref())?;
        rows.push(SweepRow { k, report });
    }
    if let Some(dir) = out {
        fs::write(dir.join(SWEEP_FILE), sweep_table(&rows))
            .map_err(|e| Error::io(dir.join(SWEEP_FILE), e))
            .at(Stage::Write)?;
    }
    Ok(rows)
}

pub fn sweep_topk(config: &PipelineConfig, k_values: &[usize]) -> Result<Vec<SweepRow>, PipelineError> {
    let mut cfg = config.clone();
    cfg.params.k_retrieve = k_values.iter().copied().max().unwrap_or(0);
    let inputs = cfg.load_inputs()?;
    ensure_dir(&config.out_dir)?;
    fs::write(config.out_dir.join(CONFIG_FILE), config.resolved())
        .map_err(|e| Error::io(config.out_dir.join(CONFIG_FILE), e))
        .at(Stage::Write)?;
    sweep_topk_on_inputs(&inputs, &config.params, k_values, Some(&config.out_dir))
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub name: String,
    pub text: PathBuf,
    pub emb: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusRow {
    pub dataset: String,
    pub corpus: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageRow {
    pub corpus: String,
    pub acc_all: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CorpusTable {
    pub rows: Vec<CorpusRow>,
    pub averages: Vec<AverageRow>,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl CorpusTable {
    /// Averages each corpus's accuracies across datasets.
    pub fn from_rows(rows: Vec<CorpusRow>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r.corpus) {
                names.push(r.corpus.clone());
            }
        }
        let averages = names
            .into_iter()
            .map(|name| {
                let these: Vec<&CorpusRow> = rows.iter().filter(|r| r.corpus == name).collect();
                AverageRow {
                    acc_all: these.iter().map(|r| r.report.acc_all).sum::<f64>() / these.len() as f64,
                    acc_old: mean_opt(these.iter().map(|r| r.report.acc_old)),
                    acc_new: mean_opt(these.iter().map(|r| r.report.acc_new)),
                    corpus: name,
                }
            })
            .collect();
        Self { rows, averages }
    }

    /// CSV `dataset,corpus,acc_all,acc_old,acc_new` followed by `Average` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["dataset", "corpus", "acc_all", "acc_old", "acc_new"]);
        for r in &self.rows {
            let _ = w.write_record([
                r.dataset.clone(),
                r.corpus.clone(),
                pct(Some(r.report.acc_all)),
                pct(r.report.acc_old),
                pct(r.report.acc_new),
            ]);
        }
        for a in &self.averages {
            let _ = w.write_record([
                "Average".to_string(),
                a.corpus.clone(),
                pct(Some(a.acc_all)),
                pct(a.acc_old),
                pct(a.acc_new),
            ]);
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
    }
}

/// Runs every dataset against every corpus with otherwise identical settings.
pub fn compare_corpora_on_inputs(
    datasets: &[(String, PipelineInputs, PipelineParams)],
    corpora: &[(String, Corpus)],
    out: Option<&Path>,
) -> Result<CorpusTable, PipelineError> {
    if corpora.len() < 2 {
        return Err(PipelineError {
            stage: Stage::Config,
            source: Error::invalid("compare-corpora needs at least 2 corpora"),
        });
    }
    let mut rows = Vec::new();
    for (dataset, inputs, params) in datasets {
        for (i, (corpus_name, corpus)) in corpora.iter().enumerate() {
            let with_corpus = PipelineInputs {
                images: inputs.images.clone(),
                labels: inputs.labels.clone(),
                corpus: Some(corpus.clone()),
            };
            let dir = out.map(|d| d.join(dataset).join(format!("{i}-{corpus_name}")));
            let outcome = run_on_inputs(&with_corpus, params, dir.as_deref())?;
            rows.push(CorpusRow {
                dataset: dataset.clone(),
                corpus: corpus_name.clone(),
                report: outcome.report,
            });
        }
    }
    let table = CorpusTable::from_rows(rows);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        fs::write(dir.join(CORPORA_FILE), table.to_csv())
            .map_err(|e| Error::io(dir.join(CORPORA_FILE), e))
            .at(Stage::Write)?;
    }
    Ok(table)
}

pub fn compare_corpora(
    configs: &[PipelineConfig],
    corpora: &[CorpusSpec],
    out_dir: &Path,
) -> Result<CorpusTable, PipelineError> {
    let loaded = corpora
        .iter()
        .map(|c| Ok((c.name.clone(), Corpus::load(&c.text, &c.emb)?)))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Load)?;
    let mut datasets = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut no_corpus = cfg.clone();
        no_corpus.params.use_text = false;
        let inputs = no_corpus.load_inputs()?;
        datasets.push((cfg.name.clone(), inputs, cfg.params.clone()));
    }
    ensure_dir(out_dir)?;
    let resolved: String = configs
        .iter()
        .map(|c| format!("[{}]\n{}", c.name, c.resolved()))
        .collect();
    fs::write(out_dir.join(CONFIG_FILE), resolved)
        .map_err(|e| Error::io(out_dir.join(CONFIG_FILE), e))
        .at(Stage::Write)?;
    compare_corpora_on_inputs(&datasets, &loaded, Some(out_dir))
}
