//! Command-line front end. Every subcommand resolves one [`RunConfig`]
//! (defaults, then `--config` file, then flags), echoes it next to its
//! outputs, and maps failures to exit codes: 0 success, 1 runtime or data
//! failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, FlatDataset};
use crate::error::Error;
use crate::featurize::{self, FeatureSpec, QueryGraph};
use crate::generalization::{self, BaselineLearner, GeneralizationReport, ZeroShotLearner};
use crate::metrics::{self, QErrorSummary};
use crate::model::{self, FinetuneConfig, GraphDataset, ModelConfig, ZeroShotModel};
use crate::synth::{self, OracleParams, SynthParams, WorkloadMode};
use crate::trace::{CardSource, Labels, TraceCorpus};
use crate::train::Loss;

/// Fully resolved settings of one invocation. The config file uses the
/// same keys, with flags' dashes written as underscores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub cards: CardSource,
    pub threads: Option<usize>,

    pub trace: Option<PathBuf>,
    pub catalogs: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_model: Option<PathBuf>,

    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub combiner_depth: usize,
    pub estimator_depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: Loss,
    pub val_fraction: f64,

    pub finetune_lr: f64,
    pub finetune_epochs: usize,

    pub num_databases: usize,
    pub queries_per_db: usize,
    pub modes: Vec<WorkloadMode>,
    pub noise_sigma: f64,
    pub sigma_est: f64,

    pub k_values: Vec<usize>,
    pub target: Option<String>,
    pub sample_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let f = FinetuneConfig::default();
        let s = SynthParams::default();
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2],
            cards: CardSource::Actual,
            threads: None,
            trace: None,
            catalogs: None,
            model: None,
            out: None,
            out_model: None,
            hidden_dim: m.hidden_dim,
            encoder_depth: m.encoder_depth,
            combiner_depth: m.combiner_depth,
            estimator_depth: m.estimator_depth,
            lr: m.lr,
            batch_size: m.batch_size,
            max_epochs: m.max_epochs,
            patience: m.patience,
            loss: m.loss,
            val_fraction: generalization::DEFAULT_VAL_FRACTION,
            finetune_lr: f.lr,
            finetune_epochs: f.epochs,
            num_databases: s.num_databases,
            queries_per_db: 500,
            modes: vec![WorkloadMode::Standard],
            noise_sigma: OracleParams::default().noise_sigma,
            sigma_est: s.sigma_est,
            k_values: vec![1, 2, 4, 8],
            target: None,
            sample_id: None,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            encoder_depth: self.encoder_depth,
            combiner_depth: self.combiner_depth,
            estimator_depth: self.estimator_depth,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            loss: self.loss,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune_lr,
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "zscost", version, about = "Zero-shot query runtime estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic catalogs and a labeled trace
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        num_databases: Option<usize>,
        #[arg(long)]
        queries_per_db: Option<usize>,
        /// Comma-separated workload modes (standard, complex, index)
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<WorkloadMode>>,
        /// Lognormal sigma of runtime noise
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Lognormal sigma of estimated cardinalities
        #[arg(long)]
        sigma_est: Option<f64>,
    },
    /// Train a model on a trace
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Where to write the model file
        #[arg(long)]
        out_model: Option<PathBuf>,
    },
    /// Predict runtimes; labels are not needed
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV file to write
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Q-error metrics of a model on a labeled trace
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory for metrics JSON and per-sample CSV; stdout only if absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-database-out generalization estimate
    Lodo {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out error against the number of training databases
    Curve {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        /// Held-out database (default: the first one)
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue training a model on extra samples
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        #[arg(long)]
        finetune_lr: Option<f64>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Flat-vector baseline and graph model on identical folds
    Baseline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print encoded query graphs (edges and feature vectors)
    DumpGraph {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Normalize with this model's statistics instead of the trace's own
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
        /// File to write instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// JSON file providing defaults for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (falls back to ZSCOST_THREADS)
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cardinality source: actual or estimated
    #[arg(long)]
    pub cards: Option<CardSource>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// JSON Lines trace file
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Directory of per-database catalog files
    #[arg(long)]
    pub catalogs: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub combiner_depth: Option<usize>,
    #[arg(long)]
    pub estimator_depth: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// qerror or log_qerror
    #[arg(long)]
    pub loss: Option<Loss>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

macro_rules! set {
    ($cfg:ident, $src:ident => $($field:ident),+) => {
        $( if let Some(v) = $src.$field.clone() { $cfg.$field = v; } )+
    };
}

fn merge_common(cfg: &mut RunConfig, c: &CommonArgs) {
    set!(cfg, c => seed, cards);
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
}

fn merge_data(cfg: &mut RunConfig, d: &DataArgs) {
    if d.trace.is_some() {
        cfg.trace = d.trace.clone();
    }
    if d.catalogs.is_some() {
        cfg.catalogs = d.catalogs.clone();
    }
}

fn merge_model(cfg: &mut RunConfig, m: &ModelArgs) {
    set!(cfg, m => hidden_dim, encoder_depth, combiner_depth, estimator_depth, lr, batch_size,
        max_epochs, patience, loss, val_fraction);
}

fn merge_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn load_config_file(path: &Option<PathBuf>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))
}

/// Applies the config file and flags of a subcommand.
pub fn resolve(command: &Command) -> CliResult<RunConfig> {
    let common = match command {
        Command::Generate { common, .. }
        | Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Lodo { common, .. }
        | Command::Curve { common, .. }
        | Command::Finetune { common, .. }
        | Command::Baseline { common, .. }
        | Command::DumpGraph { common, .. } => common,
    };
    let mut cfg = load_config_file(&common.config)?;
    merge_common(&mut cfg, common);
    match command {
        Command::Generate {
            out,
            num_databases,
            queries_per_db,
            modes,
            noise_sigma,
            sigma_est,
            ..
        } => {
            merge_path(&mut cfg.out, out);
            let a = (num_databases, queries_per_db, modes, noise_sigma, sigma_est);
            if let Some(v) = a.0 {
                cfg.num_databases = *v;
            }
            if let Some(v) = a.1 {
                cfg.queries_per_db = *v;
            }
            if let Some(v) = a.2 {
                cfg.modes = v.clone();
            }
            if let Some(v) = a.3 {
                cfg.noise_sigma = *v;
            }
            if let Some(v) = a.4 {
                cfg.sigma_est = *v;
            }
        }
        Command::Train {
            data,
            model,
            out_model,
            ..
        } => {
            merge_data(&mut cfg, data);
            merge_model(&mut cfg, model);
            merge_path(&mut cfg.out_model, out_model);
        }
        Command::Predict {
            data, model, out, ..
        }
        | Command::Evaluate {
            data, model, out, ..
        } => {
            merge_data(&mut cfg, data);
            merge_path(&mut cfg.model, model);
            merge_path(&mut cfg.out, out);
        }
        Command::Lodo {
            data,
            model,
            seeds,
            out,
            ..
        }
        | Command::Baseline {
            data,
            model,
            seeds,
            out,
            ..
        } => {
            merge_data(&mut cfg, data);
            merge_model(&mut cfg, model);
            if let Some(s) = seeds {
                cfg.seeds = s.clone();
            }
            merge_path(&mut cfg.out, out);
        }
        Command::Curve {
            data,
            model,
            seeds,
            k_values,
            target,
            out,
            ..
        } => {
            merge_data(&mut cfg, data);
            merge_model(&mut cfg, model);
            if let Some(s) = seeds {
                cfg.seeds = s.clone();
            }
            if let Some(k) = k_values {
                cfg.k_values = k.clone();
            }
            if target.is_some() {
                cfg.target = target.clone();
            }
            merge_path(&mut cfg.out, out);
        }
        Command::Finetune {
            data,
            model,
            out_model,
            finetune_lr,
            finetune_epochs,
            batch_size,
            ..
        } => {
            merge_data(&mut cfg, data);
            merge_path(&mut cfg.model, model);
            merge_path(&mut cfg.out_model, out_model);
            if let Some(v) = finetune_lr {
                cfg.finetune_lr = *v;
            }
            if let Some(v) = finetune_epochs {
                cfg.finetune_epochs = *v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = *v;
            }
        }
        Command::DumpGraph {
            data,
            model,
            sample_id,
            out,
            ..
        } => {
            merge_data(&mut cfg, data);
            merge_path(&mut cfg.model, model);
            merge_path(&mut cfg.out, out);
            if sample_id.is_some() {
                cfg.sample_id = sample_id.clone();
            }
        }
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("ZSCOST_THREADS") {
            let n = v
                .parse()
                .map_err(|_| usage(format!("ZSCOST_THREADS={v} is not a thread count")))?;
            cfg.threads = Some(n);
        }
    }
    if cfg.threads == Some(0) {
        return Err(usage("--threads must be positive"));
    }
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| usage(format!("missing required flag {flag}")))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn save_model(m: &ZeroShotModel, path: &Path) -> CliResult<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(m.save(path)?)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialization");
    s.push('\n');
    s
}

/// Writes `<name>.config.json` into `dir`.
fn echo_config(dir: &Path, name: &str, cfg: &RunConfig) -> CliResult<()> {
    write_file(&dir.join(format!("{name}.config.json")), &to_json(cfg))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Sibling path with `suffix` appended to the file name.
fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut name = p.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    p.with_file_name(name)
}

fn load_corpus(cfg: &RunConfig, labels: Labels) -> CliResult<TraceCorpus> {
    let trace = required(&cfg.trace, "--trace")?;
    let catalogs = required(&cfg.catalogs, "--catalogs")?;
    let (corpus, errors) = TraceCorpus::load(trace, catalogs, labels)?;
    if !errors.is_empty() {
        warn!("{} trace lines skipped", errors.len());
    }
    if corpus.is_empty() {
        return Err(
            Error::InsufficientData(format!("no usable samples in {}", trace.display())).into(),
        );
    }
    Ok(corpus)
}

fn load_model(cfg: &RunConfig) -> CliResult<ZeroShotModel> {
    Ok(ZeroShotModel::load(required(&cfg.model, "--model")?)?)
}

fn cmd_generate(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "--out")?;
    if cfg.modes.is_empty() {
        return Err(usage("--modes needs at least one mode"));
    }
    let params = SynthParams {
        num_databases: cfg.num_databases,
        sigma_est: cfg.sigma_est,
        ..SynthParams::default()
    };
    let oracle = OracleParams {
        noise_sigma: cfg.noise_sigma,
        ..OracleParams::default()
    };
    let summary = synth::gen_corpus(
        &params,
        &oracle,
        &cfg.modes,
        cfg.queries_per_db,
        cfg.seed,
        out,
    )?;
    echo_config(out, "generate", cfg)?;
    let mix: Vec<String> = summary
        .mode_mix
        .iter()
        .map(|(m, n)| format!("{m}={n}"))
        .collect();
    println!(
        "generated {} databases, {} queries ({})",
        summary.databases,
        summary.queries,
        mix.join(", ")
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let out_model = required(&cfg.out_model, "--out-model")?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    let (m, report) = model::train(&corpus, &cfg.model_config(), cfg.cards, cfg.val_fraction)?;
    save_model(&m, out_model)?;
    write_file(&sibling(out_model, ".report.json"), &to_json(&report))?;
    echo_config(&parent_dir(out_model), "train", cfg)?;
    match report.final_val_median() {
        Some(q) => println!(
            "final validation median q-error {q:.4} (best epoch {})",
            report.best_epoch
        ),
        None => println!(
            "trained {} epochs, no validation split",
            report.epochs.len()
        ),
    }
    println!("model checksum {}", m.checksum());
    Ok(())
}

fn featurize_with(
    m: &ZeroShotModel,
    corpus: &TraceCorpus,
    source: CardSource,
) -> CliResult<Vec<QueryGraph>> {
    Ok(corpus
        .samples
        .par_iter()
        .map(|s| {
            featurize::build_query_graph(
                s,
                corpus.catalog(&s.database_id)?,
                source,
                m.spec(),
                m.normalizer(),
            )
        })
        .collect::<crate::Result<Vec<_>>>()?)
}

fn cmd_predict(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "--out")?;
    let m = load_model(cfg)?;
    let corpus = load_corpus(cfg, Labels::Optional)?;
    let graphs = featurize_with(&m, &corpus, m.card_source())?;
    let preds = m.predict_many(&graphs.iter().collect::<Vec<_>>())?;
    let mut csv = String::from("database_id,sample_id,predicted_s\n");
    for (s, p) in corpus.samples.iter().zip(&preds) {
        let _ = writeln!(csv, "{},{},{}", s.database_id, s.sample_id, p);
    }
    write_file(out, &csv)?;
    echo_config(&parent_dir(out), "predict", cfg)?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    cards: CardSource,
    overall: QErrorSummary,
    databases: BTreeMap<String, QErrorSummary>,
}

fn cmd_evaluate(cfg: &RunConfig, cards_flag: Option<CardSource>) -> CliResult<()> {
    let m = load_model(cfg)?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    // without an explicit choice, the model's own cardinality source is used
    let source = cards_flag.unwrap_or(m.card_source());
    let graphs = featurize_with(&m, &corpus, source)?;
    let preds = m.predict_many(&graphs.iter().collect::<Vec<_>>())?;
    let mut csv = String::from("database_id,sample_id,actual_s,predicted_s,qerror\n");
    let mut all = Vec::new();
    let mut per_db: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (s, &p) in corpus.samples.iter().zip(&preds) {
        let c = s.runtime()?;
        let q = metrics::qerror(c, p)?;
        let _ = writeln!(csv, "{},{},{},{},{}", s.database_id, s.sample_id, c, p, q);
        all.push(q);
        per_db.entry(s.database_id.clone()).or_default().push(q);
    }
    let report = EvaluationReport {
        cards: source,
        overall: QErrorSummary::from_qerrors(&all)?,
        databases: per_db
            .iter()
            .map(|(db, q)| Ok((db.clone(), QErrorSummary::from_qerrors(q)?)))
            .collect::<crate::Result<_>>()?,
    };
    let json = to_json(&report);
    if let Some(out) = &cfg.out {
        write_file(&out.join("evaluation.json"), &json)?;
        write_file(&out.join("evaluation.csv"), &csv)?;
        echo_config(out, "evaluate", cfg)?;
    }
    emit(&json);
    Ok(())
}

fn check_databases(corpus: &TraceCorpus) -> CliResult<()> {
    let n = corpus.by_database().len();
    if n < 2 {
        return Err(
            Error::InsufficientData(format!("need at least 2 databases, found {n}")).into(),
        );
    }
    Ok(())
}

fn check_seeds(cfg: &RunConfig) -> CliResult<()> {
    if cfg.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    Ok(())
}

fn sample_ids(corpus: &TraceCorpus) -> Vec<String> {
    corpus.samples.iter().map(|s| s.sample_id.clone()).collect()
}

fn cmd_lodo(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "--out")?;
    check_seeds(cfg)?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    check_databases(&corpus)?;
    let data = GraphDataset::from_corpus(&corpus, cfg.cards)?;
    let learner = ZeroShotLearner {
        data: &data,
        config: cfg.model_config(),
        val_fraction: cfg.val_fraction,
    };
    let report = generalization::lodo(&learner, &cfg.seeds)?;
    write_file(&out.join("lodo.json"), &to_json(&report))?;
    write_file(&out.join("lodo.txt"), &format!("{report}\n"))?;
    write_file(&out.join("lodo.csv"), &report.to_csv(&sample_ids(&corpus)))?;
    echo_config(out, "lodo", cfg)?;
    emit(&format!("{report}\n"));
    Ok(())
}

fn cmd_curve(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "--out")?;
    check_seeds(cfg)?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    let dbs = corpus.database_ids();
    let target = match &cfg.target {
        Some(t) if dbs.contains(t) => t.clone(),
        Some(t) => {
            return Err(usage(format!(
                "--target {t} is not a database of the trace"
            )))
        }
        None => dbs[0].clone(),
    };
    for &k in &cfg.k_values {
        if k == 0 || k >= dbs.len() {
            return Err(usage(format!(
                "--k-values entry {k} must be between 1 and {} for {} databases",
                dbs.len().saturating_sub(1),
                dbs.len()
            )));
        }
    }
    if cfg.k_values.is_empty() || cfg.k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--k-values must be strictly increasing"));
    }
    let data = GraphDataset::from_corpus(&corpus, cfg.cards)?;
    let learner = ZeroShotLearner {
        data: &data,
        config: cfg.model_config(),
        val_fraction: cfg.val_fraction,
    };
    let curve = generalization::learning_curve_with(&learner, &target, &cfg.k_values, &cfg.seeds)?;
    write_file(&out.join("curve.json"), &to_json(&curve))?;
    write_file(&out.join("curve.txt"), &curve.to_string())?;
    echo_config(out, "curve", cfg)?;
    emit(&curve.to_string());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig) -> CliResult<()> {
    let out_model = required(&cfg.out_model, "--out-model")?;
    let m = load_model(cfg)?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    let graphs = featurize_with(&m, &corpus, m.card_source())?;
    let runtimes = corpus
        .samples
        .iter()
        .map(|s| s.runtime())
        .collect::<crate::Result<Vec<_>>>()?;
    let pairs: Vec<(&QueryGraph, f64)> = graphs.iter().zip(runtimes).collect();
    let (tuned, report) = model::finetune_graphs(&m, &pairs, &cfg.finetune_config())?;
    save_model(&tuned, out_model)?;
    write_file(&sibling(out_model, ".report.json"), &to_json(&report))?;
    echo_config(&parent_dir(out_model), "finetune", cfg)?;
    println!(
        "fine-tuned on {} samples for {} epochs, checksum {}",
        pairs.len(),
        report.epochs.len(),
        tuned.checksum()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Comparison<'a> {
    zero_shot: &'a GeneralizationReport,
    flat_baseline: &'a GeneralizationReport,
}

fn side_by_side(zs: &GeneralizationReport, flat: &GeneralizationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>12} {:>12}",
        "database", "seed", "zero_shot", "flat"
    );
    for (a, b) in zs.folds.iter().zip(&flat.folds) {
        debug_assert_eq!((&a.database, a.seed), (&b.database, b.seed));
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12.4} {:>12.4}",
            a.database, a.seed, a.summary.median, b.summary.median
        );
    }
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>12.4} {:>12.4}",
        "aggregate", "", zs.aggregate, flat.aggregate
    );
    out
}

fn cmd_baseline(cfg: &RunConfig) -> CliResult<()> {
    let out = required(&cfg.out, "--out")?;
    check_seeds(cfg)?;
    let corpus = load_corpus(cfg, Labels::Required)?;
    check_databases(&corpus)?;
    let mc = cfg.model_config();
    let graphs = GraphDataset::from_corpus(&corpus, cfg.cards)?;
    let zs = generalization::lodo(
        &ZeroShotLearner {
            data: &graphs,
            config: mc.clone(),
            val_fraction: cfg.val_fraction,
        },
        &cfg.seeds,
    )?;
    let flat_data = FlatDataset::from_corpus(&corpus, cfg.cards)?;
    let flat = generalization::lodo(
        &BaselineLearner {
            data: &flat_data,
            config: BaselineConfig::matching(&mc),
            val_fraction: cfg.val_fraction,
        },
        &cfg.seeds,
    )?;
    let table = side_by_side(&zs, &flat);
    write_file(
        &out.join("baseline.json"),
        &to_json(&Comparison {
            zero_shot: &zs,
            flat_baseline: &flat,
        }),
    )?;
    write_file(&out.join("baseline.txt"), &table)?;
    echo_config(out, "baseline", cfg)?;
    emit(&table);
    Ok(())
}

fn cmd_dump_graph(cfg: &RunConfig) -> CliResult<()> {
    let mut corpus = load_corpus(cfg, Labels::Optional)?;
    if let Some(id) = &cfg.sample_id {
        corpus = corpus.filtered(|s| &s.sample_id == id);
        if corpus.is_empty() {
            return Err(Error::InsufficientData(format!("no sample with id {id}")).into());
        }
    }
    let spec = FeatureSpec::standard();
    let (spec, norm, source) = match &cfg.model {
        Some(_) => {
            let m = load_model(cfg)?;
            (m.spec().clone(), m.normalizer().clone(), m.card_source())
        }
        None => {
            let norm = featurize::fit_normalizer(
                corpus
                    .samples
                    .iter()
                    .map(|s| Ok((s, corpus.catalog(&s.database_id)?, cfg.cards)))
                    .collect::<crate::Result<Vec<_>>>()?,
                &spec,
            )?;
            (spec, norm, cfg.cards)
        }
    };
    let mut text = String::new();
    for s in &corpus.samples {
        let g =
            featurize::build_query_graph(s, corpus.catalog(&s.database_id)?, source, &spec, &norm)?;
        let _ = writeln!(text, "# {} {}", s.database_id, s.sample_id);
        text.push_str(&g.dump());
    }
    match &cfg.out {
        Some(out) => write_file(out, &text)?,
        None => emit(&text),
    }
    Ok(())
}

fn execute(command: &Command, cfg: &RunConfig) -> CliResult<()> {
    match command {
        Command::Generate { .. } => cmd_generate(cfg),
        Command::Train { .. } => cmd_train(cfg),
        Command::Predict { .. } => cmd_predict(cfg),
        Command::Evaluate { common, .. } => cmd_evaluate(cfg, common.cards),
        Command::Lodo { .. } => cmd_lodo(cfg),
        Command::Curve { .. } => cmd_curve(cfg),
        Command::Finetune { .. } => cmd_finetune(cfg),
        Command::Baseline { .. } => cmd_baseline(cfg),
        Command::DumpGraph { .. } => cmd_dump_graph(cfg),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve(&cli.command).and_then(|cfg| {
        let work = || execute(&cli.command, &cfg);
        match cfg.threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| usage(format!("cannot start {n} threads: {e}")))?
                .install(work),
            None => work(),
        }
    });
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
