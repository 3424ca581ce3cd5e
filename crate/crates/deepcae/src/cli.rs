//! Command-line entry points: preprocess, train, embed, benchmark,
//! and gradcheck.
//!
//! Exit codes: 0 success, 2 I/O, 3 configuration or schema, 4
//! numerical divergence, 5 internal oracle failure. Progress and
//! warnings go to standard error; machine-readable results go to
//! files only, written atomically so interrupted runs never leave
//! half-written artifacts.
//!
//! All randomness flows from one experiment-level seed, expanded
//! deterministically per (dataset, variant, run-index). Rerunning
//! any command with identical inputs and seeds reproduces identical
//! output bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, ScoreRow, ScoreTable, Task};
use crate::models::{AutoencoderModel, EncoderSpec, PcaBaseline, Variant};
use crate::penalty;
use crate::preprocess::{
    self, ColumnKind, MissingPolicy, PreprocessPlan, TargetKind, Transformed,
};
use crate::tensor::{finite_diff_jacobian, rel_err_scalar, Matrix};
use crate::train::{self, EpochStats, SearchSpace, TrainConfig};

/// Config file container version.
pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Environment variable that deliberately corrupts the gradcheck
/// penalty value. Exists purely so the oracle-failure exit path can
/// be exercised by tests; never set it otherwise.
pub const GRADCHECK_CORRUPT_ENV: &str = "DEEPCAE_GRADCHECK_CORRUPT";

/// Expand the experiment seed into a per-cell seed by FNV-1a hashing
/// of (base, dataset, variant, run-index). Deterministic, and any
/// single cell can be rerun in isolation.
pub fn derive_seed(base: u64, dataset: &str, variant: &str, run_index: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    fn eat(mut h: u64, bytes: &[u8]) -> u64 {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        h
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    h = eat(h, &base.to_le_bytes());
    h = eat(h, dataset.as_bytes());
    h = eat(h, &[0xff]);
    h = eat(h, variant.as_bytes());
    h = eat(h, &[0xff]);
    h = eat(h, &run_index.to_le_bytes());
    h
}

/// One dataset entry of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    /// Target column name; omit for unsupervised datasets.
    #[serde(default)]
    pub target: Option<String>,
    /// Downstream task; inferred from the target values when absent.
    #[serde(default)]
    pub task: Option<Task>,
    /// Column-kind overrides applied before inference.
    #[serde(default)]
    pub overrides: BTreeMap<String, ColumnKind>,
}

/// Hyperparameter search settings; grids fall back to the built-in
/// defaults when left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    #[serde(default = "default_rungs")]
    pub rungs: usize,
    #[serde(default = "default_budget_per_rung")]
    pub budget_per_rung: usize,
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
}

fn default_rungs() -> usize {
    2
}

fn default_budget_per_rung() -> usize {
    8
}

fn default_compression_rate() -> f64 {
    0.5
}

fn default_num_layers() -> usize {
    2
}

fn default_variants() -> Vec<String> {
    vec![
        "pca".into(),
        "standard".into(),
        "deepcae".into(),
        "stacked_cae".into(),
    ]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_max_epochs() -> usize {
    200
}

fn default_batch_size() -> usize {
    64
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_lambda() -> f64 {
    1e-4
}

fn default_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

/// Experiment description consumed by `train` and `benchmark`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    /// Embedding width as a fraction of the input width.
    #[serde(default = "default_compression_rate")]
    pub compression_rate: f64,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    /// Variants to benchmark: `pca` plus any autoencoder variant.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    /// Run indices; each becomes an independently seeded cell.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Used when `search` is absent.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Used when `search` is absent.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Optional successive-halving search run once per (dataset,
    /// variant) before the final seeded trainings.
    #[serde(default)]
    pub search: Option<SearchSettings>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExperimentConfig = crate::ioutil::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.compression_rate > 0.0 && self.compression_rate <= 1.0) {
            return Err(Error::Config(format!(
                "compression_rate must lie in (0, 1], got {}",
                self.compression_rate
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("config lists no datasets".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate dataset name {:?}", d.name)));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::Config("config lists no variants".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variants {
            let canonical = canonical_variant(v)?;
            if !seen.insert(canonical) {
                return Err(Error::Config(format!("duplicate variant {v:?}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("config lists no seeds".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie strictly between 0 and 1, got {}",
                self.test_fraction
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie strictly between 0 and 1, got {}",
                self.val_fraction
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetConfig> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "dataset {name:?} is not in the config (have: {})",
                    self.datasets
                        .iter()
                        .map(|d| d.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

/// Canonical variant name for reports: autoencoder variants resolve
/// through [`Variant`], `pca` names the linear baseline.
fn canonical_variant(name: &str) -> Result<String> {
    if name == "pca" {
        return Ok("pca".into());
    }
    Ok(name.parse::<Variant>()?.as_str().to_string())
}

#[derive(Parser)]
#[command(
    name = "deepcae",
    version,
    about = "Contractive autoencoders with a full-encoder Jacobian penalty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a preprocessing plan on a CSV and write the plan plus the
    /// transformed matrix.
    Preprocess(PreprocessArgs),
    /// Train one model variant on one configured dataset.
    Train(TrainArgs),
    /// Embed a CSV through a saved plan and model.
    Embed(EmbedArgs),
    /// Run the full benchmark grid and write the score report.
    Benchmark(BenchmarkArgs),
    /// Verify the analytic Jacobian penalty and loss gradients
    /// against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input CSV (RFC 4180, UTF-8, header row required).
    #[arg(long)]
    input: PathBuf,
    /// Name of the target column, if any.
    #[arg(long)]
    target: Option<String>,
    /// Column kind override, `name=numeric|categorical|date|target`;
    /// repeatable.
    #[arg(long = "override", value_name = "COL=KIND")]
    overrides: Vec<String>,
    /// Columns whose missing values drop the row instead of being
    /// imputed; repeatable.
    #[arg(long = "drop-missing", value_name = "COL")]
    drop_missing: Vec<String>,
    /// Where to write the fitted plan (JSON).
    #[arg(long)]
    out_plan: PathBuf,
    /// Where to write the transformed matrix (CSV).
    #[arg(long)]
    out_matrix: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset name from the config.
    #[arg(long)]
    dataset: String,
    /// Model variant.
    #[arg(long)]
    variant: String,
    /// Run index mixed into the derived seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Saved model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Saved preprocessing plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Input CSV to embed.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV of embeddings.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Concurrent training jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Input width of the random encoders.
    #[arg(long, default_value_t = 6)]
    input_dim: usize,
    /// Encoder depth.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Base seed for the random cases.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random cases.
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Preprocess(args) => cmd_preprocess(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Embed(args) => cmd_embed(&args),
        Command::Benchmark(args) => cmd_benchmark(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_kind(kind: &str) -> Result<ColumnKind> {
    match kind {
        "numeric" => Ok(ColumnKind::Numeric),
        "categorical" => Ok(ColumnKind::Categorical),
        "date" => Ok(ColumnKind::Date),
        "target" => Ok(ColumnKind::Target),
        other => Err(Error::Config(format!(
            "unknown column kind {other:?}; expected numeric, categorical, date, or target"
        ))),
    }
}

fn parse_overrides(
    target: Option<&str>,
    raw: &[String],
) -> Result<BTreeMap<String, ColumnKind>> {
    let mut overrides = BTreeMap::new();
    if let Some(t) = target {
        overrides.insert(t.to_string(), ColumnKind::Target);
    }
    for entry in raw {
        let (name, kind) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override {entry:?} is not of the form name=kind"
            ))
        })?;
        overrides.insert(name.to_string(), parse_kind(kind)?);
    }
    Ok(overrides)
}

/// Write a feature matrix (optionally with row ids and a target
/// column) as CSV with full round-trip float formatting.
fn write_matrix_csv(
    path: &Path,
    feature_names: &[String],
    features: &Matrix,
    row_ids: Option<&[usize]>,
    target: Option<(&str, &[f64])>,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = Vec::new();
    if row_ids.is_some() {
        header.push("row".into());
    }
    header.extend(feature_names.iter().cloned());
    if let Some((name, _)) = target {
        header.push(name.into());
    }
    writer.write_record(&header)?;
    for i in 0..features.rows() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ids) = row_ids {
            record.push(ids[i].to_string());
        }
        for j in 0..features.cols() {
            record.push(format!("{}", features.get(i, j)));
        }
        if let Some((_, values)) = target {
            record.push(format!("{}", values[i]));
        }
        writer.write_record(&record)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("CSV buffer error: {e}")))?;
    crate::ioutil::write_atomic(path, &bytes)
}

fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let (header, rows) = preprocess::read_csv(&args.input)?;
    let overrides = parse_overrides(args.target.as_deref(), &args.overrides)?;
    let mut schema = preprocess::infer_schema(&header, &rows, &overrides)?;
    for name in &args.drop_missing {
        let col = schema
            .iter_mut()
            .find(|c| &c.name == name)
            .ok_or_else(|| Error::Config(format!("--drop-missing column {name:?} not found")))?;
        col.missing_policy = MissingPolicy::DropRow;
    }
    let plan = PreprocessPlan::fit(&schema, &rows)?;
    let out = plan.transform(&rows)?;
    plan.save(&args.out_plan)?;
    let target = plan
        .target()
        .and_then(|t| out.targets.as_deref().map(|v| (t.name.as_str(), v)));
    write_matrix_csv(
        &args.out_matrix,
        plan.feature_names(),
        &out.features,
        Some(&out.kept_rows),
        target,
    )?;
    eprintln!(
        "preprocess: {} rows in, {} kept; {} input columns expanded to {} features",
        rows.len(),
        out.kept_rows.len(),
        header.len(),
        plan.feature_dim()
    );
    if plan.feature_dim() > 2 * header.len() {
        eprintln!(
            "preprocess: note: feature count {} is more than twice the column count {}",
            plan.feature_dim(),
            header.len()
        );
    }
    Ok(())
}

/// Everything derived from one dataset entry: split, fitted plan,
/// transformed matrices, and targets.
struct PreparedDataset {
    name: String,
    plan: PreprocessPlan,
    /// Training features minus the validation slice.
    x_train: Matrix,
    x_val: Matrix,
    /// Full training features (including the validation slice); used
    /// for PCA and for downstream predictors.
    x_train_full: Matrix,
    x_test: Matrix,
    y_train: Option<Vec<f64>>,
    y_test: Option<Vec<f64>>,
    task: Option<Task>,
}

fn matrix_rows(x: &Matrix, indices: &[usize]) -> Matrix {
    Matrix::from_fn(indices.len(), x.cols(), |i, j| x.get(indices[i], j))
}

fn prepare_dataset(dataset: &DatasetConfig, config: &ExperimentConfig) -> Result<PreparedDataset> {
    let (header, rows) = preprocess::read_csv(&dataset.path)?;
    let mut overrides = dataset.overrides.clone();
    if let Some(t) = &dataset.target {
        overrides.insert(t.clone(), ColumnKind::Target);
    }
    let schema = preprocess::infer_schema(&header, &rows, &overrides)?;

    // Stratify on raw target strings when a target exists.
    let raw_targets: Option<Vec<String>> = preprocess::target_column_index(&schema)
        .map(|idx| rows.iter().map(|r| r[idx].clone()).collect());
    let split_seed = derive_seed(config.base_seed, &dataset.name, "split", 0);
    let split = preprocess::train_test_split(
        rows.len(),
        raw_targets.as_deref(),
        config.test_fraction,
        split_seed,
    )?;
    if split.stratification_fallback {
        eprintln!(
            "warning: dataset {:?} has a class with fewer than two rows; \
             falling back to an unstratified split",
            dataset.name
        );
    }
    let train_rows = preprocess::select_rows(&rows, &split.train_indices);
    let test_rows = preprocess::select_rows(&rows, &split.test_indices);

    let plan = PreprocessPlan::fit(&schema, &train_rows)?;
    let train: Transformed = plan.transform(&train_rows)?;
    let test: Transformed = plan.transform(&test_rows)?;

    let val_seed = derive_seed(config.base_seed, &dataset.name, "val", 0);
    let val_split =
        preprocess::train_test_split(train.features.rows(), None, config.val_fraction, val_seed)?;
    let x_train = matrix_rows(&train.features, &val_split.train_indices);
    let x_val = matrix_rows(&train.features, &val_split.test_indices);

    let task = match (&dataset.task, plan.target()) {
        (Some(t), _) => Some(*t),
        (None, Some(spec)) => Some(match spec.kind {
            TargetKind::Classes { .. } => Task::Classification,
            TargetKind::Numeric => Task::Regression,
        }),
        (None, None) => None,
    };

    Ok(PreparedDataset {
        name: dataset.name.clone(),
        plan,
        x_train,
        x_val,
        x_train_full: train.features,
        x_test: test.features,
        y_train: train.targets,
        y_test: test.targets,
        task,
    })
}

/// Resolve (learning rate, lambda) for one (dataset, variant): run
/// the configured search, or fall back to the config's fixed values.
/// The lambda floor for contractive variants is applied either way.
fn resolve_hyperparameters(
    prepared: &PreparedDataset,
    variant: Variant,
    config: &ExperimentConfig,
) -> Result<(f64, f64)> {
    let spec = EncoderSpec::new(
        prepared.x_train.cols(),
        config.compression_rate,
        config.num_layers,
    )?;
    let floored = variant.floor_lambda(config.lambda);
    if floored != config.lambda {
        eprintln!(
            "warning: lambda {} clamped to the {} floor {} for variant {}",
            config.lambda,
            crate::models::LAMBDA_FLOOR,
            floored,
            variant
        );
    }
    let Some(search) = &config.search else {
        return Ok((config.learning_rate, floored));
    };
    let defaults = SearchSpace::default();
    let space = SearchSpace {
        learning_rates: if search.learning_rates.is_empty() {
            defaults.learning_rates
        } else {
            search.learning_rates.clone()
        },
        lambdas: if search.lambdas.is_empty() {
            defaults.lambdas
        } else {
            search.lambdas.clone()
        },
    };
    let mut base = TrainConfig::new(
        config.learning_rate,
        floored,
        derive_seed(config.base_seed, &prepared.name, variant.as_str(), u64::MAX),
    );
    base.batch_size = config.batch_size;
    let outcome = train::successive_halving_search(
        &spec,
        variant,
        &prepared.x_train,
        &prepared.x_val,
        &space,
        search.rungs,
        search.budget_per_rung,
        &base,
    )?;
    Ok((outcome.best.learning_rate, outcome.best.lambda))
}

/// Train the given variant on a prepared dataset for one run index
/// and produce its report row.
fn benchmark_cell(
    prepared: &PreparedDataset,
    variant: Variant,
    run_index: u64,
    learning_rate: f64,
    lambda: f64,
    baseline_mse: f64,
    config: &ExperimentConfig,
) -> Result<ScoreRow> {
    let spec = EncoderSpec::new(
        prepared.x_train.cols(),
        config.compression_rate,
        config.num_layers,
    )?;
    let seed = derive_seed(config.base_seed, &prepared.name, variant.as_str(), run_index);
    let model = AutoencoderModel::init(spec, variant, lambda, seed)?;
    let mut train_config = TrainConfig::new(learning_rate, lambda, seed);
    train_config.batch_size = config.batch_size;
    train_config.max_epochs = config.max_epochs;
    let result = train::fit(&model, &prepared.x_train, &prepared.x_val, &train_config)?;
    let raw_mse = eval::reconstruction_score(|x| result.model.reconstruct(x), &prepared.x_test)?;
    let downstream = downstream_for(prepared, |x| Ok(result.model.encode(x)?.0))?;
    Ok(ScoreRow {
        dataset: prepared.name.clone(),
        variant: variant.as_str().to_string(),
        seed: run_index,
        raw_mse,
        baseline_mse,
        normalized_mse: eval::normalize(raw_mse, baseline_mse)?,
        train_seconds: result.wall_time_seconds,
        epochs: result.stopped_epoch,
        downstream,
    })
}

fn downstream_for<F>(
    prepared: &PreparedDataset,
    embed: F,
) -> Result<Option<eval::DownstreamScores>>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    let (Some(y_train), Some(y_test), Some(task)) =
        (&prepared.y_train, &prepared.y_test, prepared.task)
    else {
        return Ok(None);
    };
    let emb_train = embed(&prepared.x_train_full)?;
    let emb_test = embed(&prepared.x_test)?;
    eval::downstream_eval(
        &emb_train,
        &emb_test,
        &prepared.x_train_full,
        &prepared.x_test,
        y_train,
        y_test,
        task,
    )
    .map(Some)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let dataset = config.dataset(&args.dataset)?;
    let variant: Variant = args.variant.parse()?;
    let prepared = prepare_dataset(dataset, &config)?;
    let (learning_rate, lambda) = resolve_hyperparameters(&prepared, variant, &config)?;

    let spec = EncoderSpec::new(
        prepared.x_train.cols(),
        config.compression_rate,
        config.num_layers,
    )?;
    let seed = derive_seed(config.base_seed, &prepared.name, variant.as_str(), args.seed);
    let model = AutoencoderModel::init(spec, variant, lambda, seed)?;
    let mut train_config = TrainConfig::new(learning_rate, lambda, seed);
    train_config.batch_size = config.batch_size;
    train_config.max_epochs = config.max_epochs;
    let result = train::fit(&model, &prepared.x_train, &prepared.x_val, &train_config)?;

    let out_dir = args.out.as_ref().unwrap_or(&config.output_dir);
    let stem = format!("{}_{}_{}", prepared.name, variant.as_str(), args.seed);
    let model_path = out_dir.join(format!("{stem}.model.json"));
    let plan_path = out_dir.join(format!("{}.plan.json", prepared.name));
    let log_path = out_dir.join(format!("{stem}.log.json"));
    result.model.save(&model_path)?;
    // The plan is what `embed` needs alongside the model.
    prepared.plan.save(&plan_path)?;

    #[derive(Serialize)]
    struct TrainLog<'a> {
        format_version: u32,
        dataset: &'a str,
        variant: &'a str,
        run_index: u64,
        derived_seed: u64,
        config: &'a TrainConfig,
        stopped_epoch: usize,
        best_epoch: usize,
        best_val_recon: f64,
        wall_time_seconds: f64,
        train_loss_decreased: bool,
        history: &'a [EpochStats],
    }
    crate::ioutil::write_json(
        &log_path,
        &TrainLog {
            format_version: CONFIG_FORMAT_VERSION,
            dataset: &prepared.name,
            variant: variant.as_str(),
            run_index: args.seed,
            derived_seed: seed,
            config: &train_config,
            stopped_epoch: result.stopped_epoch,
            best_epoch: result.best_epoch,
            best_val_recon: result.best_val_recon,
            wall_time_seconds: result.wall_time_seconds,
            train_loss_decreased: result.train_loss_decreased,
            history: &result.history,
        },
    )?;
    eprintln!(
        "train: {} {} run {} stopped at epoch {} (best validation {:.6e} at epoch {}); \
         model -> {}",
        prepared.name,
        variant,
        args.seed,
        result.stopped_epoch,
        result.best_val_recon,
        result.best_epoch,
        model_path.display()
    );
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let model = AutoencoderModel::load(&args.model)?;
    let plan = PreprocessPlan::load(&args.plan)?;
    if plan.feature_dim() != model.spec.input_dim() {
        return Err(Error::Config(format!(
            "plan produces {} features but the model expects {}",
            plan.feature_dim(),
            model.spec.input_dim()
        )));
    }
    let (_, rows) = preprocess::read_csv(&args.input)?;
    let out = plan.transform(&rows)?;
    let (embedding, _) = model.encode(&out.features)?;
    let names: Vec<String> = (0..embedding.cols()).map(|j| format!("e{j}")).collect();
    let target = plan
        .target()
        .and_then(|t| out.targets.as_deref().map(|v| (t.name.as_str(), v)));
    write_matrix_csv(&args.out, &names, &embedding, Some(&out.kept_rows), target)?;
    eprintln!(
        "embed: {} rows -> {} embedding columns -> {}",
        embedding.rows(),
        embedding.cols(),
        args.out.display()
    );
    Ok(())
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let started = Instant::now();
    let config = ExperimentConfig::load(&args.config)?;
    let out_dir = args.out.as_ref().unwrap_or(&config.output_dir).clone();
    let variants: Vec<String> = config
        .variants
        .iter()
        .map(|v| canonical_variant(v))
        .collect::<Result<_>>()?;

    // Preparation (IO, preprocessing, PCA baselines) is cheap and
    // runs serially; training cells fan out over --jobs workers.
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut prepared = Vec::new();
    for dataset in &config.datasets {
        let p = prepare_dataset(dataset, &config)?;
        p.plan.save(&out_dir.join(format!("{}.plan.json", p.name)))?;
        let m = EncoderSpec::new(p.x_train.cols(), config.compression_rate, config.num_layers)?
            .embedding_dim();
        let pca_start = Instant::now();
        let pca = PcaBaseline::fit(&p.x_train_full, m)?;
        let pca_seconds = pca_start.elapsed().as_secs_f64();
        let baseline_mse = eval::reconstruction_score(|x| pca.reconstruct(x), &p.x_test)?;
        eprintln!(
            "benchmark: prepared {:?}: {} train / {} val / {} test rows, {} features, \
             baseline MSE {:.6e}",
            p.name,
            p.x_train.rows(),
            p.x_val.rows(),
            p.x_test.rows(),
            p.x_train.cols(),
            baseline_mse
        );
        prepared.push((p, pca, baseline_mse, pca_seconds));
    }

    struct Job {
        dataset_index: usize,
        variant: String,
    }
    let mut jobs = Vec::new();
    for (di, _) in prepared.iter().enumerate() {
        for v in &variants {
            jobs.push(Job {
                dataset_index: di,
                variant: v.clone(),
            });
        }
    }

    let run_job = |job: &Job| -> Result<Vec<ScoreRow>> {
        let (p, pca, baseline_mse, pca_seconds) = &prepared[job.dataset_index];
        if job.variant == "pca" {
            let raw = eval::reconstruction_score(|x| pca.reconstruct(x), &p.x_test)?;
            let downstream = downstream_for(p, |x| pca.embed(x))?;
            return config
                .seeds
                .iter()
                .map(|&s| {
                    Ok(ScoreRow {
                        dataset: p.name.clone(),
                        variant: "pca".into(),
                        seed: s,
                        raw_mse: raw,
                        baseline_mse: *baseline_mse,
                        normalized_mse: eval::normalize(raw, *baseline_mse)?,
                        train_seconds: *pca_seconds,
                        epochs: 1,
                        downstream,
                    })
                })
                .collect();
        }
        let variant: Variant = job.variant.parse()?;
        let (lr, lambda) = resolve_hyperparameters(p, variant, &config)?;
        let mut rows = Vec::with_capacity(config.seeds.len());
        for &run_index in &config.seeds {
            let row = benchmark_cell(p, variant, run_index, lr, lambda, *baseline_mse, &config)?;
            eprintln!(
                "benchmark: {} {} run {}: raw {:.6e}, normalized {:.4}, {:.1}s / {} epochs",
                row.dataset,
                row.variant,
                row.seed,
                row.raw_mse,
                row.normalized_mse,
                row.train_seconds,
                row.epochs
            );
            rows.push(row);
        }
        Ok(rows)
    };

    let workers = args.jobs.max(1).min(jobs.len().max(1));
    let mut results: Vec<Option<Result<Vec<ScoreRow>>>> = (0..jobs.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, job) in jobs.iter().enumerate() {
            results[i] = Some(run_job(job));
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let outcome = run_job(&jobs[i]);
                    slots.lock().expect("result slots")[i] = Some(outcome);
                });
            }
        });
    }

    let mut table = ScoreTable::new("pca");
    for outcome in results.into_iter().flatten() {
        table.rows.extend(outcome?);
    }
    // Deterministic report order regardless of worker scheduling.
    table
        .rows
        .sort_by(|a, b| (&a.dataset, &a.variant, a.seed).cmp(&(&b.dataset, &b.variant, b.seed)));

    let report_path = out_dir.join("report.json");
    table.save(&report_path)?;

    let bootstrap_seed = derive_seed(config.base_seed, "bootstrap", "ci", 0);
    let mut summary = table.render_summary(bootstrap_seed);
    let deep = Variant::DeepCae.as_str();
    let stacked = Variant::StackedCae.as_str();
    if variants.iter().any(|v| v == deep) && variants.iter().any(|v| v == stacked) {
        let report = eval::deepcae_vs_stacked_report(&table)?;
        crate::ioutil::write_json(&out_dir.join("comparison.json"), &report)?;
        summary.push_str(&format!(
            "\nfull-Jacobian vs per-layer penalty: geomean ratio {:.4} \
             (not worse in {:.0}% of {} cells)\n",
            report.geomean_ratio,
            report.deep_not_worse_fraction * 100.0,
            report.cells.len()
        ));
        for row in &report.runtime {
            summary.push_str(&format!(
                "  {}: mean {:.2}s, median {:.2}s, {:.3}s/epoch\n",
                row.variant, row.mean_seconds, row.median_seconds, row.mean_seconds_per_epoch
            ));
        }
    }
    crate::ioutil::write_atomic(&out_dir.join("summary.txt"), summary.as_bytes())?;
    eprint!("{summary}");
    eprintln!(
        "benchmark: wrote {} rows to {} in {:.1}s",
        table.rows.len(),
        report_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.cases == 0 {
        return Err(Error::Config("gradcheck needs at least one case".into()));
    }
    if args.input_dim == 0 {
        return Err(Error::Config("input_dim must be at least 1".into()));
    }
    let corrupt = std::env::var(GRADCHECK_CORRUPT_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
    if corrupt {
        eprintln!(
            "gradcheck: {GRADCHECK_CORRUPT_ENV} is set; penalty values are deliberately corrupted"
        );
    }

    use rand::Rng;
    use rand::SeedableRng;
    let mut max_penalty_err = 0.0f64;
    let mut max_grad_err = 0.0f64;
    let mut max_k1_gap = 0.0f64;

    for case in 0..args.cases {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(case as u64));
        let spec = EncoderSpec::new(args.input_dim, 0.5, args.layers)?;
        let model = AutoencoderModel::init(
            spec,
            Variant::DeepCae,
            1.0,
            rng.gen::<u64>(),
        )?;
        let x = Matrix::from_fn(1, args.input_dim, |_, _| rng.gen_range(-0.9..0.9));

        // Analytic penalty vs the finite-difference Jacobian of the
        // encoder map.
        let (_, trace) = model.encode(&x)?;
        let weights = model.encoder_weights();
        let mut analytic = penalty::deepcae_penalty(&trace, &weights)?.value();
        if corrupt {
            analytic *= 1.001;
        }
        let encode_flat = |flat: &[f64]| -> Result<Vec<f64>> {
            let input = Matrix::new(1, flat.len(), flat.to_vec())?;
            let (emb, _) = model.encode(&input)?;
            Ok(emb.data().to_vec())
        };
        let jac = finite_diff_jacobian(encode_flat, x.data(), 1e-5)?;
        let fd = jac.frobenius_sq();
        let p_err = rel_err_scalar(analytic, fd);
        max_penalty_err = max_penalty_err.max(p_err);

        // Gradient of the total loss vs central differences on a
        // small batch, checked on the first encoder weight matrix.
        let batch = Matrix::from_fn(4, args.input_dim, |_, _| rng.gen_range(-0.9..0.9));
        let mut tape = crate::tensor::Tape::new();
        let bindings = model.build_loss(&mut tape, &batch)?;
        let grads = tape.backward(bindings.total)?;
        let analytic_grad = grads.wrt(bindings.encoder[0].0).clone();
        let loss_of = |w: &Matrix| -> Result<f64> {
            let mut perturbed = model.clone();
            perturbed.encoder[0].w = w.clone();
            Ok(perturbed.loss(&batch)?.total)
        };
        let fd_grad =
            crate::tensor::finite_diff_gradient(loss_of, &model.encoder[0].w, 1e-4)?;
        let g_err = crate::tensor::rel_err_matrix(&analytic_grad, &fd_grad)?;
        max_grad_err = max_grad_err.max(g_err);

        // Depth one: the full-Jacobian penalty and the per-layer sum
        // are the same quantity and must agree to round-off.
        if args.layers == 1 {
            let stacked = penalty::stacked_penalty(&trace, &weights)?.value();
            max_k1_gap = max_k1_gap.max(rel_err_scalar(analytic, stacked));
        }
    }

    println!(
        "gradcheck: {} cases, input_dim {}, layers {}",
        args.cases, args.input_dim, args.layers
    );
    println!("  max penalty rel err:  {max_penalty_err:.3e} (tolerance 1e-5)");
    println!("  max gradient rel err: {max_grad_err:.3e} (tolerance 1e-4)");
    if args.layers == 1 {
        println!(
            "  depth-1 full-Jacobian vs per-layer penalty gap: {max_k1_gap:.3e} \
             (tolerance 1e-12): {}",
            if max_k1_gap < 1e-12 { "equal" } else { "DIFFER" }
        );
    }
    if max_penalty_err >= 1e-5 {
        return Err(Error::Oracle(format!(
            "penalty disagrees with the finite-difference Jacobian: rel err {max_penalty_err:.3e}"
        )));
    }
    if max_grad_err >= 1e-4 {
        return Err(Error::Oracle(format!(
            "loss gradient disagrees with finite differences: rel err {max_grad_err:.3e}"
        )));
    }
    if args.layers == 1 && max_k1_gap >= 1e-12 {
        return Err(Error::Oracle(format!(
            "depth-1 penalties disagree: rel err {max_k1_gap:.3e}"
        )));
    }
    Ok(())
}
