//! `xdiag` command line. Subcommands exchange files: stores, model JSON,
//! schema and template files, and report envelopes of the form
//! `{"schema_version", "command", "config", "report"}`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnose::{
    all_slices, correlate, discover, influence, manifest, slice_eval, DiscoverOptions, Discovery,
    PromptSource, ScorePair, ShapleyMethod, Slice, SliceReport, Unassigned, ATTRIBUTE_THRESHOLD,
    EXACT_CAP, MERGE_EPSILON, SLICE_DELTA,
};
use crate::embed::{AdditiveEmbedder, StoreEmbedder, TextEmbedder};
use crate::error::Error;
use crate::geometry::gap_report;
use crate::linalg::{column_mean, subtract_row};
use crate::probe::{
    balanced_targets, consistency, empirical_distribution, metrics, predict_prepared, ridge_fit,
    train, EvalReport, GapClosing, PriorMode, ProbeModel, ProbeSpec, Task, TrainConfig,
};
use crate::prompts::{load_templates, AttributeSchema, Ensemble, Template};
use crate::rectify::{compare, rectify, RectifyEcho, RectifyOptions, RECTIFY_EPOCHS};
use crate::store::{read_store, write_atomic, write_store, EmbeddingStore, Labels, Modality};
use crate::synthlab::{
    class_blocked, gen_planted, gen_prop1, scaling_check, spectral_identity_check,
    violate_assumption, PlantedParams, Prop1Params,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "xdiag",
    version,
    about = "Diagnose and rectify classifiers on shared image-text embeddings"
)]
struct Cli {
    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Summarize an embedding store
    Info(InfoArgs),
    /// Modality-gap statistics of paired image and text stores
    Geometry(GeometryArgs),
    /// Train a probe on a labelled store
    Train(TrainArgs),
    /// Evaluate a probe on a store
    Eval(EvalArgs),
    /// Rank attribute slices by text-proxy accuracy
    Slices(SlicesArgs),
    /// Shapley influence of attribute tokens on one class
    Attrs(AttrsArgs),
    /// Continue training a probe on prompts generated for error slices
    Rectify(RectifyArgs),
    /// Per-slice image accuracy of two models
    Compare(CompareArgs),
    /// Generate synthetic data and numerical checks
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Rank correlation between text-proxy and image slice scores
    Correlate(CorrelateArgs),
    /// Write the newline-delimited prompt manifest a text store must cover
    Prompts(PromptsArgs),
}

#[derive(Debug, Args, Serialize)]
struct InfoArgs {
    store: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GeometryArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Ce,
    Bce,
    Quad,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Linear)]
    model: ModelArg,
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    loss: LossArg,
    /// Hidden width of the MLP
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    /// Center each modality by its mean before the probe
    #[arg(long)]
    close_gap: bool,
    /// Ridge penalty of the quadratic loss
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Solve the quadratic loss in closed form instead of by Adam
    #[arg(long)]
    closed_form: bool,
    /// Uniform class distribution in the quadratic targets
    #[arg(long)]
    uniform_prior: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModalityArg {
    Image,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Overrides the modality recorded in the store
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// Paired store (same rows) of the other modality
    #[arg(long)]
    consistency_with: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PromptArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    /// Ensemble file, or "builtin" for the shipped 80 wrappers
    #[arg(long)]
    ensemble: Option<String>,
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
struct EmbedArgs {
    /// Text store keyed by exact prompt string
    #[arg(long)]
    text_store: Option<PathBuf>,
    /// Directory written by `synth planted`
    #[arg(long)]
    synth_scenario: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SlicesArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    #[serde(flatten)]
    embed: EmbedArgs,
    /// Labelled image store for per-slice image accuracy
    #[arg(long)]
    images: Option<PathBuf>,
    /// Largest number of attributes fixed by a slice
    #[arg(long, default_value_t = 2)]
    max_size: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = SLICE_DELTA)]
    delta: f64,
    #[arg(long)]
    merge: bool,
    #[arg(long, default_value_t = MERGE_EPSILON)]
    merge_epsilon: f64,
    /// Drop unassigned optional attributes instead of marginalizing them
    #[arg(long)]
    absent: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct AttrsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    #[serde(flatten)]
    embed: EmbedArgs,
    #[arg(long)]
    class: String,
    /// Exact Shapley values (default)
    #[arg(long, conflicts_with = "mc")]
    exact: bool,
    /// Monte-Carlo estimate with N permutations
    #[arg(long, value_name = "N")]
    mc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ATTRIBUTE_THRESHOLD)]
    threshold: f64,
    /// Largest player count for exact evaluation
    #[arg(long, default_value_t = EXACT_CAP)]
    cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RectifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output of `slices` (flagged slices are used) or a JSON array of slices
    #[arg(long)]
    slices: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    #[serde(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value_t = RECTIFY_EPOCHS)]
    epochs: usize,
    /// Learning rate (default: the one the model was trained with)
    #[arg(long)]
    lr: Option<f64>,
    /// Train a fresh model on the slice texts only
    #[arg(long)]
    from_scratch: bool,
    /// Labelled image store mixed into the training data
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    max_prompts: Option<usize>,
    #[arg(long)]
    absent: bool,
    /// Labelled image store for a before/after comparison
    #[arg(long, requires = "report")]
    images: Option<PathBuf>,
    /// Where the comparison report goes
    #[arg(long, requires = "images")]
    report: Option<PathBuf>,
    /// Rectified model
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Slices to report (same formats as `rectify --slices`)
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CorrelateArgs {
    /// `slices` report supplying text-proxy scores
    #[arg(long)]
    text_report: PathBuf,
    /// `slices` report supplying image accuracies
    #[arg(long)]
    image_report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PromptsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    prompts: PromptArgs,
    /// Slices to cover (default: every slice up to --max-size)
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_size: usize,
    #[arg(long)]
    absent: bool,
    /// Include every Shapley coalition's prompts
    #[arg(long)]
    coalitions: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Paired stores with an exactly constant gap
    Prop1(Prop1Args),
    /// Spurious-correlation scenario with text model
    Planted(PlantedArgs),
    /// Spectral-loss identity on random graphs
    Spectral(SpectralArgs),
    /// Class-mean transfer on class-blocked graphs
    Classmean(ClassmeanArgs),
}

#[derive(Debug, Args, Serialize)]
struct Prop1Args {
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    gap_norm: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 2.0)]
    class_separation: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PlantedArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    nuisances: usize,
    #[arg(long, default_value_t = 0.95)]
    correlation: f64,
    /// Combination absent from training, as CLASS:NUISANCE (repeatable)
    #[arg(long, value_parser = parse_combo)]
    unseen: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 800)]
    n_val: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 0.6)]
    class_strength: f64,
    #[arg(long, default_value_t = 1.0)]
    nuisance_strength: f64,
    #[arg(long, default_value_t = 0.4)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    gap_norm: f64,
    #[arg(long)]
    text_noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SpectralArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Number of consecutive seeds to check
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Factor for the embedding-scaling check
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ClassmeanArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    /// Embedding dimension, at least N
    #[arg(long, default_value_t = 12)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_combo(s: &str) -> std::result::Result<(usize, usize), String> {
    let (c, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected CLASS:NUISANCE, got {s:?}"))?;
    let c = c.trim().parse().map_err(|e| format!("class index: {e}"))?;
    let b = b
        .trim()
        .parse()
        .map_err(|e| format!("nuisance index: {e}"))?;
    Ok((c, b))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a C,
    report: &'a R,
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json("report", e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Outcome {
    match out {
        Some(path) => Ok(write_atomic(path, bytes)?),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))?;
            Ok(())
        }
    }
}

type CsvFn<'a> = &'a dyn Fn(&mut Vec<u8>) -> crate::Result<()>;

/// Writes the report as an envelope (JSON) or via `csv` when the format
/// asks for it.
fn emit<C: Serialize, R: Serialize>(
    format: Format,
    out: Option<&Path>,
    command: &str,
    config: &C,
    report: &R,
    csv: Option<CsvFn>,
) -> Outcome {
    let bytes = match format {
        Format::Json => json_bytes(&Envelope {
            schema_version: SCHEMA_VERSION,
            command,
            config,
            report,
        })?,
        Format::Csv => {
            let f = csv.ok_or_else(|| {
                Failure::Usage(format!("{command} has no CSV form; use --format json"))
            })?;
            let mut buf = Vec::new();
            f(&mut buf)?;
            buf
        }
    };
    write_out(out, &bytes)
}

fn json_only(format: Format, command: &str) -> Outcome {
    if format == Format::Csv {
        return Err(Failure::Usage(format!("{command} writes JSON only")));
    }
    Ok(())
}

fn read_text(path: &Path) -> crate::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> crate::Result<Value> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path.display().to_string(), e))
}

fn load_model(path: &Path) -> crate::Result<ProbeModel> {
    ProbeModel::from_json(&read_text(path)?).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path.display().to_string(), source),
        other => other,
    })
}

fn write_model(path: &Path, model: &ProbeModel) -> Outcome {
    let mut s = model.to_json()?;
    s.push('\n');
    Ok(write_atomic(path, s.as_bytes())?)
}

fn create_dir(dir: &Path) -> crate::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct PromptInputs {
    schema: AttributeSchema,
    templates: Vec<Template>,
    ensemble: Option<Ensemble>,
}

impl PromptInputs {
    fn load(args: &PromptArgs) -> crate::Result<Self> {
        let ensemble = match args.ensemble.as_deref() {
            None => None,
            Some("builtin") => Some(Ensemble::imagenet_80()),
            Some(path) => Some(Ensemble::load(Path::new(path))?),
        };
        Ok(PromptInputs {
            schema: AttributeSchema::load(&args.schema)?,
            templates: load_templates(&args.templates)?,
            ensemble,
        })
    }

    fn source<'a>(&'a self, embedder: &'a dyn TextEmbedder) -> PromptSource<'a> {
        PromptSource {
            schema: &self.schema,
            templates: &self.templates,
            ensemble: self.ensemble.as_ref(),
            embedder,
        }
    }
}

fn load_embedder(args: &EmbedArgs) -> crate::Result<Box<dyn TextEmbedder>> {
    match (&args.text_store, &args.synth_scenario) {
        (Some(path), _) => Ok(Box::new(StoreEmbedder::new(read_store(path)?)?)),
        (None, Some(dir)) => Ok(Box::new(AdditiveEmbedder::load(
            &dir.join("text_model.json"),
        )?)),
        (None, None) => Err(Error::Config(
            "need --text-store or --synth-scenario".into(),
        )),
    }
}

fn unassigned(absent: bool) -> Unassigned {
    if absent {
        Unassigned::Absent
    } else {
        Unassigned::Marginalize
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SliceEntry {
    Wrapped(Slice),
    Plain(BTreeMap<String, String>),
}

/// Slices from a `slices` report (its flagged slices) or a JSON array of
/// slices given as `{"assignment": {...}}` or plain `{family: value}` maps.
fn load_slices(path: &Path) -> crate::Result<Vec<Slice>> {
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    let value = read_json(path)?;
    let entries = match value {
        Value::Array(_) => value,
        Value::Object(ref obj) if obj.contains_key("report") => {
            let found = value
                .pointer("/report/discovered/slices")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("not a slices report"))?;
            let flagged: Vec<Value> = found
                .iter()
                .filter(|s| s.get("flagged").and_then(Value::as_bool) == Some(true))
                .filter_map(|s| s.get("assignment").cloned())
                .collect();
            if flagged.is_empty() {
                return Err(bad("the report flags no slices"));
            }
            Value::Array(flagged)
        }
        _ => return Err(bad("expected a slices report or an array of slices")),
    };
    let parsed: Vec<SliceEntry> =
        serde_json::from_value(entries).map_err(|e| Error::json(path.display().to_string(), e))?;
    let slices: Vec<Slice> = parsed
        .into_iter()
        .map(|e| match e {
            SliceEntry::Wrapped(s) => s,
            SliceEntry::Plain(a) => Slice::new(a),
        })
        .collect();
    if slices.is_empty() {
        return Err(bad("no slices"));
    }
    Ok(slices)
}

#[derive(Serialize)]
struct InfoReport {
    rows: usize,
    dim: usize,
    modality: Modality,
    normalized: bool,
    labels: Option<&'static str>,
    class_names: Option<Vec<String>>,
    attribute_families: Vec<String>,
    has_ids: bool,
    min_norm: f64,
    max_norm: f64,
    source: String,
}

fn cmd_info(args: &InfoArgs, format: Format) -> Outcome {
    json_only(format, "info")?;
    let store = read_store(&args.store)?;
    let norms: Vec<f64> = store.matrix().row_iter().map(|r| r.norm()).collect();
    let meta = store.meta();
    let report = InfoReport {
        rows: store.rows(),
        dim: store.dim(),
        modality: store.modality(),
        normalized: store.normalized(),
        labels: meta
            .labels
            .as_ref()
            .map(|l| if l.is_multi() { "multi" } else { "single" }),
        class_names: meta.class_names.clone(),
        attribute_families: meta
            .attributes
            .as_ref()
            .map(|a| a.keys().cloned().collect())
            .unwrap_or_default(),
        has_ids: meta.ids.is_some(),
        min_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max_norm: norms.iter().copied().fold(0.0, f64::max),
        source: meta.source.clone(),
    };
    emit(format, args.out.as_deref(), "info", args, &report, None)
}

fn cmd_geometry(args: &GeometryArgs, format: Format) -> Outcome {
    json_only(format, "geometry")?;
    let report = gap_report(&read_store(&args.image)?, &read_store(&args.text)?)?;
    emit(format, args.out.as_deref(), "geometry", args, &report, None)
}

fn cmd_train(args: &TrainArgs, format: Format) -> Outcome {
    json_only(format, "train")?;
    let task = match args.loss {
        LossArg::Ce => Task::Multiclass,
        LossArg::Bce => Task::Multilabel,
        LossArg::Quad => Task::Quadratic,
    };
    let train_store = read_store(&args.train)?;
    let val_store = read_store(&args.val)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        ridge_lambda: args.lambda,
        ..TrainConfig::default()
    };
    let prior = if args.uniform_prior {
        PriorMode::Uniform
    } else {
        PriorMode::Empirical
    };
    let model = if args.closed_form {
        if task != Task::Quadratic || args.model != ModelArg::Linear {
            return Err(Failure::Usage(
                "--closed-form needs --loss quad --model linear".into(),
            ));
        }
        closed_form(&train_store, args.close_gap, args.lambda, prior, &cfg)?
    } else {
        let mut spec = match args.model {
            ModelArg::Linear => ProbeSpec::linear(task),
            ModelArg::Mlp => ProbeSpec::mlp(task, args.hidden),
        }
        .with_gap_closing(args.close_gap);
        spec.prior = prior;
        train(&spec, &train_store, &val_store, &cfg)?
    };
    write_model(&args.out, &model)
}

fn closed_form(
    store: &EmbeddingStore,
    close_gap: bool,
    lambda: f64,
    prior: PriorMode,
    cfg: &TrainConfig,
) -> crate::Result<ProbeModel> {
    let labels = match store.labels() {
        Some(Labels::Single(v)) => v,
        Some(Labels::Multi(_)) => {
            return Err(Error::Config("quadratic task needs single labels".into()))
        }
        None => return Err(Error::Config("training store has no labels".into())),
    };
    let classes = store
        .meta()
        .class_names
        .as_ref()
        .map_or(0, Vec::len)
        .max(labels.iter().max().map_or(0, |m| m + 1));
    let distribution = match prior {
        PriorMode::Uniform => vec![1.0 / classes as f64; classes],
        PriorMode::Empirical => empirical_distribution(labels, classes),
    };
    let (x, mean) = if close_gap {
        let mean = column_mean(store.matrix());
        (subtract_row(store.matrix(), &mean), Some(mean))
    } else {
        (store.matrix().clone(), None)
    };
    let mut model = ridge_fit(&x, &balanced_targets(labels, &distribution)?, lambda)?;
    model.class_prior = Some(distribution);
    model.config = Some(cfg.clone());
    model.seed = Some(cfg.seed);
    if let Some(mean) = mean {
        model.gap_closing = Some(GapClosing::default());
        model.record_mean(store.modality(), mean.iter().copied().collect())?;
    }
    Ok(model)
}

#[derive(Serialize)]
struct EvalOutput {
    n: usize,
    modality: Modality,
    metrics: Option<EvalReport>,
    consistency: Option<f64>,
}

fn cmd_eval(args: &EvalArgs, format: Format) -> Outcome {
    let model = load_model(&args.model)?;
    let store = read_store(&args.store)?;
    let modality = args.modality.map_or(store.modality(), Modality::from);
    let preds = predict_prepared(&model, &model.store_inputs(&store, modality)?);
    let report = match store.labels() {
        Some(labels) => Some(metrics(
            &preds.scores,
            &preds.hard,
            labels,
            model.task,
            model.class_prior.as_deref(),
        )?),
        None => None,
    };
    let consistency = match &args.consistency_with {
        Some(path) => {
            let other = read_store(path)?;
            if other.rows() != store.rows() {
                return Err(Error::Shape(format!(
                    "paired stores have {} and {} rows",
                    store.rows(),
                    other.rows()
                ))
                .into());
            }
            let other_modality = match modality {
                Modality::Image => Modality::Text,
                Modality::Text => Modality::Image,
                Modality::Other => other.modality(),
            };
            let q = predict_prepared(&model, &model.store_inputs(&other, other_modality)?);
            Some(consistency(&preds.hard, &q.hard)?)
        }
        None => None,
    };
    if report.is_none() && consistency.is_none() {
        return Err(Error::Config(
            "store has no labels and no --consistency-with store was given".into(),
        )
        .into());
    }
    let out = EvalOutput {
        n: store.rows(),
        modality,
        metrics: report,
        consistency,
    };
    let csv = |buf: &mut Vec<u8>| -> crate::Result<()> {
        let m = out
            .metrics
            .as_ref()
            .ok_or_else(|| Error::Config("CSV output needs a labelled store".into()))?;
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["class", "precision", "recall", "f1", "support"])?;
        for (c, r) in m.per_class.iter().enumerate() {
            w.write_record([
                c.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.support.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    };
    emit(format, args.out.as_deref(), "eval", args, &out, Some(&csv))
}

#[derive(Serialize)]
struct SlicesOutput {
    report: SliceReport,
    discovered: Discovery,
}

fn cmd_slices(args: &SlicesArgs, format: Format) -> Outcome {
    let model = load_model(&args.model)?;
    let inputs = PromptInputs::load(&args.prompts)?;
    let embedder = load_embedder(&args.embed)?;
    let source = inputs.source(embedder.as_ref());
    let images = args.images.as_deref().map(read_store).transpose()?;
    if args.max_size == 0 {
        return Err(Failure::Usage("--max-size must be at least 1".into()));
    }
    let slices = all_slices(&inputs.schema, args.max_size);
    let report = slice_eval(
        &model,
        &source,
        &slices,
        images.as_ref(),
        unassigned(args.absent),
    )?;
    let discovered = discover(
        &report,
        &DiscoverOptions {
            top_k: args.top_k,
            delta: args.delta,
            merge: args.merge,
            merge_epsilon: args.merge_epsilon,
        },
    );
    let out = SlicesOutput { report, discovered };
    let csv = |buf: &mut Vec<u8>| out.report.to_csv(buf);
    emit(format, Some(&args.out), "slices", args, &out, Some(&csv))
}

fn cmd_attrs(args: &AttrsArgs, format: Format) -> Outcome {
    let model = load_model(&args.model)?;
    let inputs = PromptInputs::load(&args.prompts)?;
    let embedder = load_embedder(&args.embed)?;
    let source = inputs.source(embedder.as_ref());
    let class = inputs.schema.class_label(&args.class).ok_or_else(|| {
        Error::Schema(format!(
            "unknown class {:?}; classes are {:?}",
            args.class,
            inputs.schema.class_values()
        ))
    })?;
    let method = match args.mc {
        Some(permutations) => ShapleyMethod::MonteCarlo {
            permutations,
            seed: args.seed,
        },
        None => ShapleyMethod::Exact { cap: args.cap },
    };
    let report = influence(&model, source, class, method, args.threshold)?;
    let csv = |buf: &mut Vec<u8>| report.to_csv(buf);
    emit(format, Some(&args.out), "attrs", args, &report, Some(&csv))
}

#[derive(Serialize)]
struct RectifyConfig<'a> {
    args: &'a RectifyArgs,
    resolved: RectifyEcho,
}

fn cmd_rectify(args: &RectifyArgs, format: Format) -> Outcome {
    let model = load_model(&args.model)?;
    let slices = load_slices(&args.slices)?;
    let inputs = PromptInputs::load(&args.prompts)?;
    let embedder = load_embedder(&args.embed)?;
    let source = inputs.source(embedder.as_ref());
    let replay = args.replay.as_deref().map(read_store).transpose()?;
    let images = args.images.as_deref().map(read_store).transpose()?;
    let opts = RectifyOptions {
        epochs: args.epochs,
        learning_rate: args.lr,
        from_scratch: args.from_scratch,
        unassigned: unassigned(args.absent),
        max_prompts_per_slice: args.max_prompts,
    };
    let outcome = rectify(&model, &slices, &source, replay.as_ref(), &opts)?;
    write_model(&args.out, &outcome.model)?;
    if let (Some(store), Some(path)) = (images, &args.report) {
        let mut report = compare(&model, &outcome.model, &store, &slices)?;
        let resolved = RectifyEcho {
            epochs: outcome.config.epochs,
            learning_rate: outcome.config.learning_rate,
            from_scratch: args.from_scratch,
            prompt_counts: outcome.prompt_counts,
        };
        report.config = Some(resolved.clone());
        let config = RectifyConfig { args, resolved };
        let csv = |buf: &mut Vec<u8>| report.to_csv(buf);
        emit(format, Some(path), "rectify", &config, &report, Some(&csv))?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs, format: Format) -> Outcome {
    let before = load_model(&args.before)?;
    let after = load_model(&args.after)?;
    let store = read_store(&args.images)?;
    let slices = match &args.slices {
        Some(path) => load_slices(path)?,
        None => Vec::new(),
    };
    let report = compare(&before, &after, &store, &slices)?;
    let csv = |buf: &mut Vec<u8>| report.to_csv(buf);
    emit(
        format,
        args.out.as_deref(),
        "compare",
        args,
        &report,
        Some(&csv),
    )
}

fn score_map(path: &Path, pick: fn(&Value) -> Option<f64>) -> crate::Result<Vec<(String, f64)>> {
    let value = read_json(path)?;
    let rows = value
        .pointer("/report/report/rows")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Config(format!("{}: not a slices report", path.display())))?;
    Ok(rows
        .iter()
        .filter_map(|r| {
            let name = r.get("name")?.as_str()?.to_string();
            Some((name, pick(r)?))
        })
        .collect())
}

fn cmd_correlate(args: &CorrelateArgs, format: Format) -> Outcome {
    let text = score_map(&args.text_report, |r| r.get("proxy_score")?.as_f64())?;
    let image: BTreeMap<String, f64> =
        score_map(&args.image_report, |r| r.get("image_accuracy")?.as_f64())?
            .into_iter()
            .collect();
    let pairs: Vec<ScorePair> = text
        .into_iter()
        .filter_map(|(name, t)| {
            image.get(&name).map(|&i| ScorePair {
                name,
                text: t,
                image: i,
            })
        })
        .collect();
    let report = correlate(pairs)?;
    let csv = |buf: &mut Vec<u8>| -> crate::Result<()> {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["slice", "text", "image"])?;
        for p in &report.pairs {
            w.write_record([p.name.clone(), p.text.to_string(), p.image.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    };
    emit(
        format,
        Some(&args.out),
        "correlate",
        args,
        &report,
        Some(&csv),
    )
}

fn cmd_prompts(args: &PromptsArgs, format: Format) -> Outcome {
    json_only(format, "prompts")?;
    let inputs = PromptInputs::load(&args.prompts)?;
    let slices = match &args.slices {
        Some(path) => load_slices(path)?,
        None => all_slices(&inputs.schema, args.max_size),
    };
    // Generation never embeds, so a placeholder embedder suffices.
    let none = AdditiveEmbedder {
        dim: 0,
        directions: BTreeMap::new(),
        offset: Vec::new(),
        noise: 0.0,
        seed: 0,
    };
    let source = inputs.source(&none);
    let prompts = manifest(&source, &slices, unassigned(args.absent), args.coalitions)?;
    let mut text = String::new();
    for p in &prompts {
        if p.text.contains('\n') {
            return Err(Error::Template(format!("prompt {:?} contains a newline", p.text)).into());
        }
        text.push_str(&p.text);
        text.push('\n');
    }
    Ok(write_atomic(&args.out, text.as_bytes())?)
}

#[derive(Serialize)]
struct Prop1Report {
    axis: usize,
    gap: Vec<f64>,
    files: [&'static str; 2],
}

#[derive(Serialize)]
struct PlantedReport {
    params: PlantedParams,
    minority_slices: Vec<Slice>,
}

#[derive(Serialize)]
struct SpectralReport {
    seeds: Vec<u64>,
    residuals: Vec<f64>,
    max_residual: f64,
    scaling: crate::synthlab::ScalingCheck,
}

#[derive(Serialize)]
struct ClassmeanReport {
    seeds: Vec<u64>,
    residuals: Vec<f64>,
    max_residual: f64,
    violated_residuals: Vec<f64>,
    min_violated_residual: f64,
}

fn cmd_synth(cmd: &SynthCommand, format: Format) -> Outcome {
    json_only(format, "synth")?;
    match cmd {
        SynthCommand::Prop1(a) => {
            let world = gen_prop1(&Prop1Params {
                d: a.d,
                n: a.n,
                classes: a.classes,
                gap_norm: a.gap_norm,
                tau: a.tau,
                class_separation: a.class_separation,
                noise: a.noise,
                seed: a.seed,
            })?;
            create_dir(&a.out)?;
            write_store(&world.image, &a.out.join("img.emb"))?;
            write_store(&world.text, &a.out.join("txt.emb"))?;
            let report = Prop1Report {
                axis: world.axis,
                gap: world.gap.iter().copied().collect(),
                files: ["img.emb", "txt.emb"],
            };
            emit(
                format,
                Some(&a.out.join("world.json")),
                "synth prop1",
                a,
                &report,
                None,
            )
        }
        SynthCommand::Planted(a) => {
            let params = PlantedParams {
                classes: a.classes,
                nuisances: a.nuisances,
                correlation: a.correlation,
                unseen_combos: a.unseen.clone(),
                n_train: a.n_train,
                n_val: a.n_val,
                d: a.d,
                class_strength: a.class_strength,
                nuisance_strength: a.nuisance_strength,
                noise: a.noise,
                gap_norm: a.gap_norm,
                text_noise: a.text_noise,
                seed: a.seed,
                ..PlantedParams::default()
            };
            let scenario = gen_planted(&params)?;
            scenario.write(&a.out)?;
            let minority: Vec<Slice> = scenario
                .minority_combos()
                .into_iter()
                .map(Slice::new)
                .collect();
            write_atomic(&a.out.join("minority_slices.json"), &json_bytes(&minority)?)?;
            let report = PlantedReport {
                params: scenario.params.clone(),
                minority_slices: minority,
            };
            emit(
                format,
                Some(&a.out.join("scenario.json")),
                "synth planted",
                a,
                &report,
                None,
            )
        }
        SynthCommand::Spectral(a) => {
            let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
            let residuals = seeds
                .iter()
                .map(|&s| spectral_identity_check(a.n, a.d, s))
                .collect::<crate::Result<Vec<_>>>()?;
            let report = SpectralReport {
                max_residual: residuals.iter().copied().fold(0.0, f64::max),
                seeds,
                residuals,
                scaling: scaling_check(a.n, a.d, a.factor, a.seed)?,
            };
            create_dir(&a.out)?;
            emit(
                format,
                Some(&a.out.join("spectral.json")),
                "synth spectral",
                a,
                &report,
                None,
            )
        }
        SynthCommand::Classmean(a) => {
            let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
            let mut residuals = Vec::with_capacity(seeds.len());
            let mut violated = Vec::with_capacity(seeds.len());
            for &s in &seeds {
                let inst = class_blocked(a.n, a.m, a.d, a.classes, s)?;
                residuals.push(inst.classmean_residual());
                violated.push(violate_assumption(&inst)?.classmean_residual());
            }
            let report = ClassmeanReport {
                seeds,
                max_residual: residuals.iter().copied().fold(0.0, f64::max),
                min_violated_residual: violated.iter().copied().fold(f64::INFINITY, f64::min),
                residuals,
                violated_residuals: violated,
            };
            create_dir(&a.out)?;
            emit(
                format,
                Some(&a.out.join("classmean.json")),
                "synth classmean",
                a,
                &report,
                None,
            )
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    let f = cli.format;
    match &cli.command {
        Command::Info(a) => cmd_info(a, f),
        Command::Geometry(a) => cmd_geometry(a, f),
        Command::Train(a) => cmd_train(a, f),
        Command::Eval(a) => cmd_eval(a, f),
        Command::Slices(a) => cmd_slices(a, f),
        Command::Attrs(a) => cmd_attrs(a, f),
        Command::Rectify(a) => cmd_rectify(a, f),
        Command::Compare(a) => cmd_compare(a, f),
        Command::Synth(c) => cmd_synth(c, f),
        Command::Correlate(a) => cmd_correlate(a, f),
        Command::Prompts(a) => cmd_prompts(a, f),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Data(Error::Config(format!("thread pool: {e}")))),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
