//! Operator surface: one subcommand per pipeline stage, a flat key=value
//! config file with flag overrides (flags win), logging on stderr, and
//! machine-readable artifacts under the output directory. Exit codes are
//! scriptable: 0 success, 2 usage/config error, 3 data error, 4 failed
//! check.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lotn_autograd::{gradient_check, GradCheckConfig, ParameterStore, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    self, load_embeddings, make_review_batches, make_towe_batches, parse_predict_file,
    parse_review_file, parse_towe_file, split_validation, CorpusError, ReviewExample,
    ToweExample, Vocab,
};
use crate::eval::{
    error_categorize, exact_match_prf, extract_spans, format_prediction_dump,
    parse_prediction_dump, per_target_f1, significance, EvalError, PredictionRecord,
};
use crate::manifest::RunManifest;
use crate::model::{
    self, gold_spans, precompute_artifacts, ModelError, ToweModel, TrainSettings, Variant,
};
use crate::sentiment::{pretrain, PretrainSettings, SentimentClassifier, SentimentError};
use crate::transform::{format_inspect_lines, TransformError};

/// Threshold a gradient check must beat.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, missing inputs: exit 2.
    Usage(String),
    /// Inputs exist but their contents are unusable: exit 3.
    Data(String),
    /// A verification command found a real problem: exit 4.
    Check(String),
    /// Unexpected internal failure: exit 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) | CliError::Internal(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        match e {
            // a path that cannot be opened is a configuration problem
            CorpusError::Io { .. } => CliError::Usage(e.to_string()),
            CorpusError::Malformed { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        match e {
            CheckpointError::Io { .. } => CliError::Usage(e.to_string()),
            CheckpointError::Malformed { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<SentimentError> for CliError {
    fn from(e: SentimentError) -> CliError {
        match e {
            SentimentError::Autograd(_) => CliError::Internal(e.to_string()),
            SentimentError::NotFrozen => CliError::Usage(e.to_string()),
            SentimentError::EmptyDataset(_) | SentimentError::BadCheckpoint(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::BadCheckpoint(_) | ModelError::Transform(_) | ModelError::Eval(_) => {
                CliError::Data(e.to_string())
            }
            ModelError::Sentiment(inner) => inner.into(),
            ModelError::Autograd(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<lotn_autograd::AutogradError> for CliError {
    fn from(e: lotn_autograd::AutogradError) -> CliError {
        CliError::Internal(e.to_string())
    }
}

fn write_failed(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "lotn",
    version,
    about = "Target-oriented opinion word extraction with latent-opinion transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the attention sentiment classifier on review polarity.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
    },
    /// Train a tagger variant on a TOWE file, early-stopped on dev F1.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
    },
    /// Score a tagger checkpoint on a test file; dumps report, error
    /// breakdown, and per-target predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// Prediction dump from another evaluate run; emits a paired
        /// randomization-test p-value against it.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Tag new sentences (gold opinion column optional) and dump spans.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// Sentences to tag: token/target[/gold[/POS]] TAB-separated lines.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the dump; defaults to <out-dir>/predictions.tsv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump the attention-to-pseudo-label transformation per token.
    InspectTransform {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// TOWE file to inspect; defaults to the configured towe_train.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Where to write the dump; defaults to
        /// <out-dir>/transform-inspect.tsv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a built-in
    /// two-sentence fixture, for the classifier and all tagger variants.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// Poison one gradient on purpose to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train the auxiliary-loss tagger across a λ grid and tabulate
    /// dev/test F1 per λ, averaged over the configured seeds.
    LambdaSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value config file; any flag overrides its value.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for checkpoints, dumps, and manifests.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// One optional flag per config key, so every setting can be overridden
/// without editing the file.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    towe_train: Option<PathBuf>,
    #[arg(long)]
    towe_test: Option<PathBuf>,
    #[arg(long)]
    reviews_train: Option<PathBuf>,
    #[arg(long)]
    reviews_dev: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    sentiment_checkpoint: Option<PathBuf>,
    #[arg(long)]
    model_checkpoint: Option<PathBuf>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    pos_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    sc_hidden: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    review_max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// base, +encoder, +auxiliary, or lotn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_patience: Option<usize>,
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    train_patience: Option<usize>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[arg(long)]
    shuffles: Option<usize>,
    /// Comma-separated seed list for sweeps.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    lambda_step: Option<f64>,
}

fn resolve(common: &Common, over: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };

    macro_rules! assign {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &over.$flag { cfg.$field = Some(v.clone()); })*
        };
    }
    assign!(
        towe_train => towe_train,
        towe_test => towe_test,
        reviews_train => reviews_train,
        reviews_dev => reviews_dev,
        embeddings => embeddings,
        sentiment_checkpoint => sentiment_checkpoint,
        model_checkpoint => model_checkpoint,
    );
    macro_rules! copy {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = over.$field { cfg.$field = v; })*
        };
    }
    copy!(
        word_dim, pos_dim, hidden, sc_hidden, l_max, review_max_len, dropout, lr,
        batch_size, lambda, pretrain_epochs, pretrain_patience, train_epochs,
        train_patience, dev_fraction, shuffles, lambda_min, lambda_max, lambda_step,
    );
    if let Some(v) = &over.variant {
        cfg.set("variant", v)?;
    }
    if let Some(v) = &over.seeds {
        cfg.set("seeds", v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }

    cfg.validate()?;
    Ok(cfg)
}

/// Full argument parsing and dispatch; returns the process exit code.
pub fn main() -> u8 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, over } => cmd_pretrain(&resolve(&common, &over)?),
        Command::Train { common, over } => cmd_train(&resolve(&common, &over)?),
        Command::Evaluate { common, over, compare } => {
            cmd_evaluate(&resolve(&common, &over)?, compare.as_deref())
        }
        Command::Predict { common, over, input, output } => {
            cmd_predict(&resolve(&common, &over)?, &input, output.as_deref())
        }
        Command::InspectTransform { common, over, input, output } => {
            cmd_inspect_transform(&resolve(&common, &over)?, input.as_deref(), output.as_deref())
        }
        Command::Gradcheck { common, over, corrupt } => {
            cmd_gradcheck(&resolve(&common, &over)?, corrupt)
        }
        Command::LambdaSweep { common, over } => cmd_lambda_sweep(&resolve(&common, &over)?),
    }
}

/// Lowercased tokens of every input the embedding table must cover.
fn vocab_coverage(
    reviews: &[ReviewExample],
    towe_sets: &[&[ToweExample]],
) -> HashSet<String> {
    let mut keep: HashSet<String> = HashSet::new();
    for review in reviews {
        keep.extend(review.tokens.iter().cloned()); // already lowercased
    }
    for examples in towe_sets {
        for ex in *examples {
            keep.extend(ex.tokens.iter().map(|t| t.to_lowercase()));
        }
    }
    keep
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let reviews_path = RunConfig::require_path(&cfg.reviews_train, "reviews_train")?;
    let embeddings_path = RunConfig::require_path(&cfg.embeddings, "embeddings")?;

    let reviews = parse_review_file(reviews_path, cfg.review_max_len)?;
    let (train_set, dev_set) = match &cfg.reviews_dev {
        Some(path) => (reviews, parse_review_file(path, cfg.review_max_len)?),
        None => split_validation(&reviews, cfg.dev_fraction, cfg.seed),
    };

    // The embedding table is shared with the downstream tagger, so cover
    // the TOWE vocabulary too when those files are configured.
    let mut towe_sets: Vec<Vec<ToweExample>> = Vec::new();
    for path in [&cfg.towe_train, &cfg.towe_test].into_iter().flatten() {
        towe_sets.push(parse_towe_file(path, cfg.l_max)?);
    }
    let towe_refs: Vec<&[ToweExample]> = towe_sets.iter().map(Vec::as_slice).collect();
    let keep = vocab_coverage(&train_set, &towe_refs)
        .union(&vocab_coverage(&dev_set, &[]))
        .cloned()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = load_embeddings(embeddings_path, cfg.word_dim, &keep, &mut rng)?;
    eprintln!(
        "pretrain: {} train / {} dev reviews, vocabulary {} x {}",
        train_set.len(),
        dev_set.len(),
        vocab.len(),
        vocab.dim()
    );

    let settings = PretrainSettings {
        hidden: cfg.sc_hidden,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        dropout: cfg.dropout,
        patience: cfg.pretrain_patience,
        max_epochs: cfg.pretrain_epochs,
    };
    let (classifier, history) = pretrain(&train_set, &dev_set, &vocab, &settings, cfg.seed)?;
    for stats in &history {
        eprintln!(
            "epoch {:>3}: train loss {:.6}, dev accuracy {:.4}",
            stats.epoch, stats.train_loss, stats.dev_accuracy
        );
    }
    let best_acc = history.iter().map(|s| s.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);

    let ckpt_path = cfg.out_dir.join("sentiment.ckpt");
    classifier.to_checkpoint(&vocab, vec![]).save(&ckpt_path)?;
    eprintln!("pretrain: wrote {} (best dev accuracy {:.4})", ckpt_path.display(), best_acc);

    let mut manifest = RunManifest::new("pretrain", cfg);
    manifest.add_input("reviews_train", reviews_path).map_err(|e| write_failed(reviews_path, e))?;
    if let Some(path) = &cfg.reviews_dev {
        manifest.add_input("reviews_dev", path).map_err(|e| write_failed(path, e))?;
    }
    manifest.add_input("embeddings", embeddings_path).map_err(|e| write_failed(embeddings_path, e))?;
    for stats in &history {
        manifest.push_history(format!(
            "epoch={} train_loss={:.6} dev_accuracy={:.6}",
            stats.epoch, stats.train_loss, stats.dev_accuracy
        ));
    }
    manifest.push_final("best_dev_accuracy", format!("{best_acc:.6}"));
    manifest.push_final("epochs_run", history.len().to_string());
    manifest.push_final("checkpoint", ckpt_path.display().to_string());
    let manifest_path = cfg.out_dir.join("pretrain-manifest.txt");
    manifest.write(&manifest_path).map_err(|e| write_failed(&manifest_path, e))?;
    Ok(())
}

/// Loads the frozen classifier and its vocabulary, or builds a vocabulary
/// straight from the embedding file when the variant trains standalone.
fn load_transfer_inputs(
    cfg: &RunConfig,
    towe_sets: &[&[ToweExample]],
) -> Result<(Vocab, Option<SentimentClassifier>), CliError> {
    match &cfg.sentiment_checkpoint {
        Some(path) => {
            let (vocab, classifier) = SentimentClassifier::from_checkpoint(Checkpoint::load(path)?)?;
            if vocab.dim() != cfg.word_dim {
                eprintln!(
                    "note: checkpoint embeddings are {}-dim; ignoring word_dim={}",
                    vocab.dim(),
                    cfg.word_dim
                );
            }
            Ok((vocab, Some(classifier)))
        }
        None if cfg.variant.needs_frozen() => Err(CliError::Usage(format!(
            "variant {} requires sentiment_checkpoint",
            cfg.variant
        ))),
        None => {
            let embeddings_path = RunConfig::require_path(&cfg.embeddings, "embeddings")?;
            let keep = vocab_coverage(&[], towe_sets);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let vocab = load_embeddings(embeddings_path, cfg.word_dim, &keep, &mut rng)?;
            Ok((vocab, None))
        }
    }
}

fn train_settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        dropout: cfg.dropout,
        patience: cfg.train_patience,
        max_epochs: cfg.train_epochs,
        lambda: cfg.lambda,
        dev_fraction: cfg.dev_fraction,
        pos_dim: cfg.pos_dim,
        hidden: cfg.hidden,
        l_cap: cfg.l_max,
    }
}

fn log_train_history(history: &[model::TagEpochStats]) {
    for stats in history {
        let aux = match stats.train_aux {
            Some(a) => format!("{a:.6}"),
            None => "-".to_string(),
        };
        eprintln!(
            "epoch {:>3}: J {:.6}, L_t {:.6}, L_a {}, dev F1 {:.4}",
            stats.epoch, stats.train_j, stats.train_tag, aux, stats.dev_f1
        );
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let towe_path = RunConfig::require_path(&cfg.towe_train, "towe_train")?;
    let examples = parse_towe_file(towe_path, cfg.l_max)?;
    let (vocab, classifier) = load_transfer_inputs(cfg, &[&examples])?;

    eprintln!(
        "train: variant {}, lambda {}, {} examples, vocabulary {} x {}",
        cfg.variant,
        cfg.lambda,
        examples.len(),
        vocab.len(),
        vocab.dim()
    );
    if cfg.variant.uses_aux() && cfg.lambda == 0.0 {
        eprintln!("note: lambda = 0, so J = L_t exactly; the auxiliary head gets no gradient");
    }

    let settings = train_settings(cfg);
    let outcome =
        model::train(cfg.variant, &examples, &vocab, classifier.as_ref(), &settings, cfg.seed)?;
    log_train_history(&outcome.history);

    let ckpt_path = cfg.out_dir.join("model.ckpt");
    outcome.model.to_checkpoint(&vocab, classifier.as_ref(), vec![]).save(&ckpt_path)?;
    eprintln!(
        "train: wrote {} (best dev F1 {:.4})",
        ckpt_path.display(),
        outcome.best_dev_f1
    );

    let mut manifest = RunManifest::new("train", cfg);
    manifest.add_input("towe_train", towe_path).map_err(|e| write_failed(towe_path, e))?;
    if let Some(path) = &cfg.sentiment_checkpoint {
        manifest.add_input("sentiment_checkpoint", path).map_err(|e| write_failed(path, e))?;
    } else if let Some(path) = &cfg.embeddings {
        manifest.add_input("embeddings", path).map_err(|e| write_failed(path, e))?;
    }
    for stats in &outcome.history {
        let aux = match stats.train_aux {
            Some(a) => format!("{a:.6}"),
            None => "-".to_string(),
        };
        manifest.push_history(format!(
            "epoch={} j={:.6} l_t={:.6} l_a={} dev_f1={:.6}",
            stats.epoch, stats.train_j, stats.train_tag, aux, stats.dev_f1
        ));
    }
    manifest.push_final("best_dev_f1", format!("{:.6}", outcome.best_dev_f1));
    manifest.push_final("epochs_run", outcome.history.len().to_string());
    manifest.push_final("checkpoint", ckpt_path.display().to_string());
    let manifest_path = cfg.out_dir.join("train-manifest.txt");
    manifest.write(&manifest_path).map_err(|e| write_failed(&manifest_path, e))?;
    Ok(())
}

fn load_tagger(
    cfg: &RunConfig,
) -> Result<(Vocab, ToweModel, Option<SentimentClassifier>), CliError> {
    let path = RunConfig::require_path(&cfg.model_checkpoint, "model_checkpoint")?;
    Ok(ToweModel::from_checkpoint(Checkpoint::load(path)?)?)
}

fn predictions_of(
    model: &ToweModel,
    vocab: &Vocab,
    classifier: Option<&SentimentClassifier>,
    examples: &[ToweExample],
    batch_size: usize,
) -> Result<Vec<Vec<crate::eval::Span>>, CliError> {
    let artifacts = match (model.variant.needs_frozen(), classifier) {
        (true, Some(sc)) => Some(precompute_artifacts(sc, vocab, examples)?),
        (true, None) => {
            return Err(CliError::Data(format!(
                "checkpoint for variant {} carries no classifier parameters",
                model.variant
            )))
        }
        (false, _) => None,
    };
    Ok(model.predict_spans(vocab, examples, artifacts.as_ref(), batch_size)?)
}

fn cmd_evaluate(cfg: &RunConfig, compare: Option<&Path>) -> Result<(), CliError> {
    let test_path = RunConfig::require_path(&cfg.towe_test, "towe_test")?;
    let (vocab, model, classifier) = load_tagger(cfg)?;
    let examples = parse_towe_file(test_path, model.l_cap())?;
    let pred = predictions_of(&model, &vocab, classifier.as_ref(), &examples, cfg.batch_size)?;
    let gold = gold_spans(&examples);

    let report = exact_match_prf(&pred, &gold)?;
    let breakdown = error_categorize(&pred, &gold)?;
    eprintln!("evaluate: {} targets from {}", examples.len(), test_path.display());
    eprintln!("evaluate: {report}");
    eprintln!("evaluate: errors {breakdown}");

    let mut report_text = format!("{}\n{}\n", report.to_line_record(), breakdown.to_line_record());

    let records: Vec<PredictionRecord> = examples
        .iter()
        .enumerate()
        .map(|(id, ex)| PredictionRecord {
            id,
            target: crate::eval::Span::new(ex.target_span.0, ex.target_span.1),
            pred: pred[id].clone(),
            gold: Some(gold[id].clone()),
        })
        .collect();
    let dump_path = cfg.out_dir.join("predictions.tsv");
    crate::checkpoint::write_atomic(&dump_path, format_prediction_dump(&records).as_bytes())
        .map_err(|e| write_failed(&dump_path, e))?;
    eprintln!("evaluate: wrote {}", dump_path.display());

    if let Some(other_path) = compare {
        let text = std::fs::read_to_string(other_path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", other_path.display())))?;
        let theirs = parse_prediction_dump(&text)?;
        let p = compare_runs(&pred, &gold, &theirs, cfg)?;
        eprintln!(
            "evaluate: paired randomization test vs {}: p = {:.6}",
            other_path.display(),
            p
        );
        report_text.push_str(&format!("compare={}\tp_value={:.6}\n", other_path.display(), p));
    }

    let report_path = cfg.out_dir.join("eval-report.txt");
    crate::checkpoint::write_atomic(&report_path, report_text.as_bytes())
        .map_err(|e| write_failed(&report_path, e))?;
    eprintln!("evaluate: wrote {}", report_path.display());
    Ok(())
}

/// Paired significance of this run against another run's dump over the
/// same test set.
fn compare_runs(
    pred: &[Vec<crate::eval::Span>],
    gold: &[Vec<crate::eval::Span>],
    theirs: &[PredictionRecord],
    cfg: &RunConfig,
) -> Result<f64, CliError> {
    if theirs.len() != gold.len() {
        return Err(CliError::Data(format!(
            "comparison dump has {} targets, this test set has {}",
            theirs.len(),
            gold.len()
        )));
    }
    let mut their_pred = Vec::with_capacity(theirs.len());
    for (i, record) in theirs.iter().enumerate() {
        let their_gold = record.gold.as_ref().ok_or_else(|| {
            CliError::Data(format!("comparison dump line for target {i} carries no gold spans"))
        })?;
        if *their_gold != gold[i] {
            return Err(CliError::Data(format!(
                "comparison dump disagrees on gold spans for target {i}; was it produced on this test set?"
            )));
        }
        their_pred.push(record.pred.clone());
    }
    let ours = per_target_f1(pred, gold)?;
    let other = per_target_f1(&their_pred, gold)?;
    Ok(significance(&ours, &other, cfg.shuffles, cfg.seed)?)
}

fn cmd_predict(cfg: &RunConfig, input: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let (vocab, model, classifier) = load_tagger(cfg)?;
    let parsed = parse_predict_file(input, model.l_cap())?;
    let examples: Vec<ToweExample> = parsed.iter().map(|(ex, _)| ex.clone()).collect();
    let pred = predictions_of(&model, &vocab, classifier.as_ref(), &examples, cfg.batch_size)?;

    let records: Vec<PredictionRecord> = parsed
        .iter()
        .enumerate()
        .map(|(id, (ex, has_gold))| PredictionRecord {
            id,
            target: crate::eval::Span::new(ex.target_span.0, ex.target_span.1),
            pred: pred[id].clone(),
            gold: has_gold.then(|| extract_spans(&ex.bio_labels)),
        })
        .collect();
    let default_path = cfg.out_dir.join("predictions.tsv");
    let dump_path = output.unwrap_or(&default_path);
    crate::checkpoint::write_atomic(dump_path, format_prediction_dump(&records).as_bytes())
        .map_err(|e| write_failed(dump_path, e))?;
    eprintln!("predict: {} targets tagged, wrote {}", records.len(), dump_path.display());
    Ok(())
}

fn cmd_inspect_transform(
    cfg: &RunConfig,
    input: Option<&Path>,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt_path = RunConfig::require_path(&cfg.sentiment_checkpoint, "sentiment_checkpoint")?;
    let file = match (input, &cfg.towe_train) {
        (Some(path), _) => path,
        (None, Some(path)) => path.as_path(),
        (None, None) => return Err(CliError::Usage("no --input and no towe_train configured".into())),
    };
    let (vocab, classifier) = SentimentClassifier::from_checkpoint(Checkpoint::load(ckpt_path)?)?;
    let examples = parse_towe_file(file, cfg.l_max)?;

    let mut dump = String::from("# token\talpha\tc\tbeta\ty_a\tgold\n");
    for (i, ex) in examples.iter().enumerate() {
        let (_, alpha) = classifier.encode_frozen(&vocab, &ex.tokens)?;
        let gold: Vec<&str> = ex.bio_labels.iter().map(|b| b.as_str()).collect();
        let block = format_inspect_lines(&ex.tokens, &alpha, ex.target_span, &gold)?;
        dump.push_str(&format!(
            "# sentence {} target {}-{}\n",
            i, ex.target_span.0, ex.target_span.1
        ));
        dump.push_str(&block);
        dump.push('\n');
    }

    let default_path = cfg.out_dir.join("transform-inspect.tsv");
    let dump_path = output.unwrap_or(&default_path);
    crate::checkpoint::write_atomic(dump_path, dump.as_bytes())
        .map_err(|e| write_failed(dump_path, e))?;
    eprintln!(
        "inspect-transform: {} sentences from {}, wrote {}",
        examples.len(),
        file.display(),
        dump_path.display()
    );
    Ok(())
}

/// Two hand-built sentences, sized so every parameter still gets real
/// gradient flow: multi-token spans, a target off the edge, both review
/// polarities.
fn gradcheck_fixture(seed: u64) -> (Vocab, Vec<ToweExample>, Vec<ReviewExample>) {
    const DIM: usize = 5;
    const L_CAP: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = [
        "the", "fish", "was", "fresh", "but", "service", "slow", "staff", "very", "rude",
    ];
    let entries = words
        .iter()
        .map(|w| (w.to_string(), (0..DIM).map(|_| rng.random_range(-0.5..0.5)).collect()))
        .collect();
    let vocab = Vocab::from_entries(entries, DIM, &mut rng);

    let sentence = |text: &str, span: (usize, usize), bio: &str| {
        let tokens: Vec<String> = text.split(' ').map(String::from).collect();
        let bio_labels = bio
            .split(' ')
            .map(|t| match t {
                "B" => corpus::Bio::B,
                "I" => corpus::Bio::I,
                _ => corpus::Bio::O,
            })
            .collect();
        let position_indices = corpus::positions(tokens.len(), span, L_CAP);
        ToweExample { tokens, target_span: span, bio_labels, position_indices, pos_tags: None }
    };
    let towe = vec![
        sentence("the fish was fresh but service slow", (1, 1), "O O O B O O O"),
        sentence("staff very rude", (0, 0), "O B I"),
    ];
    let reviews = vec![
        ReviewExample {
            tokens: "the fish was fresh".split(' ').map(String::from).collect(),
            polarity: 1,
        },
        ReviewExample {
            tokens: "staff very rude".split(' ').map(String::from).collect(),
            polarity: 0,
        },
    ];
    (vocab, towe, reviews)
}

/// One gradient-check row for the report.
#[derive(Debug)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Checks the classifier and every tagger variant on the built-in fixture;
/// `corrupt` injects a forward-only term so the analytic gradient is wrong
/// on purpose.
pub fn run_gradcheck(seed: u64, corrupt: bool) -> Result<Vec<GradCheckRow>, CliError> {
    const HIDDEN: usize = 4;
    const SC_HIDDEN: usize = 3;
    const POS_DIM: usize = 4;
    const L_CAP: usize = 12;
    let (vocab, towe, reviews) = gradcheck_fixture(seed ^ 0x66697874);
    let check_cfg = GradCheckConfig::default();
    let mut rows = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classifier = SentimentClassifier::init(vocab.dim(), SC_HIDDEN, &mut rng);
    let mut store = ParameterStore::new();
    for (name, t) in classifier.params() {
        store.register(name, &t).expect("unique parameter names");
    }
    let review_batch = make_review_batches(&reviews, &vocab, reviews.len(), None)
        .pop()
        .expect("non-empty fixture");
    // The poison term uses a parameter's values without recording the use,
    // which is exactly what a broken backward rule looks like.
    let poison = corrupt.then(|| classifier.params()[0].1.clone());
    let report = {
        let mut loss_rng = ChaCha8Rng::seed_from_u64(0);
        gradient_check(
            |tape| {
                let mut loss = classifier
                    .batch_loss(tape, &vocab, &review_batch, 0.0, false, &mut loss_rng)
                    .map_err(|e| match e {
                        SentimentError::Autograd(inner) => inner,
                        other => panic!("fixture should only fail in autograd: {other}"),
                    })?;
                if let Some(p) = &poison {
                    let leak: f64 = 0.5 * p.to_vec().iter().sum::<f64>();
                    let konst = Tensor::from_vec(vec![1], vec![leak])?;
                    loss = lotn_autograd::ops::add(tape, &loss, &konst)?;
                }
                Ok(loss)
            },
            &store,
            &check_cfg,
        )?
    };
    rows.push(GradCheckRow {
        name: "classifier".to_string(),
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
    });

    let frozen = classifier.freeze();
    let artifacts = precompute_artifacts(&frozen, &vocab, &towe)?;
    let towe_batch = make_towe_batches(&towe, &vocab, towe.len(), None)
        .pop()
        .expect("non-empty fixture");
    for variant in Variant::ALL {
        let sc_width = if variant.needs_frozen() { 2 * frozen.hidden() } else { 0 };
        let model = ToweModel::init(
            variant,
            0.5,
            vocab.dim(),
            POS_DIM,
            HIDDEN,
            L_CAP,
            sc_width,
            &mut rng,
        )?;
        let mut store = ParameterStore::new();
        for (name, t) in model.params() {
            store.register(name, &t).expect("unique parameter names");
        }
        let art = variant.needs_frozen().then_some(&artifacts);
        let report = {
            let mut loss_rng = ChaCha8Rng::seed_from_u64(0);
            gradient_check(
                |tape| {
                    model
                        .batch_loss(tape, &vocab, &towe_batch, art, 0.0, false, &mut loss_rng)
                        .map(|lb| lb.j)
                        .map_err(|e| match e {
                            ModelError::Autograd(inner) => inner,
                            other => panic!("fixture should only fail in autograd: {other}"),
                        })
                },
                &store,
                &check_cfg,
            )?
        };
        rows.push(GradCheckRow {
            name: variant.to_string(),
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
        });
    }
    Ok(rows)
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<(), CliError> {
    let rows = run_gradcheck(cfg.seed, corrupt)?;
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    for row in &rows {
        let verdict = if row.max_rel_err < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        eprintln!(
            "gradcheck: {:<11} max_rel_err {:>12.3e} over {} coordinates  [{verdict}]",
            row.name, row.max_rel_err, row.coords
        );
        report.push_str(&format!(
            "model={}\tmax_rel_err={:e}\tcoords={}\tverdict={verdict}\n",
            row.name, row.max_rel_err, row.coords
        ));
        worst = worst.max(row.max_rel_err);
    }
    let report_path = cfg.out_dir.join("gradcheck.txt");
    crate::checkpoint::write_atomic(&report_path, report.as_bytes())
        .map_err(|e| write_failed(&report_path, e))?;
    eprintln!("gradcheck: wrote {}", report_path.display());
    if worst >= GRAD_TOLERANCE {
        return Err(CliError::Check(format!(
            "gradient check failed: max relative error {worst:e} >= {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn cmd_lambda_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    if !cfg.variant.uses_aux() {
        return Err(CliError::Usage(format!(
            "lambda sweep needs an auxiliary-loss variant, not {}",
            cfg.variant
        )));
    }
    let towe_path = RunConfig::require_path(&cfg.towe_train, "towe_train")?;
    let examples = parse_towe_file(towe_path, cfg.l_max)?;
    let (vocab, classifier) = load_transfer_inputs(cfg, &[&examples])?;
    if examples.len() < 2 {
        return Err(CliError::Data(format!(
            "{}: need at least 2 examples to split off a dev set",
            towe_path.display()
        )));
    }
    let (train_ex, dev_ex) = split_validation(&examples, cfg.dev_fraction, cfg.seed);
    let test_ex = match &cfg.towe_test {
        Some(path) => Some(parse_towe_file(path, cfg.l_max)?),
        None => None,
    };

    let grid = cfg.lambda_grid();
    let seeds = cfg.effective_seeds();
    eprintln!(
        "lambda-sweep: {} grid points x {} seeds on {} train / {} dev examples",
        grid.len(),
        seeds.len(),
        train_ex.len(),
        dev_ex.len()
    );

    let mut table = String::from("# lambda\tdev_f1\ttest_f1\n");
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for &lambda in &grid {
        let mut dev_sum = 0.0;
        let mut test_sum = 0.0;
        for &seed in &seeds {
            let settings = TrainSettings { lambda, ..train_settings(cfg) };
            let outcome = model::train_on(
                cfg.variant,
                &train_ex,
                &dev_ex,
                &vocab,
                classifier.as_ref(),
                &settings,
                seed,
            )?;
            dev_sum += outcome.best_dev_f1;
            if let Some(test) = &test_ex {
                let artifacts = match classifier.as_ref() {
                    Some(sc) if cfg.variant.needs_frozen() => {
                        Some(precompute_artifacts(sc, &vocab, test)?)
                    }
                    _ => None,
                };
                test_sum +=
                    outcome.model.evaluate(&vocab, test, artifacts.as_ref(), cfg.batch_size)?.f1;
            }
        }
        let dev_mean = dev_sum / seeds.len() as f64;
        let test_field = if test_ex.is_some() {
            format!("{:.4}", test_sum / seeds.len() as f64)
        } else {
            "-".to_string()
        };
        eprintln!("lambda-sweep: lambda {lambda:.4} -> dev F1 {dev_mean:.4}, test F1 {test_field}");
        table.push_str(&format!("{lambda:.4}\t{dev_mean:.4}\t{test_field}\n"));
        rows.push((lambda, dev_mean));
    }

    let table_path = cfg.out_dir.join("lambda-sweep.tsv");
    crate::checkpoint::write_atomic(&table_path, table.as_bytes())
        .map_err(|e| write_failed(&table_path, e))?;
    eprintln!("lambda-sweep: wrote {}", table_path.display());

    let best = rows
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite F1"))
        .expect("non-empty grid");
    let mut manifest = RunManifest::new("lambda-sweep", cfg);
    manifest.add_input("towe_train", towe_path).map_err(|e| write_failed(towe_path, e))?;
    if let Some(path) = &cfg.sentiment_checkpoint {
        manifest.add_input("sentiment_checkpoint", path).map_err(|e| write_failed(path, e))?;
    }
    for line in table.lines().skip(1) {
        manifest.push_history(line.to_string());
    }
    manifest.push_final("best_lambda", format!("{:.4}", best.0));
    manifest.push_final("best_dev_f1", format!("{:.6}", best.1));
    let manifest_path = cfg.out_dir.join("sweep-manifest.txt");
    manifest.write(&manifest_path).map_err(|e| write_failed(&manifest_path, e))?;
    Ok(())
}
