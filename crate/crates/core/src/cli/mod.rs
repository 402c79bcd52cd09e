//! The `mpad` command line.

pub mod ablation;
pub mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{
    encode_all, load_dataset, load_dataset_with_labels, load_embeddings, tokenize, Dataset,
    EmbeddingTable, EncodedDocument, LabelSet, LabeledDocument, PreprocessRules, Vocabulary,
};
use crate::error::{Error, Result};
use crate::graph::{build_cooccurrence_graph, MASTER_ID};
use crate::model::{Mpad, MpadConfig, PreparedDocument, Variant};
use crate::numcore::checkpoint;
use crate::train::{self, split_validation, EpochRecord, Metrics, TrainRun};
use ablation::{format_table, parse_grid, with_vanilla, AblationResult};
use settings::Settings;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DEFAULT_OUT_DIR: &str = "mpad-run";

/// Exit status for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mpad",
    version,
    about = "Document classification with message passing attention networks"
)]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the co-occurrence graph of one document.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write its artifacts.
    Train(TrainArgs),
    /// Report metrics of a trained model on a labeled file.
    Evaluate(ModelInput),
    /// Print `label<TAB>confidence` for every document of a file.
    Predict(ModelInput),
    /// Train one model per ablation and tabulate accuracies.
    Ablate(AblateArgs),
    /// Print attention weights per document as JSON lines.
    ExportAttention(ModelInput),
    /// k-fold cross-validation on one labeled file.
    CrossValidate(CrossValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GraphFormat {
    Json,
    Edgelist,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    /// Document text, or a path to a file holding it.
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long)]
    pub undirected: bool,
    #[arg(long)]
    pub no_master: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: GraphFormat,
}

/// Options shared by every command that trains.
#[derive(Debug, Args, Clone)]
pub struct TrainingOptions {
    /// `label<TAB>text` training file.
    #[arg(long)]
    pub train: PathBuf,
    /// Word vectors: `V d` header, then `token v1 .. vd` lines.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainingOptions,
    /// Labeled file evaluated with the selected parameters.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, env = "MPAD_OUT_DIR", default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file; defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Documents, one per line (`label<TAB>text` or plain text).
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainingOptions,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(
        long,
        default_value = "T=1..4; undirected; no-master; no-renorm; neighbors-only; no-skip"
    )]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct CrossValidateArgs {
    #[command(flatten)]
    pub opts: TrainingOptions,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::BuildGraph(a) => cmd_build_graph(&a, out),
        Command::Train(a) => cmd_train(&a, json, out),
        Command::Evaluate(a) => cmd_evaluate(&a, json, out),
        Command::Predict(a) => cmd_predict(&a, json, out),
        Command::Ablate(a) => cmd_ablate(&a, json, out),
        Command::ExportAttention(a) => cmd_export_attention(&a, out),
        Command::CrossValidate(a) => cmd_cross_validate(&a, json, out),
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_build_graph(a: &BuildGraphArgs, out: &mut dyn Write) -> Result<()> {
    let path = Path::new(&a.input);
    let text = if path.is_file() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        a.input.clone()
    };
    let tokens = tokenize(&text, &PreprocessRules::default());
    let mut names: Vec<String> = Vec::new();
    let ids: Vec<usize> = tokens
        .iter()
        .map(|t| match names.iter().position(|n| n == t) {
            Some(i) => i,
            None => {
                names.push(t.clone());
                names.len() - 1
            }
        })
        .collect();
    let graph = build_cooccurrence_graph(&ids, a.window, !a.undirected, !a.no_master)?;
    let export = graph.export(|id| names[id].clone());
    match a.format {
        GraphFormat::Json => emit(out, serde_json::to_string_pretty(&export)? + "\n"),
        GraphFormat::Edgelist => emit(out, export.to_edge_list()),
    }
}

/// Metadata stored in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub settings: Settings,
    pub labels: Vec<String>,
    pub vocab_digest: String,
    pub preprocess: PreprocessRules,
    pub best_epoch: usize,
}

/// Training inputs resolved from flags and files.
struct TrainingData {
    settings: Settings,
    dataset: Dataset,
    vocab: Vocabulary,
    embeddings: EmbeddingTable,
    inputs: serde_json::Map<String, serde_json::Value>,
}

fn resolve_settings(opts: &TrainingOptions) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &opts.config {
        s.apply_file(path)?;
    }
    if let Some(v) = opts.variant {
        s.model.variant = v;
    }
    if let Some(v) = opts.seed {
        s.train.seed = v;
    }
    if let Some(v) = opts.epochs {
        s.train.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = opts.learning_rate {
        s.train.learning_rate = v;
    }
    if let Some(v) = opts.iterations {
        s.model.iterations = v;
    }
    if let Some(v) = opts.hidden_dim {
        s.model.hidden_dim = v;
    }
    if let Some(v) = opts.min_count {
        s.min_count = v;
    }
    Ok(s)
}

/// Dimension declared in the header of an embedding file.
fn embedding_header_dim(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    let mut fields = header.split_whitespace();
    let dim = fields
        .nth(1)
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0);
    dim.ok_or_else(|| Error::Parse {
        path: path.to_owned(),
        line: 1,
        message: format!("expected `count dimension` header, got {header:?}"),
    })
}

fn load_training(opts: &TrainingOptions) -> Result<TrainingData> {
    let mut settings = resolve_settings(opts)?;
    let rules = PreprocessRules::default();
    let dataset = load_dataset(&opts.train, &rules)?;
    if dataset.docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dataset.num_classes() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: need at least 2 classes, found {}",
            opts.train.display(),
            dataset.num_classes()
        )));
    }
    settings.model.num_classes = dataset.num_classes();
    let vocab = Vocabulary::build(&dataset.docs, settings.min_count)?;
    let mut inputs = serde_json::Map::new();
    let digest = |p: &Path| -> Result<serde_json::Value> {
        Ok(json!({"path": p.display().to_string(), "sha256": sha256_file(p)?}))
    };
    inputs.insert("train".into(), digest(&opts.train)?);
    if let Some(p) = &opts.config {
        inputs.insert("config".into(), digest(p)?);
    }
    let embeddings = match &opts.embeddings {
        Some(path) => {
            settings.model.embedding_dim = embedding_header_dim(path)?;
            inputs.insert("embeddings".into(), digest(path)?);
            let table = load_embeddings(
                path,
                &vocab,
                settings.model.embedding_dim,
                settings.train.seed,
            )?;
            log::info!(
                "{} of {} vocabulary entries found in {}",
                table.coverage(),
                vocab.len(),
                path.display()
            );
            table
        }
        None => EmbeddingTable::random(
            vocab.len(),
            settings.model.embedding_dim,
            settings.train.seed,
        )?,
    };
    settings.validate()?;
    Ok(TrainingData {
        settings,
        dataset,
        vocab,
        embeddings,
        inputs,
    })
}

fn prepare_all(model: &Mpad, docs: &[EncodedDocument]) -> Result<Vec<PreparedDocument>> {
    docs.iter().map(|d| model.prepare(d)).collect()
}

struct FitOutcome {
    model: Mpad,
    run: TrainRun,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

fn fit(
    data: &TrainingData,
    config: MpadConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    let s = &data.settings;
    let labels: Vec<usize> = data.dataset.docs.iter().map(|d| d.label).collect();
    let split = split_validation(
        &labels,
        s.train.val_fraction,
        s.train.seed,
        s.train.stratified,
    )?;
    let mut model = Mpad::new(config, data.embeddings.vectors.clone(), s.train.seed)?;
    let encoded = encode_all(&data.dataset.docs, &data.vocab);
    let prepared = prepare_all(&model, &encoded)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();
    let run = train::train_with_validation(
        &mut model,
        &pick(&split.train),
        &pick(&split.validation),
        &s.train,
        &mut on_epoch,
    )?;
    Ok(FitOutcome {
        model,
        run,
        train_idx: split.train,
        val_idx: split.validation,
    })
}

fn evaluate_file(
    model: &Mpad,
    vocab: &Vocabulary,
    labels: &LabelSet,
    path: &Path,
    batch: usize,
) -> Result<Metrics> {
    let data = load_dataset_with_labels(path, &PreprocessRules::default(), labels)?;
    if data.docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let prepared = prepare_all(model, &encode_all(&data.docs, vocab))?;
    train::evaluate(model, &prepared, batch)
}

fn split_tsv(docs: &[LabeledDocument], idx: &[usize], labels: &LabelSet) -> String {
    idx.iter()
        .map(|&i| format!("{}\t{}\n", labels.name(docs[i].label), docs[i].text))
        .collect()
}

fn cmd_train(a: &TrainArgs, json_out: bool, out: &mut dyn Write) -> Result<()> {
    let data = load_training(&a.opts)?;
    let mut inputs = data.inputs.clone();
    if let Some(p) = &a.test {
        inputs.insert(
            "test".into(),
            json!({"path": p.display().to_string(), "sha256": sha256_file(p)?}),
        );
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let split_dir = a.out.join("split");
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;

    let log_path = a.out.join(LOG_FILE);
    let mut log_lines = String::new();
    let fitted = fit(&data, data.settings.model.clone(), |r| {
        log_lines.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
        log_lines.push('\n');
    })?;
    write_file(&log_path, &log_lines)?;

    let labels = &data.dataset.labels;
    let meta = CheckpointMeta {
        settings: data.settings.clone(),
        labels: labels.names().to_vec(),
        vocab_digest: data.vocab.digest(),
        preprocess: PreprocessRules::default(),
        best_epoch: fitted.run.best_epoch,
    };
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    checkpoint::save(
        &ckpt_path,
        &fitted.model.params,
        serde_json::to_value(&meta)?,
    )?;
    let vocab_path = a.out.join(VOCAB_FILE);
    write_file(&vocab_path, data.vocab.to_text())?;
    let split_train = split_dir.join("train.tsv");
    let split_val = split_dir.join("val.tsv");
    write_file(
        &split_train,
        split_tsv(&data.dataset.docs, &fitted.train_idx, labels),
    )?;
    write_file(
        &split_val,
        split_tsv(&data.dataset.docs, &fitted.val_idx, labels),
    )?;

    let test_metrics = match &a.test {
        Some(p) => Some(evaluate_file(
            &fitted.model,
            &data.vocab,
            labels,
            p,
            data.settings.train.batch_size,
        )?),
        None => None,
    };
    let best = fitted.run.best();
    let summary = json!({
        "best_epoch": fitted.run.best_epoch,
        "train_acc": best.train_acc,
        "val_acc": best.val_acc,
        "test_acc": test_metrics.as_ref().map(|m| m.accuracy),
        "test_metrics": test_metrics,
        "epochs_run": fitted.run.history.len(),
        "skipped_documents": data.dataset.skipped,
    });
    let summary_path = a.out.join(SUMMARY_FILE);
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let mut outputs = serde_json::Map::new();
    for (role, path) in [
        ("checkpoint", &ckpt_path),
        ("vocab", &vocab_path),
        ("log", &log_path),
        ("summary", &summary_path),
        ("split_train", &split_train),
        ("split_val", &split_val),
    ] {
        outputs.insert(
            role.into(),
            json!({"path": path.display().to_string(), "sha256": sha256_file(path)?}),
        );
    }
    let manifest = json!({
        "settings": data.settings,
        "config_text": data.settings.to_text(),
        "seed": data.settings.train.seed,
        "inputs": inputs,
        "outputs": outputs,
    });
    write_file(
        &a.out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    if json_out {
        emit(out, serde_json::to_string(&summary)? + "\n")
    } else {
        let mut text = format!(
            "best validation accuracy: {} (epoch {})\n",
            best.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            fitted.run.best_epoch
        );
        if let Some(m) = &test_metrics {
            text.push_str(&format!("test accuracy: {:.4}\n", m.accuracy));
        }
        text.push_str(&format!("artifacts written to {}\n", a.out.display()));
        emit(out, text)
    }
}

/// A checkpoint with the vocabulary and labels it was trained with.
pub struct LoadedModel {
    pub model: Mpad,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub meta: CheckpointMeta,
}

pub fn load_model(checkpoint_path: &Path, vocab_path: Option<&Path>) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta)
        .map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;
    let vocab_path = match vocab_path {
        Some(p) => p.to_owned(),
        None => checkpoint_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(VOCAB_FILE),
    };
    let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab = Vocabulary::from_text(&text, &vocab_path)?;
    if vocab.digest() != meta.vocab_digest {
        return Err(Error::InvalidArgument(format!(
            "{}: vocabulary digest {} does not match the checkpoint ({})",
            vocab_path.display(),
            vocab.digest(),
            meta.vocab_digest
        )));
    }
    let model = Mpad::from_params(meta.settings.model.clone(), &ckpt.params)?;
    if model.vocab_size() != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding table has {} rows for a vocabulary of {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let labels = LabelSet::from_names(meta.labels.clone());
    Ok(LoadedModel {
        model,
        vocab,
        labels,
        meta,
    })
}

fn cmd_evaluate(a: &ModelInput, json_out: bool, out: &mut dyn Write) -> Result<()> {
    let lm = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let batch = lm.meta.settings.train.batch_size;
    let m = evaluate_file(&lm.model, &lm.vocab, &lm.labels, &a.input, batch)?;
    if json_out {
        return emit(
            out,
            serde_json::to_string(&json!({
                "accuracy": m.accuracy,
                "labels": lm.labels.names(),
                "precision": m.precision,
                "recall": m.recall,
                "confusion": m.confusion,
            }))? + "\n",
        );
    }
    let mut text = format!("accuracy: {:.4}\n", m.accuracy);
    let pct = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.4}"));
    let width = lm
        .labels
        .names()
        .iter()
        .map(|n| n.len())
        .max()
        .unwrap_or(5)
        .max(5);
    text.push_str(&format!("{:<width$}  precision  recall\n", "class"));
    for (c, name) in lm.labels.names().iter().enumerate() {
        text.push_str(&format!(
            "{name:<width$}  {:>9}  {:>6}\n",
            pct(m.precision[c]),
            pct(m.recall[c])
        ));
    }
    text.push_str("confusion (rows: gold, columns: predicted)\n");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    emit(out, text)
}

/// Unlabeled or labeled documents, one per non-blank line.
fn read_documents(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<(LabeledDocument, EncodedDocument)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rules = PreprocessRules::default();
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let body = line.split_once('\t').map_or(line, |(_, t)| t);
        let doc = LabeledDocument::new(0, body, &rules).ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message: "document is empty after preprocessing".into(),
        })?;
        let encoded = EncodedDocument::new(&doc, vocab);
        docs.push((doc, encoded));
    }
    Ok(docs)
}

fn cmd_predict(a: &ModelInput, json_out: bool, out: &mut dyn Write) -> Result<()> {
    let lm = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let docs = read_documents(&a.input, &lm.vocab)?;
    let prepared: Vec<PreparedDocument> = docs
        .iter()
        .map(|(_, e)| lm.model.prepare(e))
        .collect::<Result<_>>()?;
    let probs = lm
        .model
        .predict_proba(&prepared, lm.meta.settings.train.batch_size)?;
    let mut text = String::new();
    for p in &probs {
        let c = crate::model::argmax(p);
        if json_out {
            text.push_str(&serde_json::to_string(
                &json!({"label": lm.labels.name(c), "confidence": p[c]}),
            )?);
            text.push('\n');
        } else {
            text.push_str(&format!("{}\t{:.6}\n", lm.labels.name(c), p[c]));
        }
    }
    emit(out, text)
}

fn cmd_export_attention(a: &ModelInput, out: &mut dyn Write) -> Result<()> {
    let lm = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let docs = read_documents(&a.input, &lm.vocab)?;
    let hierarchical = lm.model.config.variant.is_hierarchical();
    let steps = if lm.model.config.multi_readout {
        lm.model.config.iterations
    } else {
        1
    };
    let mut text = String::new();
    for (doc, encoded) in &docs {
        let prepared = lm.model.prepare(encoded)?;
        let readouts = lm.model.attention(&prepared)?;
        // Attended tokens of each graph, by surface form.
        let graph_tokens: Vec<Vec<String>> = prepared
            .graphs
            .iter()
            .map(|g| {
                let skip = lm.model.config.master_skip;
                g.graph
                    .node_ids
                    .iter()
                    .filter(|&&id| !(skip && id == MASTER_ID))
                    .map(|&id| {
                        if id == MASTER_ID {
                            crate::graph::MASTER_LABEL.to_owned()
                        } else {
                            lm.vocab.token(id).to_owned()
                        }
                    })
                    .collect()
            })
            .collect();
        let record = if hierarchical {
            let sentences: Vec<serde_json::Value> = (0..prepared.graphs.len())
                .map(|s| {
                    let per_step: Vec<&Vec<f64>> =
                        readouts[..steps].iter().map(|r| &r[s]).collect();
                    json!({"tokens": graph_tokens[s], "per_step_alpha": per_step})
                })
                .collect();
            let sentence_level: Vec<&Vec<f64>> = readouts[steps..].iter().map(|r| &r[0]).collect();
            json!({"text": doc.text, "sentences": sentences, "sentence_alpha": sentence_level})
        } else {
            let per_step: Vec<&Vec<f64>> = readouts.iter().map(|r| &r[0]).collect();
            json!({"text": doc.text, "tokens": graph_tokens[0], "per_step_alpha": per_step})
        };
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    emit(out, text)
}

fn cmd_ablate(a: &AblateArgs, json_out: bool, out: &mut dyn Write) -> Result<()> {
    let data = load_training(&a.opts)?;
    let vanilla = data.settings.model.clone();
    let grid = with_vanilla(parse_grid(&a.grid, &vanilla)?, &vanilla);
    let mut results = Vec::with_capacity(grid.len());
    for (entry, is_vanilla) in grid {
        log::info!("ablation {}", entry.name);
        let fitted = fit(&data, entry.config, |_| {})?;
        let test_acc = match &a.test {
            Some(p) => Some(
                evaluate_file(
                    &fitted.model,
                    &data.vocab,
                    &data.dataset.labels,
                    p,
                    data.settings.train.batch_size,
                )?
                .accuracy,
            ),
            None => None,
        };
        results.push(AblationResult {
            name: entry.name,
            vanilla: is_vanilla,
            best_epoch: fitted.run.best_epoch,
            val_acc: fitted.run.best().val_acc,
            test_acc,
        });
    }
    if json_out {
        emit(out, serde_json::to_string(&results)? + "\n")
    } else {
        emit(out, format_table(&results))
    }
}

fn cmd_cross_validate(a: &CrossValidateArgs, json_out: bool, out: &mut dyn Write) -> Result<()> {
    let data = load_training(&a.opts)?;
    let s = &data.settings;
    let probe = Mpad::new(
        s.model.clone(),
        data.embeddings.vectors.clone(),
        s.train.seed,
    )?;
    let prepared = prepare_all(&probe, &encode_all(&data.dataset.docs, &data.vocab))?;
    let cv = train::cross_validate(&prepared, a.folds, &s.train, |f| {
        Mpad::new(
            s.model.clone(),
            data.embeddings.vectors.clone(),
            s.train.seed.wrapping_add(f as u64),
        )
    })?;
    if json_out {
        emit(out, serde_json::to_string(&cv)? + "\n")
    } else {
        let folds: Vec<String> = cv
            .fold_accuracies
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect();
        emit(
            out,
            format!(
                "fold accuracies: {}\nmean accuracy: {:.4} (std {:.4})\n",
                folds.join(" "),
                cv.mean,
                cv.std
            ),
        )
    }
}
