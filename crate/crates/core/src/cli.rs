//! `ensemble-ner` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or runtime error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{select_min_tokenization, PoolingMode, Tokenization};
use crate::checkpoint::Checkpoint;
use crate::corpus::{write_dataset, BioMode, LabelSet, Sentence};
use crate::data::{discover_models, embedding_path, load_store, load_tokenizations, read_dataset_file, split_name,
    tokenization_path};
use crate::embed::write_embedding_file;
use crate::error::{Error, Result};
use crate::eval::entity_f1;
use crate::model::build_examples;
use crate::synth::{generate, subword_expand, SynthConfig};
use crate::train::{OptimizerKind, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ensemble-ner", version, about = "Ensemble-embedding CRF tagger for flat NER")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    First,
    Mean,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::First => PoolingMode::First,
            PoolingArg::Mean => PoolingMode::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated entity labels (default: the six NL4Opt labels).
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    /// Restrict decoding to valid BIO transitions.
    #[arg(long)]
    constrained: bool,
}

impl Common {
    fn label_set(&self) -> Result<LabelSet> {
        match &self.labels {
            Some(list) => LabelSet::parse_list(list).map_err(|e| Error::Config(format!("--labels: {e}"))),
            None => Ok(LabelSet::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a tagger and write rotating checkpoints, best.ckpt and report.json.
    Train(TrainArgs),
    /// Decode a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Entity-level precision/recall/F1 of predictions against gold.
    Eval(EvalArgs),
    /// Report per-word subword counts across encoders and the minimum-length choice.
    AlignInspect(AlignArgs),
    /// Write a seeded synthetic corpus with pseudo-encoder embeddings.
    GenSynth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    emb_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON training config; flags override it.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its stored config applies).
    #[arg(long, conflicts_with_all = ["seed", "labels", "models"])]
    resume: Option<PathBuf>,
    /// Comma-separated encoder ids in ensembling order (default: all under --emb-dir, sorted).
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoints to retain.
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learn a projection of every encoder to this dim before averaging.
    #[arg(long)]
    projection_dim: Option<usize>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    emb_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reject dangling I- tags instead of repairing them.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// Tokenization JSONL files, one per encoder, in priority order.
    #[arg(long = "tok", conflicts_with = "emb_dir", required_unless_present = "emb_dir")]
    tok: Vec<PathBuf>,
    /// Read `<model>/<split>.tok.jsonl` from an embedding directory.
    #[arg(long, requires = "split")]
    emb_dir: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    models: Option<String>,
    /// Dataset used to show words and check word counts.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Print every divergent word, not only the summary.
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    dev: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    models: usize,
    /// Also split words into pieces and write tokenization files.
    #[arg(long)]
    subwords: bool,
    #[command(flatten)]
    common: Common,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::AlignInspect(a) => align_inspect(a),
        Command::GenSynth(a) => gen_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn split_list(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&resumed, &a.config) {
        (Some(c), _) => c.config.clone(),
        (None, Some(path)) => TrainConfig::from_file(path)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.accumulation {
        cfg.accumulation_steps = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.keep {
        cfg.checkpoint_keep = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = match v {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        };
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.projection_dim {
        cfg.projection_dim = Some(v);
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.common.pooling {
        cfg.pooling = v.into();
    }
    if a.common.constrained {
        cfg.constrained = true;
    }
    cfg.validate()?;

    let labels = match &resumed {
        Some(c) => c.tagger.labels.clone(),
        None => a.common.label_set()?,
    };
    let train_sentences = read_dataset_file(&a.data, &labels)?;
    let dev_sentences = read_dataset_file(&a.dev, &labels)?;
    let models = match (&resumed, &a.models) {
        (Some(c), _) => c.tagger.models.clone(),
        (None, Some(list)) => split_list(list),
        (None, None) => discover_models(&a.emb_dir, &split_name(&a.data))?,
    };
    let train_store = load_store(&a.emb_dir, &split_name(&a.data), &models, cfg.pooling)?;
    let dev_store = load_store(&a.emb_dir, &split_name(&a.dev), &models, cfg.pooling)?;
    let train_set = build_examples(train_sentences, &train_store, &labels)?;
    let dev_set = build_examples(dev_sentences, &dev_store, &labels)?;

    let ckpt_dir = a.out.join("checkpoints");
    let trainer = match resumed {
        Some(c) => Trainer::resume(c, cfg.clone())?,
        None => {
            let first = train_set.first().ok_or_else(|| Error::Config("empty training set".into()))?;
            let dims = first.inputs.iter().map(|m| m.dim()).collect();
            Trainer::new(labels.clone(), models, dims, cfg.clone())?
        }
    };
    let mut trainer = trainer.with_checkpoint_dir(&ckpt_dir)?;
    let quiet = a.quiet;
    let report = trainer.run_with(&train_set, &dev_set, |r| {
        if !quiet {
            println!(
                "epoch {:>3}  loss {:.6}  dev p {:.4} r {:.4} f1 {:.4}",
                r.epoch, r.train_loss, r.dev_precision, r.dev_recall, r.dev_f1
            );
        }
    })?;
    let best = trainer.best().expect("at least one checkpoint");
    best.save(&a.out.join("best.ckpt"))?;
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "best epoch {} dev f1 {:.4}; wrote {}",
        report.best_epoch,
        report.best_dev_f1,
        a.out.join("best.ckpt").display()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let mut tagger = ckpt.tagger;
    if let Some(list) = &a.common.labels {
        if a.common.label_set()? != tagger.labels {
            return Err(Error::Config(format!(
                "--labels {list} differs from the checkpoint's label set {}",
                tagger.labels
            )));
        }
    }
    if a.common.constrained {
        tagger.constrained = true;
    }
    let pooling = a.common.pooling.map_or(ckpt.config.pooling, Into::into);
    let sentences = read_dataset_file(&a.data, &tagger.labels)?;
    let store = load_store(&a.emb_dir, &split_name(&a.data), &tagger.models, pooling)?;
    let examples = build_examples(sentences, &store, &tagger.labels)?;
    let mode = if a.strict { BioMode::Strict } else { BioMode::Repair };
    let predicted = examples
        .iter()
        .map(|ex| {
            Ok(Sentence {
                spans: tagger.predict_spans(ex, mode)?,
                ..ex.sentence.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_dataset(BufWriter::new(file), &predicted).map_err(|e| Error::io(&a.out, e))?;
    println!("decoded {} sentences to {}", predicted.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let labels = a.common.label_set()?;
    let gold = read_dataset_file(&a.gold, &labels)?;
    let pred = read_dataset_file(&a.pred, &labels)?;
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    if let Some((g, p)) = gold.iter().zip(&pred).find(|(g, p)| g.id != p.id) {
        return Err(Error::InvalidSentence {
            id: p.id.clone(),
            message: format!("prediction out of order: expected `{}`", g.id),
        });
    }
    let metrics = entity_f1(
        &gold.into_iter().map(|s| s.spans).collect::<Vec<_>>(),
        &pred.into_iter().map(|s| s.spans).collect::<Vec<_>>(),
    )?;
    print!("{}", metrics.table(Some(&labels)));
    if let Some(path) = &a.json {
        write_json(path, &metrics)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DivergentWord {
    sentence: String,
    word: usize,
    text: Option<String>,
    piece_counts: Vec<usize>,
    selected: String,
}

#[derive(Debug, Serialize)]
struct AlignReport {
    models: Vec<String>,
    sentences: usize,
    words: usize,
    divergent_words: usize,
    selected_per_model: Vec<usize>,
    divergent: Vec<DivergentWord>,
}

fn align_inspect(a: AlignArgs) -> Result<()> {
    let per_model: Vec<(String, Vec<Tokenization>)> = match &a.emb_dir {
        Some(dir) => {
            let split = a.split.as_deref().expect("clap requires --split");
            let models = match &a.models {
                Some(list) => split_list(list),
                None => discover_models(dir, split)?,
            };
            models
                .into_iter()
                .map(|m| {
                    let toks = load_tokenizations(dir, &m, split)?.ok_or_else(|| {
                        Error::InvalidTokenization(format!("missing {}", tokenization_path(dir, &m, split).display()))
                    })?;
                    let mut toks: Vec<Tokenization> = toks.into_values().collect();
                    toks.sort_by(|x, y| x.id.cmp(&y.id));
                    Ok((m, toks))
                })
                .collect::<Result<_>>()?
        }
        None => a
            .tok
            .iter()
            .map(|path| {
                let toks = crate::align::read_tokenization_file(path)?;
                let model = toks.first().map(|t| t.model_id.clone()).unwrap_or_else(|| split_name(path));
                Ok((model, toks))
            })
            .collect::<Result<_>>()?,
    };
    let sentences = match &a.data {
        Some(path) => Some(read_dataset_file(path, &a.common.label_set()?)?),
        None => None,
    };

    let models: Vec<String> = per_model.iter().map(|(m, _)| m.clone()).collect();
    let lookup: Vec<std::collections::HashMap<&str, &Tokenization>> = per_model
        .iter()
        .map(|(_, toks)| toks.iter().map(|t| (t.id.as_str(), t)).collect())
        .collect();
    let ids: Vec<String> = match &sentences {
        Some(s) => s.iter().map(|s| s.id.clone()).collect(),
        None => per_model[0].1.iter().map(|t| t.id.clone()).collect(),
    };
    let mut report = AlignReport {
        models: models.clone(),
        sentences: 0,
        words: 0,
        divergent_words: 0,
        selected_per_model: vec![0; models.len()],
        divergent: Vec::new(),
    };
    for (si, id) in ids.iter().enumerate() {
        let toks = lookup
            .iter()
            .zip(&models)
            .map(|(map, m)| {
                map.get(id.as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::InvalidTokenization(format!("{m}: no tokenization for `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_words = match &sentences {
            Some(s) => s[si].len(),
            None => toks[0].n_words(),
        };
        let alignment = select_min_tokenization(&toks, n_words)?;
        report.sentences += 1;
        report.words += n_words;
        for sel in &alignment.selection {
            report.selected_per_model[sel.model] += 1;
        }
        for w in alignment.divergent_words() {
            report.divergent_words += 1;
            report.divergent.push(DivergentWord {
                sentence: id.clone(),
                word: w,
                text: sentences.as_ref().map(|s| s[si].words[w].clone()),
                piece_counts: alignment.piece_counts(w),
                selected: models[alignment.selection[w].model].clone(),
            });
        }
    }

    if a.verbose {
        for d in &report.divergent {
            let counts: Vec<String> = models
                .iter()
                .zip(&d.piece_counts)
                .map(|(m, c)| format!("{m}={c}"))
                .collect();
            println!(
                "{} word {} {:?}: {} -> {}",
                d.sentence,
                d.word,
                d.text.as_deref().unwrap_or(""),
                counts.join(" "),
                d.selected
            );
        }
    }
    println!(
        "sentences {}  words {}  words with differing piece counts {}",
        report.sentences, report.words, report.divergent_words
    );
    for (m, n) in models.iter().zip(&report.selected_per_model) {
        println!("  selected {m}: {n}");
    }
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn gen_synth(a: SynthArgs) -> Result<()> {
    let labels = a.common.label_set()?;
    let seed = a.common.seed.unwrap_or(0);
    let cfg = SynthConfig {
        n_models: a.models,
        ..SynthConfig::new(a.train + a.dev, a.dim, a.noise, seed)
    };
    let corpus = generate(&cfg, &labels)?;
    let (train, dev) = corpus.sentences.split_at(a.train);
    let emb_dir = a.out.join("emb");
    for (split, sentences) in [("train", train), ("dev", dev)] {
        let path = a.out.join(format!("{split}.jsonl"));
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_dataset(BufWriter::new(file), sentences).map_err(|e| Error::io(&path, e))?;
    }
    for (m, model) in corpus.store.models().iter().enumerate() {
        let dir = emb_dir.join(model);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + m as u64));
        for (split, sentences) in [("train", train), ("dev", dev)] {
            let word_level: Vec<_> = sentences
                .iter()
                .map(|s| (s, &corpus.store.get(&s.id).expect("generated together")[m]))
                .collect();
            if a.subwords {
                let expanded = word_level
                    .iter()
                    .map(|(s, words)| subword_expand(s, model, words, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let tok_path = tokenization_path(&emb_dir, model, split);
                let mut w = BufWriter::new(File::create(&tok_path).map_err(|e| Error::io(&tok_path, e))?);
                for (tok, _) in &expanded {
                    serde_json::to_writer(&mut w, tok)?;
                    w.write_all(b"\n").map_err(|e| Error::io(&tok_path, e))?;
                }
                w.flush().map_err(|e| Error::io(&tok_path, e))?;
                write_embedding_file(
                    &embedding_path(&emb_dir, model, split),
                    sentences.iter().zip(&expanded).map(|(s, (_, e))| (s.id.as_str(), e)),
                )?;
            } else {
                write_embedding_file(
                    &embedding_path(&emb_dir, model, split),
                    word_level.iter().map(|(s, e)| (s.id.as_str(), *e)),
                )?;
            }
        }
    }
    println!(
        "wrote {} train / {} dev sentences and {} pseudo-encoders to {}",
        train.len(),
        dev.len(),
        corpus.store.models().len(),
        a.out.display()
    );
    Ok(())
}
