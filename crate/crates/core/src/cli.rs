//! Command-line entry point: preprocess, synth, train, predict, eval,
//! analyze and sweep. Stages exchange files only.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dst_autodiff::AutodiffError;

use crate::context::{build_context, build_vocabulary};
use crate::corpus::{
    default_excluded_domains, filter_domains, load_multiwoz, mean_turns, save_dataset, Dialogue, Ontology, SlotKey,
};
use crate::error::{DstError, Result};
use crate::eval::{
    format_length_table, format_summary_table, format_taxonomy_table, joint_accuracy, length_plot_points,
    length_records, length_report, read_dump, slot_accuracy, taxonomy_records, taxonomy_report, write_dump,
    TurnPrediction,
};
use crate::model::DstModel;
use crate::synthetic::{generate_synthetic, split_corpus, SyntheticConfig};
use crate::trainer::{fit, sweep, sweep_tsv, TrainConfig};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const ONTOLOGY_FILE: &str = "ontology.txt";

#[derive(Debug, Parser)]
#[command(
    name = "dst",
    version,
    about = "Dialogue state tracking with an auxiliary bi-directional language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a MultiWOZ-style dataset into train/dev/test files plus vocabulary and ontology.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic template corpus with train/dev/test splits.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and a per-epoch report.
    Train(TrainArgs),
    /// Write a prediction dump for one split using a checkpoint.
    Predict(PredictArgs),
    /// Print joint and slot accuracy of a prediction dump.
    Eval(EvalArgs),
    /// Print context-length and error-type reports of a prediction dump.
    Analyze(AnalyzeArgs),
    /// Train once per (alpha, delay) cell and print the grid of accuracies.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset directory holding {train,dev,test}.json or {train,dev,test}_dials.json
    #[arg(long)]
    pub data: PathBuf,
    /// Ontology file with one domain-slot per line (default: built-in MultiWOZ ontology)
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum token count for the vocabulary
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Context length statistics ignore [sys]/[usr] tags either way; accepted for symmetry with train
    #[arg(long)]
    pub no_tagging: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of dialogues
    #[arg(long, default_value_t = 500)]
    pub dialogues: usize,
    /// Number of domains
    #[arg(long, default_value_t = 5)]
    pub domains: usize,
    /// Slots per domain
    #[arg(long, default_value_t = 3)]
    pub slots_per_domain: usize,
    /// Number of distinct value words
    #[arg(long, default_value_t = 150)]
    pub vocab_size: usize,
    /// Maximum turns per dialogue
    #[arg(long, default_value_t = 5)]
    pub max_turns: usize,
}

/// Training options; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOptions {
    /// Config file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the language-model loss
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Micro-batches accumulated per parameter update
    #[arg(long)]
    pub delay_steps: Option<usize>,
    /// Examples per micro-batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable the auxiliary language model
    #[arg(long)]
    pub no_lm: bool,
    /// Disable [sys]/[usr] utterance tags
    #[arg(long)]
    pub no_tagging: bool,
    /// Minimum token count for the vocabulary
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Maximum number of epochs
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    pub patience: Option<usize>,
    /// Encoder, decoder and language-model hidden size
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Token embedding width (word part plus character part)
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Character n-gram part of the embedding
    #[arg(long)]
    pub char_dim: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Dropout on embeddings and encoder outputs
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Probability of replacing a context word by <unk> during training
    #[arg(long)]
    pub word_dropout: Option<f64>,
    /// Maximum decoded value length
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    /// GloVe-format word vectors for the word part of the embedding
    #[arg(long)]
    pub vectors: Option<PathBuf>,
}

impl TrainOptions {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$target = v; })*
            };
        }
        apply!(seed => seed, alpha => alpha, delay_steps => delay_update_steps, batch_size => batch_size,
            min_count => min_count, max_epochs => max_epochs, patience => patience, hidden_dim => hidden_dim,
            embedding_dim => embedding_dim, char_dim => char_dim, learning_rate => learning_rate,
            dropout => dropout, word_dropout => word_dropout, max_decode_len => max_decode_len);
        if let Some(v) = &self.vectors {
            cfg.pretrained_vectors = Some(v.clone());
        }
        if self.no_lm {
            cfg.lm_enabled = false;
        }
        if self.no_tagging {
            cfg.tagging_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory with train.json and dev.json (and optionally ontology.txt)
    #[arg(long)]
    pub data: PathBuf,
    /// Ontology file (default: <data>/ontology.txt, else built-in MultiWOZ ontology)
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Where to write the best checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the per-epoch report (TSV)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub options: TrainOptions,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or a single corpus file
    #[arg(long)]
    pub data: PathBuf,
    /// Split to predict when --data is a directory
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Ontology file used to check the corpus (default: the checkpoint's)
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Output prediction dump (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; prediction is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction dump (JSON lines)
    #[arg(long)]
    pub data: PathBuf,
    /// Ontology for slot accuracy (default: the checkpoint's, else every slot seen in the dump)
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Checkpoint whose ontology is used for slot accuracy
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the result as a JSON line here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in the printed table (default: the dump file stem)
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Prediction dump (JSON lines)
    #[arg(long)]
    pub data: PathBuf,
    /// Also write machine-readable records (JSON lines) here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-bucket plot points (TSV) here
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Corpus directory with train.json and dev.json
    #[arg(long)]
    pub data: PathBuf,
    /// Ontology file (default: <data>/ontology.txt, else built-in MultiWOZ ontology)
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Comma-separated alpha values
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.5,0.9",
        allow_negative_numbers = true
    )]
    pub alphas: Vec<f64>,
    /// Comma-separated delay-update step counts
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    pub delays: Vec<usize>,
    /// Where to write the grid (TSV)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub options: TrainOptions,
}

/// Short machine-readable tag of an error.
pub fn error_kind(e: &DstError) -> &'static str {
    match e {
        DstError::Autodiff(AutodiffError::Checkpoint(_)) => "incompatible_checkpoint",
        DstError::Autodiff(AutodiffError::Io(_)) => "io",
        DstError::Autodiff(_) => "numeric",
        DstError::Io { .. } => "io",
        DstError::Json { .. } => "json",
        DstError::Malformed { .. } => "malformed_data",
        DstError::Parse { .. } => "parse",
        DstError::TurnOutOfRange { .. } => "turn_out_of_range",
        DstError::NegativeLength(_) => "negative_length",
        DstError::VocabTooSmall { .. } => "vocab_too_small",
        DstError::VectorDimension { .. } => "vector_dimension",
        DstError::NegativeAlpha(_) => "negative_alpha",
        DstError::UnknownSlot(_) => "unknown_slot",
        DstError::Empty(_) => "empty_input",
        DstError::InvalidConfig(_) => "invalid_config",
        DstError::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
    }
}

/// `error[kind]: message` on one line.
pub fn error_line(e: &DstError) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {}", error_kind(e), msg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DstError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DstError::io(path, e))
}

/// `<dir>/<split>.json`, falling back to `<dir>/<split>_dials.json`.
pub fn split_path(dir: &Path, split: &str) -> Result<PathBuf> {
    let candidates = [
        dir.join(format!("{split}.json")),
        dir.join(format!("{split}_dials.json")),
    ];
    candidates.iter().find(|p| p.is_file()).cloned().ok_or_else(|| {
        DstError::io(
            &candidates[0],
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {split} split found")),
        )
    })
}

pub fn load_split(dir: &Path, split: &str, ontology: Option<&Ontology>) -> Result<Vec<Dialogue>> {
    let corpus = load_multiwoz(&split_path(dir, split)?, ontology)?;
    if corpus.skipped_entries > 0 {
        log::warn!(
            "{split}: skipped {} state entries with unknown slots",
            corpus.skipped_entries
        );
    }
    Ok(corpus.dialogues)
}

/// Explicit file, else `<data>/ontology.txt`, else the built-in ontology.
pub fn resolve_ontology(explicit: Option<&Path>, data_dir: &Path) -> Result<Ontology> {
    if let Some(p) = explicit {
        return Ontology::load(p);
    }
    let local = data_dir.join(ONTOLOGY_FILE);
    if local.is_file() {
        return Ontology::load(&local);
    }
    Ok(Ontology::multiwoz())
}

fn ablation_name(cfg: &TrainConfig) -> String {
    match (cfg.lm_enabled, cfg.tagging_enabled) {
        (true, true) => "full".into(),
        (false, true) => "-LM".into(),
        (true, false) => "-Tagging".into(),
        (false, false) => "-LM -Tagging".into(),
    }
}

/// Corpus statistics printed by `preprocess`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub mean_turns: f64,
    pub max_context_length: usize,
    pub long_fraction: f64,
}

/// Dialogue count, mean turns, longest untagged context and the share of
/// turns with at least 200 context tokens.
pub fn corpus_stats(dialogues: &[Dialogue]) -> Result<CorpusStats> {
    let mut max_len = 0;
    let (mut long, mut total) = (0usize, 0usize);
    for d in dialogues {
        for t in 0..d.turns.len() {
            let n = build_context(d, t, false)?.len();
            max_len = max_len.max(n);
            long += usize::from(n >= 200);
            total += 1;
        }
    }
    Ok(CorpusStats {
        dialogues: dialogues.len(),
        mean_turns: mean_turns(dialogues),
        max_context_length: max_len,
        long_fraction: if total == 0 { 0.0 } else { long as f64 / total as f64 },
    })
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let ontology = match &args.ontology {
        Some(p) => Ontology::load(p)?,
        None => Ontology::multiwoz(),
    };
    let excluded = default_excluded_domains();
    fs::create_dir_all(&args.out).map_err(|e| DstError::io(&args.out, e))?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let dialogues = filter_domains(load_split(&args.data, split, Some(&ontology))?, &excluded);
        save_dataset(&args.out.join(format!("{split}.json")), &dialogues)?;
        let s = corpus_stats(&dialogues)?;
        println!(
            "{split}: {} dialogues, {:.2} mean turns, max context {} tokens, {:.2}% of turns >= 200 tokens",
            s.dialogues,
            s.mean_turns,
            s.max_context_length,
            100.0 * s.long_fraction
        );
        splits.push(dialogues);
    }
    let all: Vec<Dialogue> = splits.iter().flatten().cloned().collect();
    let s = corpus_stats(&all)?;
    println!(
        "all: {} dialogues, {:.2} mean turns, max context {} tokens",
        s.dialogues, s.mean_turns, s.max_context_length
    );
    build_vocabulary(&splits[0], args.min_count).save(&args.out.join("vocab.txt"))?;
    write_file(&args.out.join(ONTOLOGY_FILE), &ontology.to_text())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_dialogues: args.dialogues,
        n_domains: args.domains,
        n_slots_per_domain: args.slots_per_domain,
        vocab_size: args.vocab_size,
        max_turns: args.max_turns,
        seed: args.seed,
    };
    let (dialogues, ontology) = generate_synthetic(&cfg)?;
    let (train, dev, test) = split_corpus(dialogues, 0.8, 0.1);
    fs::create_dir_all(&args.out).map_err(|e| DstError::io(&args.out, e))?;
    for (split, part) in SPLITS.iter().zip([&train, &dev, &test]) {
        save_dataset(&args.out.join(format!("{split}.json")), part)?;
    }
    write_file(&args.out.join(ONTOLOGY_FILE), &ontology.to_text())?;
    println!(
        "wrote {} / {} / {} dialogues to {}",
        train.len(),
        dev.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.options.resolve()?;
    let ontology = resolve_ontology(args.ontology.as_deref(), &args.data)?;
    let train = load_split(&args.data, "train", Some(&ontology))?;
    let dev = load_split(&args.data, "dev", Some(&ontology))?;
    let (_, report) = fit(&train, &dev, &ontology, &cfg, Some(&args.checkpoint))?;
    if let Some(out) = &args.out {
        write_file(out, &report.to_tsv())?;
    }
    print!("{}", report.curve_tsv());
    let best = report.best();
    print!(
        "{}",
        format_summary_table(&[(ablation_name(&cfg), best.val_joint, best.val_slot)])
    );
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let model = DstModel::load(&args.checkpoint)?;
    let ontology = match &args.ontology {
        Some(p) => Ontology::load(p)?,
        None => model.ontology.clone(),
    };
    let dialogues = if args.data.is_dir() {
        load_split(&args.data, &args.split, Some(&ontology))?
    } else {
        load_multiwoz(&args.data, Some(&ontology))?.dialogues
    };
    let preds = model.predict_corpus(&dialogues)?;
    write_dump(&args.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn dump_ontology(preds: &[TurnPrediction]) -> Result<Ontology> {
    let mut slots: Vec<SlotKey> = preds
        .iter()
        .flat_map(|p| p.gold.iter().chain(p.predicted.iter()).map(|(k, _)| k.clone()))
        .collect();
    slots.sort();
    slots.dedup();
    Ontology::new(slots)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let preds = read_dump(&args.data)?;
    let ontology = match (&args.ontology, &args.checkpoint) {
        (Some(p), _) => Ontology::load(p)?,
        (None, Some(c)) => DstModel::load(c)?.ontology,
        (None, None) => dump_ontology(&preds)?,
    };
    let joint = joint_accuracy(&preds)?;
    let slot = slot_accuracy(&preds, &ontology)?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.data
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
    });
    println!("joint accuracy: {joint}");
    println!("slot accuracy: {slot}");
    print!("{}", format_summary_table(&[(name.clone(), joint, slot)]));
    if let Some(out) = &args.out {
        let rec = serde_json::json!({
            "name": name,
            "turns": preds.len(),
            "joint_accuracy": joint.as_f64(),
            "slot_accuracy": slot.as_f64(),
        });
        write_file(out, &format!("{rec}\n"))?;
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let preds = read_dump(&args.data)?;
    let rows = length_report(&preds);
    let tax = taxonomy_report(&preds);
    println!("Joint accuracy by context length");
    print!("{}", format_length_table(&rows));
    println!();
    println!("Prediction error types");
    print!("{}", format_taxonomy_table(&tax));
    if let Some(out) = &args.out {
        write_file(out, &(length_records(&rows) + &taxonomy_records(&tax)))?;
    }
    if let Some(plot) = &args.plot {
        write_file(plot, &length_plot_points(&rows))?;
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.options.resolve()?;
    let ontology = resolve_ontology(args.ontology.as_deref(), &args.data)?;
    let train = load_split(&args.data, "train", Some(&ontology))?;
    let dev = load_split(&args.data, "dev", Some(&ontology))?;
    let rows = sweep(&args.alphas, &args.delays, &train, &dev, &ontology, &cfg)?;
    let tsv = sweep_tsv(&rows);
    if let Some(out) = &args.out {
        write_file(out, &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => run_sweep(a),
    }
}
