//! The `wfe` command line: data-gen, train, decode, eval and wfe-eval.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::beam::{decode, DecodeMode, DecodeOptions};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{gen_synthetic, TextCorpus};
use crate::error::{Error, Result};
use crate::metrics::{repeat_rate_text, rouge, wfe_confusion, RougeVariant};
use crate::model::{ModelConfig, Seq2Seq};
use crate::rng::Rng;
use crate::train::train_with;
use crate::vocab::Vocabulary;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VAL_FILE: &str = "val.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const SRC_VOCAB_FILE: &str = "vocab.src";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt";

#[derive(Debug, Parser)]
#[command(name = "wfe", version, about = "Seq2seq generation with word-frequency-capped beam search")]
pub struct Cli {
    /// key = value configuration file; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Random seed (falls back to WFE_SEED, then 1)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic keyword-compression corpus and vocabularies
    DataGen(DataGenArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Decode source sentences with beam search
    Decode(DecodeArgs),
    /// Score candidates against references
    Eval(EvalArgs),
    /// Confusion matrix of the frequency estimates on a corpus
    WfeEval(WfeEvalArgs),
}

#[derive(Debug, Args)]
pub struct DataGenArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub pairs: Option<u64>,
    #[arg(long)]
    pub content_words: Option<usize>,
    #[arg(long)]
    pub filler_words: Option<usize>,
    /// Maximum vocabulary size, reserved symbols included
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the corpus splits and vocabularies
    #[arg(long, default_value = ".")]
    pub data: PathBuf,
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

impl DataArgs {
    fn vocabs(&self) -> Result<(Vocabulary, Vocabulary)> {
        let src = self.src_vocab.clone().unwrap_or_else(|| self.data.join(SRC_VOCAB_FILE));
        let tgt = self.tgt_vocab.clone().unwrap_or_else(|| self.data.join(TGT_VOCAB_FILE));
        Ok((Vocabulary::load(&src)?, Vocabulary::load(&tgt)?))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log (TSV); written next to the checkpoint by default
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub adam_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_adam: Option<f64>,
    #[arg(long)]
    pub lr_sgd: Option<f64>,
    #[arg(long)]
    pub clip_adam: Option<f64>,
    #[arg(long)]
    pub clip_sgd: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Weight of the frequency-estimation loss
    #[arg(long)]
    pub wfe_weight: Option<f64>,
    /// Train the plain baseline without the estimation head
    #[arg(long)]
    pub no_wfe: bool,
    /// Write 0 in the seconds column so logs are reproducible
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentences, one per line (a TAB-separated pair uses the source side)
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// baseline or wfe
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Write per-step JSON lines to this file
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference lines (a TAB-separated pair uses the target side)
    #[arg(long)]
    pub references: PathBuf,
    /// recall or f1
    #[arg(long)]
    pub basis: Option<String>,
    #[arg(long)]
    pub byte_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WfeEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to evaluate; defaults to the test split in --data
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

fn config(cli: &Cli, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_env()?;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg.finish())
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::DataGen(a) => data_gen(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Decode(a) => decode_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::WfeEval(a) => wfe_eval_cmd(&cli, a),
    }
}

fn data_gen(cli: &Cli, a: &DataGenArgs) -> Result<()> {
    let cfg = config(
        cli,
        &[
            ("pairs", s(&a.pairs)),
            ("content_words", s(&a.content_words)),
            ("filler_words", s(&a.filler_words)),
            ("vocab_size", s(&a.vocab_size)),
        ],
    )?;
    if cfg.data.pairs == 0 {
        return Err(Error::Config("pairs must be >= 1".into()));
    }
    let corpus = gen_synthetic(&cfg.data)?;
    let (train, val, test) = corpus.split()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    train.save(&a.out.join(TRAIN_FILE))?;
    val.save(&a.out.join(VAL_FILE))?;
    test.save(&a.out.join(TEST_FILE))?;
    Vocabulary::build(train.sources(), cfg.vocab_size).save(&a.out.join(SRC_VOCAB_FILE))?;
    Vocabulary::build(train.targets(), cfg.vocab_size).save(&a.out.join(TGT_VOCAB_FILE))?;
    info!(
        "wrote {} / {} / {} pairs to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    if a.no_wfe && a.wfe_weight.is_some_and(|w| w != 0.0) {
        return Err(Error::Config("--no-wfe conflicts with a nonzero --wfe-weight".into()));
    }
    let mut cfg = config(
        cli,
        &[
            ("epochs", s(&a.epochs)),
            ("adam_epochs", s(&a.adam_epochs)),
            ("batch_size", s(&a.batch_size)),
            ("lr_adam", s(&a.lr_adam)),
            ("lr_sgd", s(&a.lr_sgd)),
            ("clip_adam", s(&a.clip_adam)),
            ("clip_sgd", s(&a.clip_sgd)),
            ("patience", s(&a.patience)),
            ("dropout", s(&a.dropout)),
            ("embed_dim", s(&a.embed_dim)),
            ("hidden_dim", s(&a.hidden_dim)),
            ("wfe_weight", s(&a.wfe_weight)),
        ],
    )?;
    if a.no_wfe {
        cfg.train.wfe_weight = 0.0;
    }
    if a.no_timing {
        cfg.train.timing = false;
    }
    let (src_vocab, tgt_vocab) = a.data.vocabs()?;
    let train_path = a.train.clone().unwrap_or_else(|| a.data.data.join(TRAIN_FILE));
    let val_path = a.val.clone().unwrap_or_else(|| a.data.data.join(VAL_FILE));
    let train_set = TextCorpus::load(&train_path)?.encode(&src_vocab, &tgt_vocab);
    let val_set = TextCorpus::load(&val_path)?.encode(&src_vocab, &tgt_vocab);

    let model_cfg = ModelConfig {
        src_vocab_size: src_vocab.len(),
        tgt_vocab_size: tgt_vocab.len(),
        wfe_head: !a.no_wfe,
        dropout: cfg.train.dropout,
        ..cfg.model.clone()
    };
    let model = Seq2Seq::new(model_cfg, &mut Rng::new(cfg.seed))?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.tsv"));
    let mut log = String::new();
    let report = train_with(model, &train_set, &val_set, &cfg.loss, &cfg.train, |e| {
        log.push_str(&e.to_tsv());
        log.push('\n');
    })?;
    write_file(&log_path, &log)?;
    Checkpoint::from_model(&report.model, &cfg.loss).save(&a.out)?;
    info!(
        "best epoch {} (validation loss {:.6}); checkpoint {}",
        report.best_epoch,
        report.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn source_side(line: &str) -> &str {
    line.split_once('\t').map_or(line, |(s, _)| s)
}

fn target_side(line: &str) -> &str {
    line.split_once('\t').map_or(line, |(_, t)| t)
}

fn decode_cmd(cli: &Cli, a: &DecodeArgs) -> Result<()> {
    let cfg = config(
        cli,
        &[
            ("beam", s(&a.beam)),
            ("mode", a.mode.clone()),
            ("max_len", s(&a.max_len)),
        ],
    )?;
    let (model, _) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    if cfg.mode == DecodeMode::Wfe && !model.has_wfe() {
        return Err(Error::State(format!(
            "--mode wfe needs a checkpoint with the estimation head; {} is a baseline model",
            a.checkpoint.display()
        )));
    }
    let (src_vocab, tgt_vocab) = a.data.vocabs()?;
    let opts = DecodeOptions {
        beam: cfg.beam,
        mode: cfg.mode,
        max_len: cfg.max_len,
        exempt_special: true,
        trace: a.trace.is_some(),
    };
    let mut out = String::new();
    let mut trace = String::new();
    for (n, line) in read_lines(&a.input)?.iter().enumerate() {
        let src = src_vocab.encode(source_side(line));
        if src.is_empty() {
            warn!("input line {} is empty; leaving its output empty", n + 1);
            out.push('\n');
            continue;
        }
        let result = decode(&model, &src, &opts, None)?;
        if result.truncated() {
            warn!("input line {}: no hypothesis ended before the length limit", n + 1);
        }
        out.push_str(&tgt_vocab.decode(result.best().output()));
        out.push('\n');
        for rec in &result.trace {
            let mut v: serde_json::Value = serde_json::from_str(&rec.to_json_line())
                .map_err(|e| Error::State(format!("trace encoding: {e}")))?;
            v["line"] = serde_json::json!(n + 1);
            trace.push_str(&v.to_string());
            trace.push('\n');
        }
    }
    if let Some(path) = &a.trace {
        write_file(path, &trace)?;
    }
    match &a.output {
        Some(path) => write_file(path, &out),
        None => io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| Error::io("writing output", e)),
    }
}

/// Metric report lines: `metric<TAB>value`.
pub fn metric_report(
    candidates: &[String],
    references: &[String],
    basis: crate::metrics::Basis,
    byte_limit: Option<usize>,
) -> Result<String> {
    let mut report = String::new();
    for v in RougeVariant::ALL {
        let score = rouge(candidates, references, v, basis, byte_limit)?;
        report.push_str(&format!("{v}({basis})\t{score:.6}\n"));
    }
    report.push_str(&format!("repeat_rate\t{:.6}\n", repeat_rate_text(candidates)));
    Ok(report)
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = config(
        cli,
        &[("basis", a.basis.clone()), ("byte_limit", s(&a.byte_limit))],
    )?;
    let cands = read_lines(&a.candidates)?;
    let refs: Vec<String> = read_lines(&a.references)?
        .iter()
        .map(|l| target_side(l).to_string())
        .collect();
    if cands.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} has {} lines but {} has {}",
            a.candidates.display(),
            cands.len(),
            a.references.display(),
            refs.len()
        )));
    }
    print!("{}", metric_report(&cands, &refs, cfg.basis, cfg.byte_limit)?);
    Ok(())
}

fn wfe_eval_cmd(cli: &Cli, a: &WfeEvalArgs) -> Result<()> {
    config(cli, &[])?;
    let (model, _) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    if !model.has_wfe() {
        return Err(Error::State(format!(
            "{} is a baseline checkpoint without frequency-estimation parameters",
            a.checkpoint.display()
        )));
    }
    let (src_vocab, tgt_vocab) = a.data.vocabs()?;
    let path = a.corpus.clone().unwrap_or_else(|| a.data.data.join(TEST_FILE));
    let corpus = TextCorpus::load(&path)?.encode(&src_vocab, &tgt_vocab);
    let grid = wfe_confusion(&model, &corpus)?;
    print!("{grid}");
    println!("total\t{}", grid.total());
    Ok(())
}
