//! Operator entry point: train, translate, score, align, bpe.
//!
//! Exit codes: 0 on success, 2 for usage/data errors, 3 for numeric
//! failures. Every command that takes `--seed` is bit-reproducible in its
//! file outputs. `FGNMT_VERBOSE=1` enables progress logging on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fgnmt::analysis::{
    avg_over_dims, avg_over_target, dim_labels, heatmap, slice_dim, top_dims, AlignmentRecord,
};
use fgnmt::attention::Variant;
use fgnmt::data::{
    apply_bpe, build_vocab, learn_bpe, tokenize, toy_corpus, unbpe, BpeMerges, ParallelCorpus,
    ToyTask, Vocabulary,
};
use fgnmt::decoding::{beam_search, default_max_len};
use fgnmt::error::Error;
use fgnmt::evaluation::bleu;
use fgnmt::model::{Model, ModelConfig};
use fgnmt::numerics::Tensor;
use fgnmt::training::{early_stop_loop, encode_corpus, TrainSchedule};

#[derive(Parser)]
#[command(name = "fgnmt", version, about = "Attention-based NMT with fine-grained attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with early stopping on validation BLEU.
    Train(TrainArgs),
    /// Translate a file of sentences with beam search.
    Translate(TranslateArgs),
    /// Score translations against references with corpus BLEU.
    Score(ScoreArgs),
    /// Inspect an exported alignment tensor.
    Align(AlignArgs),
    /// Learn, apply, or undo byte-pair-encoding subwords.
    Bpe(BpeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Translate(args) => cmd_translate(args),
        Command::Score(args) => cmd_score(args),
        Command::Align(args) => cmd_align(args),
        Command::Bpe(args) => cmd_bpe(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

// ── train ───────────────────────────────────────────────────────────────

/// Flags may also come from `--config`, a flat-text file of `key=value`
/// lines using the same names with underscores (`hidden_dim=32`).
/// Command-line values override file values; unknown keys are errors.
#[derive(Args)]
struct TrainArgs {
    /// Flat-text config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Toy task: copy, reverse, or polysemy. Mutually exclusive with the
    /// corpus file flags.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    #[arg(long)]
    valid_src: Option<PathBuf>,
    #[arg(long)]
    valid_tgt: Option<PathBuf>,

    /// Attention variant: att, atty, or atty2d.
    #[arg(long)]
    variant: Option<String>,
    /// Enrich source embeddings with a mean-pooled context vector.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    contextualize: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,

    /// Checkpoint output path; vocabularies land next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log path (default: <out>.log).
    #[arg(long)]
    log: Option<PathBuf>,

    // Toy corpus shape.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    valid_pairs: Option<usize>,
    #[arg(long)]
    toy_vocab: Option<usize>,
    #[arg(long)]
    toy_max_len: Option<usize>,

    // Model dimensions.
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    align_hidden_dim: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,

    // Schedule.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    validation_interval: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

const TRAIN_CONFIG_KEYS: &[&str] = &[
    "task",
    "train_src",
    "train_tgt",
    "valid_src",
    "valid_tgt",
    "variant",
    "contextualize",
    "seed",
    "out",
    "log",
    "pairs",
    "valid_pairs",
    "toy_vocab",
    "toy_max_len",
    "emb_dim",
    "hidden_dim",
    "align_hidden_dim",
    "vocab_cap",
    "batch_size",
    "max_len",
    "validation_interval",
    "patience",
    "max_steps",
    "learning_rate",
    "clip_norm",
];

/// Key=value lines, `#` comments and blank lines allowed.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {} is not key=value", i + 1)))?;
        let key = key.trim().to_owned();
        if !TRAIN_CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Format(format!("unknown config key '{key}'")));
        }
        map.insert(key, value.trim().to_owned());
    }
    Ok(map)
}

fn pick<T: FromStr>(
    cli: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, Error> {
    pick_opt(cli, file, key).map(|v| v.unwrap_or(default))
}

fn pick_opt<T: FromStr>(
    cli: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, Error> {
    if cli.is_some() {
        return Ok(cli);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Format(format!("bad config value for '{key}': '{raw}'"))),
        None => Ok(None),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };

    let task = pick_opt(args.task, &file, "task")?;
    let train_src = pick_opt(args.train_src, &file, "train_src")?;
    let train_tgt = pick_opt(args.train_tgt, &file, "train_tgt")?;
    let valid_src = pick_opt(args.valid_src, &file, "valid_src")?;
    let valid_tgt = pick_opt(args.valid_tgt, &file, "valid_tgt")?;

    let variant = Variant::parse(&pick(args.variant, &file, "variant", "atty2d".to_owned())?)?;
    let contextualize = pick(args.contextualize, &file, "contextualize", false)?;
    let seed = pick(args.seed, &file, "seed", 0)?;
    let out = pick(args.out, &file, "out", PathBuf::from("model.fgnmt"))?;
    let log_path = pick_opt(args.log, &file, "log")?
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", out.display())));

    let pairs = pick(args.pairs, &file, "pairs", 2000)?;
    let valid_pairs = pick(args.valid_pairs, &file, "valid_pairs", 200)?;
    let toy_vocab = pick(args.toy_vocab, &file, "toy_vocab", 20)?;
    let toy_max_len = pick(args.toy_max_len, &file, "toy_max_len", 10)?;

    let emb_dim = pick(args.emb_dim, &file, "emb_dim", 32)?;
    let hidden_dim = pick(args.hidden_dim, &file, "hidden_dim", 32)?;
    let align_hidden_dim = pick(args.align_hidden_dim, &file, "align_hidden_dim", 2 * hidden_dim)?;
    let vocab_cap = pick(args.vocab_cap, &file, "vocab_cap", 30000)?;

    let schedule = TrainSchedule {
        batch_size: pick(args.batch_size, &file, "batch_size", 16)?,
        max_len: pick(args.max_len, &file, "max_len", 50)?,
        validation_interval: pick(args.validation_interval, &file, "validation_interval", 250)?,
        patience: pick(args.patience, &file, "patience", 5)?,
        max_steps: pick(args.max_steps, &file, "max_steps", 20_000)?,
        seed,
        clip_norm: pick(args.clip_norm, &file, "clip_norm", 1.0)?,
        learning_rate: pick(args.learning_rate, &file, "learning_rate", 1e-3)?,
    };

    // Either a toy task or all four corpus files.
    let (train, valid) = match (task, &train_src) {
        (Some(task), None) => {
            let task = ToyTask::parse(&task)?;
            let train = toy_corpus(task, pairs, toy_vocab, toy_max_len, seed)?;
            let valid = toy_corpus(
                task,
                valid_pairs,
                toy_vocab,
                toy_max_len,
                seed.wrapping_add(0x9e3779b9),
            )?;
            (train, valid)
        }
        (None, Some(_)) => {
            let missing = || {
                Error::Contract(
                    "file training needs --train-src, --train-tgt, --valid-src and --valid-tgt"
                        .into(),
                )
            };
            let train = ParallelCorpus::from_files(
                train_src.as_deref().ok_or_else(missing)?,
                train_tgt.as_deref().ok_or_else(missing)?,
            )?;
            let valid = ParallelCorpus::from_files(
                valid_src.as_deref().ok_or_else(missing)?,
                valid_tgt.as_deref().ok_or_else(missing)?,
            )?;
            (train, valid)
        }
        (Some(_), Some(_)) => {
            return Err(Error::Contract(
                "--task and --train-src are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Contract(
                "either --task or the corpus file flags are required".into(),
            ))
        }
    };

    let src_refs: Vec<&[String]> = train.pairs.iter().map(|(s, _)| s.as_slice()).collect();
    let tgt_refs: Vec<&[String]> = train.pairs.iter().map(|(_, t)| t.as_slice()).collect();
    let src_vocab = build_vocab(src_refs, vocab_cap)?;
    let tgt_vocab = build_vocab(tgt_refs, vocab_cap)?;

    let config = ModelConfig {
        variant,
        contextualization: contextualize,
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        emb_dim,
        hidden_dim,
        align_hidden_dim,
        trained_init_states: false,
        seed,
    };
    let mut model = Model::new(config)?;
    let encoded = encode_corpus(&train, &src_vocab, &tgt_vocab);

    let outcome = early_stop_loop(&mut model, &encoded, &valid, &src_vocab, &tgt_vocab, &schedule)?;

    outcome.best.save(&out)?;
    src_vocab.save(&vocab_path(&out, "src"))?;
    tgt_vocab.save(&vocab_path(&out, "tgt"))?;
    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(&entry.to_line());
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text)?;
    println!(
        "best validation BLEU {:.4} after {} validations; checkpoint written to {}",
        outcome.best_bleu,
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

fn vocab_path(checkpoint: &Path, side: &str) -> PathBuf {
    PathBuf::from(format!("{}.{side}.vocab", checkpoint.display()))
}

// ── translate ───────────────────────────────────────────────────────────

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input file, one (possibly BPE'd) sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Beam width.
    #[arg(long, default_value_t = 12)]
    beam: usize,
    /// Decoding length bound (default: 3·source length + 10).
    #[arg(long)]
    max_len: Option<usize>,
    /// Directory for one alignment tensor file per sentence.
    #[arg(long)]
    emit_align: Option<PathBuf>,
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    /// Worker threads; output order always matches input order.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn cmd_translate(args: TranslateArgs) -> Result<(), Error> {
    let model = Model::load(&args.checkpoint)?;
    let src_vocab = Vocabulary::load(
        &args
            .src_vocab
            .unwrap_or_else(|| vocab_path(&args.checkpoint, "src")),
    )?;
    let tgt_vocab = Vocabulary::load(
        &args
            .tgt_vocab
            .unwrap_or_else(|| vocab_path(&args.checkpoint, "tgt")),
    )?;
    if src_vocab.len() != model.config.src_vocab || tgt_vocab.len() != model.config.tgt_vocab {
        return Err(Error::Data(format!(
            "vocabulary sizes ({}, {}) do not match the checkpoint config ({}, {})",
            src_vocab.len(),
            tgt_vocab.len(),
            model.config.src_vocab,
            model.config.tgt_vocab
        )));
    }

    let text = std::fs::read_to_string(&args.input)?;
    let lines: Vec<&str> = text.lines().collect();
    let workers = args.workers.max(1).min(lines.len().max(1));
    let fingerprint = model.fingerprint();
    let verbose = std::env::var("FGNMT_VERBOSE").map_or(false, |v| v != "0" && !v.is_empty());

    type LineOutput = (String, Option<AlignmentRecord>);
    let process = |line: &str| -> Result<LineOutput, Error> {
        let src_tokens = tokenize(line);
        if src_tokens.is_empty() {
            return Ok((String::new(), None));
        }
        let src_ids = src_vocab.encode(&src_tokens);
        let max_len = args
            .max_len
            .unwrap_or_else(|| default_max_len(src_ids.len()));
        let hyp = beam_search(&model, &src_ids, args.beam, max_len)?;
        let emitted = tgt_vocab.decode(&hyp.tokens)?;
        let surface = tgt_vocab.decode(hyp.surface_tokens())?;
        let translation = unbpe(&surface).join(" ");
        let record = if args.emit_align.is_some() {
            Some(AlignmentRecord::new(
                src_tokens,
                emitted,
                hyp.alignment()?,
                fingerprint.clone(),
            )?)
        } else {
            None
        };
        Ok((translation, record))
    };

    let mut results: Vec<Option<LineOutput>> = Vec::new();
    results.resize_with(lines.len(), || None);
    if workers <= 1 {
        for (i, line) in lines.iter().enumerate() {
            results[i] = Some(process(line)?);
            if verbose && (i + 1) % 50 == 0 {
                eprintln!("translated {}/{} sentences", i + 1, lines.len());
            }
        }
    } else {
        let chunks: Vec<Result<Vec<(usize, LineOutput)>, Error>> = std::thread::scope(|scope| {
            let process = &process;
            let lines = &lines;
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for i in (w..lines.len()).step_by(workers) {
                            out.push((i, process(lines[i])?));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("translation worker panicked"))
                .collect()
        });
        for chunk in chunks {
            for (i, item) in chunk? {
                results[i] = Some(item);
            }
        }
    }

    let mut output = String::new();
    let mut records = Vec::new();
    for item in results.into_iter() {
        let (line, record) = item.expect("every line processed");
        output.push_str(&line);
        output.push('\n');
        records.push(record);
    }

    match &args.output {
        Some(path) => std::fs::write(path, output)?,
        None => print!("{output}"),
    }

    if let Some(dir) = &args.emit_align {
        std::fs::create_dir_all(dir)?;
        for (i, record) in records.into_iter().enumerate() {
            if let Some(record) = record {
                record.save(&dir.join(format!("sent{i:05}.fgat")))?;
            }
        }
    }
    Ok(())
}

// ── score ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct ScoreArgs {
    /// Hypothesis file, already un-BPE'd and tokenized.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Add-one smoothing on the n ≥ 2 precisions for tiny corpora.
    #[arg(long)]
    smooth: bool,
}

fn cmd_score(args: ScoreArgs) -> Result<(), Error> {
    let hyp_text = std::fs::read_to_string(&args.hyp)?;
    let ref_text = std::fs::read_to_string(&args.reference)?;
    let hyps: Vec<Vec<String>> = hyp_text.lines().map(tokenize).collect();
    let refs: Vec<Vec<String>> = ref_text.lines().map(tokenize).collect();
    let report = bleu(&hyps, &refs, args.smooth)?;
    println!("{report}");
    Ok(())
}

// ── align ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct AlignArgs {
    /// Alignment tensor written by `translate --emit-align`.
    #[arg(long)]
    fgat: PathBuf,
    /// Output path prefix (default: the fgat path).
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// Also write each requested matrix as a flat-text table.
    #[arg(long)]
    table: bool,

    /// Alignment strength averaged over dimensions, as a heatmap.
    #[arg(long)]
    avg_dims: bool,
    /// Per-source-word dimension profile averaged over the target.
    #[arg(long)]
    avg_target: bool,
    /// A single dimension's source-target slice.
    #[arg(long)]
    slice: Option<usize>,
    /// Top dimensions at a source position: takes `t k`.
    #[arg(long, num_args = 2, value_names = ["T", "K"])]
    top_dims: Option<Vec<usize>>,
}

fn write_table(matrix: &Tensor, path: &Path) -> Result<(), Error> {
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut text = String::new();
    for r in 0..rows {
        let cells: Vec<String> = (0..cols)
            .map(|c| format!("{:.8}", matrix.get(&[r, c])))
            .collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_align(args: AlignArgs) -> Result<(), Error> {
    if !(args.avg_dims || args.avg_target || args.slice.is_some() || args.top_dims.is_some()) {
        return Err(Error::Contract(
            "nothing to do: pass --avg-dims, --avg-target, --slice or --top-dims".into(),
        ));
    }
    let record = AlignmentRecord::load(&args.fgat)?;
    let prefix = args.out_prefix.unwrap_or_else(|| args.fgat.clone());
    let out = |suffix: &str| PathBuf::from(format!("{}.{suffix}", prefix.display()));

    if args.avg_dims {
        let (matrix, passthrough) = avg_over_dims(&record);
        if passthrough {
            eprintln!("notice: temporal alignment; averaging over dimensions is the identity");
        }
        heatmap(
            &matrix,
            &record.tgt_tokens,
            &record.src_tokens,
            &out("avgdims.pgm"),
        )?;
        if args.table {
            write_table(&matrix, &out("avgdims.tsv"))?;
        }
    }
    if args.avg_target {
        let (matrix, passthrough) = avg_over_target(&record);
        if passthrough {
            eprintln!("notice: temporal alignment; the dimension profile has a single column");
        }
        let dims = dim_labels(matrix.shape()[1]);
        heatmap(&matrix, &record.src_tokens, &dims, &out("avgtarget.pgm"))?;
        if args.table {
            write_table(&matrix, &out("avgtarget.tsv"))?;
        }
    }
    if let Some(d) = args.slice {
        let matrix = slice_dim(&record, d)?;
        heatmap(
            &matrix,
            &record.tgt_tokens,
            &record.src_tokens,
            &out(&format!("slice{d}.pgm")),
        )?;
        if args.table {
            write_table(&matrix, &out(&format!("slice{d}.tsv")))?;
        }
    }
    if let Some(spec) = args.top_dims {
        let (t, k) = (spec[0], spec[1]);
        let ranked = top_dims(&record, t, k)?;
        let mut text = String::new();
        for (d, mass) in ranked {
            text.push_str(&format!("{d}\t{mass:.8}\n"));
        }
        std::fs::write(out("topdims.tsv"), text)?;
    }
    Ok(())
}

// ── bpe ─────────────────────────────────────────────────────────────────

#[derive(Args)]
struct BpeArgs {
    #[command(subcommand)]
    mode: BpeMode,
}

#[derive(Subcommand)]
enum BpeMode {
    /// Learn merges from a corpus.
    Learn {
        #[arg(long)]
        input: PathBuf,
        /// Where to write the ordered merge list.
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        num_merges: usize,
    },
    /// Segment a corpus into subword units.
    Apply {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rejoin subword units into words.
    Undo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn cmd_bpe(args: BpeArgs) -> Result<(), Error> {
    match args.mode {
        BpeMode::Learn {
            input,
            merges,
            num_merges,
        } => {
            let text = std::fs::read_to_string(&input)?;
            let lines: Vec<Vec<String>> = text.lines().map(tokenize).collect();
            let refs: Vec<&[String]> = lines.iter().map(Vec::as_slice).collect();
            let learned = learn_bpe(refs, num_merges)?;
            learned.save(&merges)?;
        }
        BpeMode::Apply {
            merges,
            input,
            output,
        } => {
            let learned = BpeMerges::load(&merges)?;
            let text = std::fs::read_to_string(&input)?;
            let mut out = String::new();
            for line in text.lines() {
                out.push_str(&apply_bpe(&learned, &tokenize(line)).join(" "));
                out.push('\n');
            }
            std::fs::write(&output, out)?;
        }
        BpeMode::Undo { input, output } => {
            let text = std::fs::read_to_string(&input)?;
            let mut out = String::new();
            for line in text.lines() {
                out.push_str(&unbpe(&tokenize(line)).join(" "));
                out.push('\n');
            }
            std::fs::write(&output, out)?;
        }
    }
    Ok(())
}
