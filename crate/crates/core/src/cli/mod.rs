//! Command-line surface: `train`, `eval`, `analyze` and `bench`.
//!
//! Settings come from [`RunConfig::default`], then an optional `key=value`
//! file (`--config`), then flags. Commands that read a checkpoint start from
//! the settings stored in it instead of the defaults.

mod config;

pub use config::{config_echo, parse_echo, RunConfig, Task, Vocabulary, DATA_DIR_ENV};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{export_map, relevance_map, zone_relevance_map, MapFormat};
use crate::cells::CellKind;
use crate::data::{build_hds, load_char_corpus, parse_aspect_tsv, periodic_text, AspectDataset, CharCorpus, CorpusSource, WordVocab};
use crate::error::{Error, Result};
use crate::model::{AspectModel, CharLm};
use crate::objective::AspectExample;
use crate::training::{
    aspect_train, evaluate_aspect, evaluate_bpc, evaluate_by_length, load_checkpoint, tbptt_train, Checkpoint,
    MetricsLog, Trainer, TrainOutputs,
};
use crate::zones::Composition;

const CHAR_FILES: [[&str; 3]; 2] = [
    ["train.txt", "valid.txt", "test.txt"],
    ["ptb.char.train.txt", "ptb.char.valid.txt", "ptb.char.test.txt"],
];

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

// ---------------------------------------------------------------- data

/// A directory holding one of the known file triples, or a single file cut
/// by `split`.
pub fn corpus_source(path: &Path, split: [f64; 3]) -> Result<CorpusSource> {
    if path.is_dir() {
        for names in CHAR_FILES {
            if path.join(names[0]).is_file() {
                return Ok(CorpusSource::Files {
                    train: path.join(names[0]),
                    valid: path.join(names[1]),
                    test: path.join(names[2]),
                });
            }
        }
        return Err(Error::Data(format!(
            "{} holds neither train.txt nor ptb.char.train.txt",
            path.display()
        )));
    }
    Ok(CorpusSource::Single {
        path: path.to_path_buf(),
        fractions: split,
    })
}

/// Aspect splits: `train.tsv` plus optional `valid.tsv` and `test.tsv` in a
/// directory, or one file used for training only.
pub struct AspectSplits {
    pub train: AspectDataset,
    pub valid: Vec<AspectExample>,
    pub test: Vec<AspectExample>,
}

fn read_tsv(path: &Path, vocab: &mut WordVocab, grow: bool) -> Result<Vec<AspectExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_aspect_tsv(&text, path, vocab, grow)
}

pub fn load_aspect_splits(path: &Path) -> Result<AspectSplits> {
    let train_path = if path.is_dir() { path.join("train.tsv") } else { path.to_path_buf() };
    let mut vocab = WordVocab::new();
    let train = read_tsv(&train_path, &mut vocab, true)?;
    let optional = |name: &str, vocab: &mut WordVocab| -> Result<Vec<AspectExample>> {
        let p = path.join(name);
        if path.is_dir() && p.is_file() {
            read_tsv(&p, vocab, false)
        } else {
            Ok(Vec::new())
        }
    };
    let valid = optional("valid.tsv", &mut vocab)?;
    let test = optional("test.tsv", &mut vocab)?;
    Ok(AspectSplits {
        train: AspectDataset {
            examples: train,
            vocab,
            hds: false,
        },
        valid,
        test,
    })
}

fn word_vocab(words: &[String]) -> WordVocab {
    let mut v = WordVocab::new();
    for w in words {
        v.add(w);
    }
    v
}

fn words_of(vocab: &WordVocab) -> Vec<String> {
    (0..vocab.len()).filter_map(|i| vocab.word(i).map(String::from)).collect()
}

fn char_vocab(corpus: &CharCorpus) -> Vocabulary {
    Vocabulary::Chars {
        symbols: corpus.symbols.clone(),
        unknown: corpus.unknown.is_some(),
    }
}

fn metrics_log(config: &RunConfig) -> Result<MetricsLog> {
    match &config.metrics {
        Some(p) => MetricsLog::append_to(p),
        None => Ok(MetricsLog::memory()),
    }
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    Lm { steps: u64, best_valid_bpc: f64 },
    Aspect { steps: u64, best_valid_accuracy: f64 },
}

/// Trains the configured model. With `resume`, a language-model run
/// continues from `checkpoint` when that file exists.
pub fn run_train(config: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.data_path()?;
    let train = config.train_config();
    let mut log = metrics_log(config)?;
    match config.task {
        Task::Lm => {
            let corpus = load_char_corpus(&corpus_source(&data, config.split)?)?;
            let model = CharLm::new(config.cell(), corpus.vocab_size())?;
            let outputs = TrainOutputs {
                checkpoint: config.checkpoint.clone(),
                config_echo: config_echo(config, &char_vocab(&corpus)),
            };
            let previous = match (&config.checkpoint, resume) {
                (Some(p), true) if p.is_file() => Some(load_checkpoint(p)?),
                _ => None,
            };
            let summary = tbptt_train(&model, &corpus, &train, &mut log, &outputs, previous.as_ref())?;
            writeln!(
                out,
                "trained {} steps, last train bpc {:.4}, best valid bpc {:.4}",
                summary.steps,
                crate::objective::bpc(summary.last_train_nats),
                summary.best_valid_bpc
            )
            .map_err(io_err)?;
            Ok(TrainOutcome::Lm {
                steps: summary.steps,
                best_valid_bpc: summary.best_valid_bpc,
            })
        }
        Task::Aspect => {
            if resume {
                return Err(Error::config("resume", "only language-model runs can resume"));
            }
            let splits = load_aspect_splits(&data)?;
            let model = AspectModel::new(config.cell(), splits.train.vocab.len())?;
            let outputs = TrainOutputs {
                checkpoint: config.checkpoint.clone(),
                config_echo: config_echo(config, &Vocabulary::Words(words_of(&splits.train.vocab))),
            };
            let summary = aspect_train(&model, &splits.train.examples, &splits.valid, &train, &mut log, &outputs)?;
            writeln!(
                out,
                "trained {} steps, last train loss {:.4}, best valid accuracy {:.4}",
                summary.steps, summary.last_train_nats, summary.best_valid_accuracy
            )
            .map_err(io_err)?;
            Ok(TrainOutcome::Aspect {
                steps: summary.steps,
                best_valid_accuracy: summary.best_valid_accuracy,
            })
        }
    }
}

// ---------------------------------------------------------------- eval

/// A checkpoint with its stored settings and vocabulary.
pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub checkpoint: Checkpoint,
}

pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let checkpoint = load_checkpoint(path)?;
    let (config, vocab) = parse_echo(&checkpoint.config)?;
    Ok(LoadedRun {
        config,
        vocab,
        checkpoint,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// `train`, `valid` or `test`.
    pub split: String,
    /// Bucket width for the per-length table.
    pub by_length: Option<usize>,
    /// Where the per-length CSV goes; standard output when absent.
    pub table: Option<PathBuf>,
    /// Evaluate on the hard sub-dataset of the split (aspect task).
    pub hds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalOutcome {
    Bpc { bpc: f64, chars: usize, buckets: usize },
    Accuracy { accuracy: f64, examples: usize },
}

pub fn run_eval(run: &LoadedRun, opts: &EvalOptions, out: &mut dyn Write) -> Result<EvalOutcome> {
    let config = &run.config;
    config.validate()?;
    let data = config.data_path()?;
    let store = &run.checkpoint.params;
    match config.task {
        Task::Lm => {
            let corpus = load_char_corpus(&corpus_source(&data, config.split)?)?;
            if char_vocab(&corpus) != run.vocab {
                return Err(Error::Data("corpus vocabulary differs from the checkpoint's".into()));
            }
            let model = CharLm::new(config.cell(), run.vocab.len())?;
            model.check_store(store)?;
            let split = corpus.split(&opts.split)?;
            let report = evaluate_bpc(&model, store, &split.ids, config.eval_batch, config.tbptt)?;
            writeln!(out, "{} bpc {:.6} over {} chars", opts.split, report.bpc, report.tokens).map_err(io_err)?;
            let mut buckets = 0;
            if let Some(width) = opts.by_length {
                let rows = evaluate_by_length(&model, store, split, width, config.eval_batch)?;
                buckets = rows.len();
                let mut csv = String::from("lo,hi,lines,chars,bpc\n");
                for r in &rows {
                    csv.push_str(&format!("{},{},{},{},{:.6}\n", r.lo, r.hi, r.lines, r.chars, r.bpc));
                }
                match &opts.table {
                    Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e))?,
                    None => out.write_all(csv.as_bytes()).map_err(io_err)?,
                }
            }
            Ok(EvalOutcome::Bpc {
                bpc: report.bpc,
                chars: report.tokens,
                buckets,
            })
        }
        Task::Aspect => {
            if opts.by_length.is_some() {
                return Err(Error::config("by_length", "per-length tables need a language-model checkpoint"));
            }
            let Vocabulary::Words(words) = &run.vocab else {
                return Err(Error::Format("aspect checkpoint without a word vocabulary".into()));
            };
            let mut vocab = word_vocab(words);
            let path = if data.is_dir() { data.join(format!("{}.tsv", opts.split)) } else { data.clone() };
            let examples = read_tsv(&path, &mut vocab, false)?;
            let examples = if opts.hds {
                build_hds(&AspectDataset {
                    examples,
                    vocab,
                    hds: false,
                })
                .examples
            } else {
                examples
            };
            let model = AspectModel::new(config.cell(), words.len())?;
            let report = evaluate_aspect(&model, store, &examples)?;
            writeln!(out, "{} accuracy {:.4} over {} examples", opts.split, report.accuracy, report.examples)
                .map_err(io_err)?;
            Ok(EvalOutcome::Accuracy {
                accuracy: report.accuracy,
                examples: report.examples,
            })
        }
    }
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub text: Vec<u8>,
    pub last_q: usize,
    pub out_dir: PathBuf,
    pub formats: Vec<MapFormat>,
}

/// Writes `relevance.<fmt>` and, for models with a multi-zone candidate,
/// `zone<k>.<fmt>`. Returns the files written.
pub fn run_analyze(run: &LoadedRun, opts: &AnalyzeOptions, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    if run.config.task != Task::Lm {
        return Err(Error::config("task", "relevance maps need a language-model checkpoint"));
    }
    run.config.validate()?;
    let model = CharLm::new(run.config.cell(), run.vocab.len())?;
    let store = &run.checkpoint.params;
    let tokens = run.vocab.encode_chars(&opts.text)?;
    let mut maps = vec![("relevance".to_string(), relevance_map(&model, store, &tokens, opts.last_q)?)];
    if model.core().candidate_transform(0).is_some() {
        for (k, m) in zone_relevance_map(&model, store, &tokens, opts.last_q)?.into_iter().enumerate() {
            maps.push((format!("zone{k}"), m));
        }
    } else {
        writeln!(out, "no multi-zone candidate, zone maps skipped").map_err(io_err)?;
    }
    let label = |id: usize| run.vocab.char_label(id);
    let mut written = Vec::new();
    for (name, map) in &maps {
        for &fmt in &opts.formats {
            let path = opts.out_dir.join(format!("{name}.{fmt}"));
            export_map(map, &path, fmt, &label)?;
            written.push(path);
        }
    }
    writeln!(out, "wrote {} files to {}", written.len(), opts.out_dir.display()).map_err(io_err)?;
    Ok(written)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub params: usize,
    pub steps: u64,
    pub seconds: f64,
    pub steps_per_sec: f64,
    pub chars_per_sec: f64,
}

/// Parameter counts at the published Penn Treebank sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub name: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub reference_sizes: Vec<SizeRow>,
}

/// Character vocabulary assumed for the reference sizes.
pub const REFERENCE_VOCAB: usize = 50;

/// Hidden 800, filter 1000, embedding 256, depth parameters shared.
pub fn reference_sizes() -> Result<Vec<SizeRow>> {
    let mut base = RunConfig {
        hidden: 800,
        ffn: 1000,
        embed: 256,
        share_depth: true,
        ..RunConfig::default()
    };
    let mut rows = Vec::new();
    for depth in [0, 1] {
        for backend in Composition::ALL {
            base.model = CellKind::Mzu;
            base.backend = backend;
            base.depth = depth;
            let name = format!("{backend}MZU{}", if depth > 0 { "+DT" } else { "" });
            let params = CharLm::new(base.cell(), REFERENCE_VOCAB)?.param_count();
            rows.push(SizeRow { name, params });
        }
    }
    base.model = CellKind::Gru;
    rows.push(SizeRow {
        name: "GRU".into(),
        params: CharLm::new(base.cell(), REFERENCE_VOCAB)?.param_count(),
    });
    Ok(rows)
}

/// Times `steps` training steps of every backend and the GRU at the
/// configured sizes on synthetic text. Zero steps reports zero throughput.
pub fn run_bench(config: &RunConfig, steps: u64, out: &mut dyn Write) -> Result<BenchReport> {
    config.validate()?;
    let chars_per_step = config.batch * config.tbptt;
    let text = periodic_text(b"the quick brown fox jumps over the lazy dog. ", chars_per_step * 2 + config.batch);
    let corpus = CharCorpus::from_bytes(&text, b"", b"")?;
    let mut variants: Vec<(String, RunConfig)> = Composition::ALL
        .iter()
        .map(|&b| {
            let c = RunConfig {
                model: CellKind::Mzu,
                backend: b,
                ..config.clone()
            };
            (format!("{b}MZU{}", if c.depth > 0 { "+DT" } else { "" }), c)
        })
        .collect();
    variants.push((
        "GRU".into(),
        RunConfig {
            model: CellKind::Gru,
            ..config.clone()
        },
    ));
    let mut rows = Vec::new();
    for (name, c) in variants {
        let model = CharLm::new(c.cell(), corpus.vocab_size())?;
        let mut trainer = Trainer::<f32>::new(&model, c.train_config(), &corpus.train.ids)?;
        let start = Instant::now();
        for _ in 0..steps {
            trainer.train_step()?;
        }
        let seconds = start.elapsed().as_secs_f64();
        let rate = |n: f64| if steps == 0 || seconds == 0.0 { 0.0 } else { n / seconds };
        rows.push(BenchRow {
            name,
            params: model.param_count(),
            steps,
            seconds,
            steps_per_sec: rate(steps as f64),
            chars_per_sec: rate((steps as usize * chars_per_step) as f64),
        });
    }
    let reference = reference_sizes()?;
    writeln!(out, "model,params,steps,seconds,steps_per_sec,chars_per_sec").map_err(io_err)?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.1}",
            r.name, r.params, r.steps, r.seconds, r.steps_per_sec, r.chars_per_sec
        )
        .map_err(io_err)?;
    }
    writeln!(out, "reference sizes (hidden 800, filter 1000, embedding 256, vocab {REFERENCE_VOCAB}):").map_err(io_err)?;
    for r in &reference {
        writeln!(out, "  {:<10} {:.2}M", r.name, r.params as f64 / 1e6).map_err(io_err)?;
    }
    Ok(BenchReport {
        rows,
        reference_sizes: reference,
    })
}

// ---------------------------------------------------------------- flags

#[derive(Parser, Debug)]
#[command(
    name = "mzu",
    version,
    about = "Multi-zone recurrent units: train, evaluate, analyze, benchmark",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a character language model or an aspect classifier.
    Train {
        #[command(flatten)]
        settings: Settings,
        /// Continue from --checkpoint when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        settings: Settings,
        /// Split to score: train, valid or test.
        #[arg(long = "on", default_value = "valid")]
        split_name: String,
        /// Also emit BPC per line-length bucket of this width, as CSV.
        #[arg(long)]
        by_length: Option<usize>,
        /// File for the per-length CSV (standard output otherwise).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Restrict an aspect split to its hard sub-dataset.
        #[arg(long)]
        hds: bool,
    },
    /// Write relevance maps for a text.
    Analyze {
        #[command(flatten)]
        settings: Settings,
        /// Text to analyze, given inline.
        #[arg(long, conflicts_with = "text_file")]
        text: Option<String>,
        /// File holding the text to analyze.
        #[arg(long)]
        text_file: Option<PathBuf>,
        /// Number of final positions used as queries.
        #[arg(long, default_value_t = 30)]
        last_q: usize,
        /// Directory for the map files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// pgm, csv or both.
        #[arg(long, default_value = "both")]
        format: String,
    },
    /// Time training steps per backend and report parameter counts.
    Bench {
        #[command(flatten)]
        settings: Settings,
        /// Training steps timed per model.
        #[arg(long, default_value_t = 3)]
        bench_steps: u64,
    },
}

/// Overrides for [`RunConfig`]; each maps to the key of the same name.
#[derive(Args, Debug, Default)]
pub struct Settings {
    /// `key=value` settings file, applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lm | aspect.
    #[arg(long)]
    pub task: Option<String>,
    /// mzu | gru.
    #[arg(long)]
    pub model: Option<String>,
    /// Zone composition: sat | gcn | cap.
    #[arg(long)]
    pub backend: Option<String>,
    /// Zones per M-function.
    #[arg(long)]
    pub zones: Option<String>,
    /// Output capsules (cap only).
    #[arg(long)]
    pub out_capsules: Option<String>,
    /// Dynamic-routing iterations (cap only).
    #[arg(long)]
    pub routing_iters: Option<String>,
    /// State width.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Filter width of the aggregation FFN.
    #[arg(long)]
    pub ffn: Option<String>,
    /// Embedding width.
    #[arg(long)]
    pub embed: Option<String>,
    /// Transition cells stacked per step (0 = no deep transition).
    #[arg(long)]
    pub depth: Option<String>,
    /// Share M-function parameters across depths (true | false).
    #[arg(long)]
    pub share_depth: Option<String>,
    /// none | regular_gate | regular_trans.
    #[arg(long)]
    pub ablation: Option<String>,
    /// sigmoid | relu.
    #[arg(long)]
    pub gcn_activation: Option<String>,
    /// true | false.
    #[arg(long)]
    pub layer_norm: Option<String>,
    /// Dropout rate on the candidate activation.
    #[arg(long)]
    pub dropout: Option<String>,
    /// Weight of the zone-disagreement term.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<String>,
    /// Disagreement normalisation: sum | mean.
    #[arg(long)]
    pub dzone_scale: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<String>,
    /// Parallel training streams.
    #[arg(long)]
    pub batch: Option<String>,
    /// Truncated BPTT length.
    #[arg(long)]
    pub tbptt: Option<String>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<String>,
    /// Seed for initialisation, dropout and shuffling.
    #[arg(long)]
    pub seed: Option<String>,
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<String>,
    /// Validate every this many steps.
    #[arg(long)]
    pub eval_interval: Option<String>,
    /// Log a training row every this many steps.
    #[arg(long)]
    pub log_interval: Option<String>,
    /// Parallel streams during evaluation.
    #[arg(long)]
    pub eval_batch: Option<String>,
    /// Data directory or file; defaults to $MZU_DATA_DIR.
    #[arg(long)]
    pub data: Option<String>,
    /// Train,valid,test fractions for a single data file.
    #[arg(long)]
    pub split: Option<String>,
    /// Checkpoint path (written during training, read by eval and analyze).
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Metrics CSV path (appended).
    #[arg(long)]
    pub metrics: Option<String>,
    /// Write wall-clock seconds to the metrics (true | false).
    #[arg(long)]
    pub record_time: Option<String>,
}

impl Settings {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("task", &self.task),
            ("model", &self.model),
            ("backend", &self.backend),
            ("zones", &self.zones),
            ("out_capsules", &self.out_capsules),
            ("routing_iters", &self.routing_iters),
            ("hidden", &self.hidden),
            ("ffn", &self.ffn),
            ("embed", &self.embed),
            ("depth", &self.depth),
            ("share_depth", &self.share_depth),
            ("ablation", &self.ablation),
            ("gcn_activation", &self.gcn_activation),
            ("layer_norm", &self.layer_norm),
            ("dropout", &self.dropout),
            ("lambda", &self.lambda),
            ("dzone_scale", &self.dzone_scale),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("tbptt", &self.tbptt),
            ("clip", &self.clip),
            ("seed", &self.seed),
            ("steps", &self.steps),
            ("eval_interval", &self.eval_interval),
            ("log_interval", &self.log_interval),
            ("eval_batch", &self.eval_batch),
            ("data", &self.data),
            ("split", &self.split),
            ("checkpoint", &self.checkpoint),
            ("metrics", &self.metrics),
            ("record_time", &self.record_time),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    /// `base`, then the settings file, then the flags.
    pub fn resolve(&self, mut base: RunConfig) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            base.apply_file(p)?;
        }
        for (k, v) in self.flags() {
            base.set(k, v)?;
        }
        Ok(base)
    }

    /// The checkpoint named by the flags or the settings file.
    fn checkpoint_path(&self) -> Result<PathBuf> {
        self.resolve(RunConfig::default())?
            .checkpoint
            .ok_or_else(|| Error::config("checkpoint", "a checkpoint path is required"))
    }

    /// The checkpoint's stored run with the file and flags applied on top.
    fn load(&self) -> Result<LoadedRun> {
        let mut run = load_run(&self.checkpoint_path()?)?;
        run.config = self.resolve(run.config)?;
        Ok(run)
    }
}

fn parse_formats(s: &str) -> Result<Vec<MapFormat>> {
    match s.to_ascii_lowercase().as_str() {
        "both" => Ok(vec![MapFormat::Pgm, MapFormat::Csv]),
        other => Ok(vec![other.parse()?]),
    }
}

/// Runs one parsed command, writing reports to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { settings, resume } => {
            let config = settings.resolve(RunConfig::default())?;
            run_train(&config, resume, out)?;
        }
        Command::Eval {
            settings,
            split_name,
            by_length,
            table,
            hds,
        } => {
            let run = settings.load()?;
            let opts = EvalOptions {
                split: split_name,
                by_length,
                table,
                hds,
            };
            run_eval(&run, &opts, out)?;
        }
        Command::Analyze {
            settings,
            text,
            text_file,
            last_q,
            out_dir,
            format,
        } => {
            let formats = parse_formats(&format)?;
            let text = match (text, text_file) {
                (Some(t), _) => t.into_bytes(),
                (None, Some(p)) => fs::read(&p).map_err(|e| Error::io(&p, e))?,
                (None, None) => return Err(Error::config("text", "give --text or --text-file")),
            };
            let run = settings.load()?;
            let opts = AnalyzeOptions {
                text,
                last_q,
                out_dir,
                formats,
            };
            run_analyze(&run, &opts, out)?;
        }
        Command::Bench { settings, bench_steps } => {
            let config = settings.resolve(RunConfig::default())?;
            run_bench(&config, bench_steps, out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage or config, 2 data, 3 numeric.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
