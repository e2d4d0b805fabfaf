use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cells::{Ablation, CellConfig, CellKind};
use crate::error::{Error, Result};
use crate::objective::DisagreementScale;
use crate::training::{Adam, TrainConfig};
use crate::zones::{Composition, GcnActivation};

/// Environment variable naming the default data location.
pub const DATA_DIR_ENV: &str = "MZU_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Character-level language modeling.
    Lm,
    /// Aspect sentiment classification.
    Aspect,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lm" => Ok(Task::Lm),
            "aspect" => Ok(Task::Aspect),
            other => Err(Error::config("task", format!("unknown task '{other}' (lm|aspect)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lm => "lm",
            Task::Aspect => "aspect",
        })
    }
}

/// Everything a command needs, merged from defaults, a `key=value` file and
/// flags (later sources win).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: CellKind,
    pub backend: Composition,
    pub zones: usize,
    pub out_capsules: usize,
    pub routing_iters: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub embed: usize,
    pub depth: usize,
    pub share_depth: bool,
    pub ablation: Ablation,
    pub gcn_activation: GcnActivation,
    pub layer_norm: bool,
    pub dropout: f64,
    pub lambda: f64,
    pub dzone_scale: DisagreementScale,
    pub lr: f64,
    pub batch: usize,
    pub tbptt: usize,
    pub clip: f64,
    pub seed: u64,
    pub steps: u64,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub eval_batch: usize,
    pub data: Option<PathBuf>,
    /// Train/valid/test fractions when `data` is a single file.
    pub split: [f64; 3],
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Lm,
            model: CellKind::Mzu,
            backend: Composition::Cap,
            zones: 4,
            out_capsules: 2,
            routing_iters: 3,
            hidden: 128,
            ffn: 160,
            embed: 64,
            depth: 1,
            share_depth: true,
            ablation: Ablation::None,
            gcn_activation: GcnActivation::Sigmoid,
            layer_norm: true,
            dropout: 0.5,
            lambda: 1.0,
            dzone_scale: DisagreementScale::Sum,
            lr: 1e-3,
            batch: 32,
            tbptt: 50,
            clip: 5.0,
            seed: 1,
            steps: 1000,
            eval_interval: 200,
            log_interval: 10,
            eval_batch: 1,
            data: None,
            split: [0.9, 0.05, 0.05],
            checkpoint: None,
            metrics: None,
            record_time: false,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{raw}'")))
}

fn path_value(raw: &str) -> Option<PathBuf> {
    let raw = raw.trim();
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn fractions(raw: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::config("split", format!("'{raw}' needs three comma-separated fractions")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = value("split", p)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting. Keys are the flag names with `_` or `-`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "task" => self.task = raw.trim().parse()?,
            "model" => self.model = raw.trim().parse()?,
            "backend" => self.backend = raw.trim().parse()?,
            "zones" => self.zones = value(k, raw)?,
            "out_capsules" => self.out_capsules = value(k, raw)?,
            "routing_iters" => self.routing_iters = value(k, raw)?,
            "hidden" => self.hidden = value(k, raw)?,
            "ffn" => self.ffn = value(k, raw)?,
            "embed" => self.embed = value(k, raw)?,
            "depth" => self.depth = value(k, raw)?,
            "share_depth" => self.share_depth = value(k, raw)?,
            "ablation" => self.ablation = raw.trim().parse()?,
            "gcn_activation" => self.gcn_activation = raw.trim().parse()?,
            "layer_norm" => self.layer_norm = value(k, raw)?,
            "dropout" => self.dropout = value(k, raw)?,
            "lambda" => self.lambda = value(k, raw)?,
            "dzone_scale" => self.dzone_scale = raw.trim().parse()?,
            "lr" => self.lr = value(k, raw)?,
            "batch" => self.batch = value(k, raw)?,
            "tbptt" => self.tbptt = value(k, raw)?,
            "clip" => self.clip = value(k, raw)?,
            "seed" => self.seed = value(k, raw)?,
            "steps" => self.steps = value(k, raw)?,
            "eval_interval" => self.eval_interval = value(k, raw)?,
            "log_interval" => self.log_interval = value(k, raw)?,
            "eval_batch" => self.eval_batch = value(k, raw)?,
            "data" => self.data = path_value(raw),
            "split" => self.split = fractions(raw)?,
            "checkpoint" => self.checkpoint = path_value(raw),
            "metrics" => self.metrics = path_value(raw),
            "record_time" => self.record_time = value(k, raw)?,
            other => return Err(Error::config(other, "unknown setting")),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("task", self.task.to_string()),
            ("model", self.model.to_string()),
            ("backend", self.backend.to_string()),
            ("zones", self.zones.to_string()),
            ("out_capsules", self.out_capsules.to_string()),
            ("routing_iters", self.routing_iters.to_string()),
            ("hidden", self.hidden.to_string()),
            ("ffn", self.ffn.to_string()),
            ("embed", self.embed.to_string()),
            ("depth", self.depth.to_string()),
            ("share_depth", self.share_depth.to_string()),
            ("ablation", self.ablation.to_string()),
            ("gcn_activation", self.gcn_activation.to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lambda", self.lambda.to_string()),
            ("dzone_scale", self.dzone_scale.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("tbptt", self.tbptt.to_string()),
            ("clip", self.clip.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("data", path(&self.data)),
            ("split", self.split.map(|f| f.to_string()).join(",")),
            ("checkpoint", path(&self.checkpoint)),
            ("metrics", path(&self.metrics)),
            ("record_time", self.record_time.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected key=value, got '{line}'"),
            })?;
            self.set(key, raw)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_kv(text, Path::new("<config>"))?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_kv(&text, path)
    }

    pub fn cell(&self) -> CellConfig {
        let mut c = CellConfig::mzu(self.embed, self.hidden, self.backend);
        c.kind = self.model;
        c.zones = self.zones;
        c.out_zones = self.out_capsules;
        c.routing_iters = self.routing_iters;
        c.d_ff = self.ffn;
        c.gcn_activation = self.gcn_activation;
        c.depth = if self.model == CellKind::Mzu { self.depth } else { 0 };
        c.share_depth_params = self.share_depth;
        c.ablation = self.ablation;
        c.dropout = self.dropout;
        c.layer_norm = self.layer_norm;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: Adam {
                lr: self.lr,
                ..Adam::default()
            },
            batch: self.batch,
            tbptt: self.tbptt,
            clip: self.clip,
            lambda: self.lambda,
            dzone_scale: self.dzone_scale,
            steps: self.steps,
            eval_interval: self.eval_interval,
            log_interval: self.log_interval,
            eval_batch: self.eval_batch,
            seed: self.seed,
            record_time: self.record_time,
        }
    }

    /// Checks every constraint that does not need data, before anything is
    /// allocated.
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 {
            return Err(Error::config("embed", "embedding width must be positive"));
        }
        self.cell().validate()?;
        self.train_config().validate()?;
        crate::data::split_sizes(0, self.split)?;
        Ok(())
    }

    /// `data`, else the directory named by [`DATA_DIR_ENV`].
    pub fn data_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.data {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
            _ => Err(Error::config("data", format!("no data path given and {DATA_DIR_ENV} is unset"))),
        }
    }
}

/// Symbol table stored alongside the settings in a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Vocabulary {
    /// Byte symbols in id order, plus whether the reserved unknown id exists.
    Chars { symbols: Vec<u8>, unknown: bool },
    /// Words in id order, id 0 being the unknown word.
    Words(Vec<String>),
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        match self {
            Vocabulary::Chars { symbols, unknown } => symbols.len() + usize::from(*unknown),
            Vocabulary::Words(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Character ids of `text`; bytes outside the table take the reserved
    /// id when there is one.
    pub fn encode_chars(&self, text: &[u8]) -> Result<Vec<usize>> {
        let Vocabulary::Chars { symbols, unknown } = self else {
            return Err(Error::config("task", "character encoding needs a language-model checkpoint"));
        };
        text.iter()
            .map(|&b| {
                symbols
                    .iter()
                    .position(|&s| s == b)
                    .or(unknown.then_some(symbols.len()))
                    .ok_or_else(|| Error::Data(format!("symbol {:?} not in the vocabulary", b as char)))
            })
            .collect()
    }

    /// Printable label of a character id.
    pub fn char_label(&self, id: usize) -> String {
        match self {
            Vocabulary::Chars { symbols, .. } => match symbols.get(id) {
                Some(&b) if b.is_ascii_graphic() => (b as char).to_string(),
                Some(b' ') => "_".into(),
                Some(&b) => format!("\\x{b:02x}"),
                None => "?".into(),
            },
            Vocabulary::Words(w) => w.get(id).cloned().unwrap_or_else(|| "?".into()),
        }
    }
}

const VOCAB_CHARS: &str = "vocab_chars";
const VOCAB_UNKNOWN: &str = "vocab_unknown";
const VOCAB_WORDS: &str = "vocab_words";

/// Settings plus vocabulary as stored in checkpoints.
pub fn config_echo(config: &RunConfig, vocab: &Vocabulary) -> String {
    let mut out = config.to_kv();
    match vocab {
        Vocabulary::Chars { symbols, unknown } => {
            let hex: String = symbols.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("{VOCAB_CHARS}={hex}\n{VOCAB_UNKNOWN}={unknown}\n"));
        }
        Vocabulary::Words(words) => out.push_str(&format!("{VOCAB_WORDS}={}\n", words.join(" "))),
    }
    out
}

/// Inverse of [`config_echo`].
pub fn parse_echo(text: &str) -> Result<(RunConfig, Vocabulary)> {
    let mut settings = String::new();
    let (mut chars, mut unknown, mut words) = (None, false, None);
    for line in text.lines() {
        match line.split_once('=') {
            Some((VOCAB_CHARS, hex)) => {
                if hex.len() % 2 != 0 {
                    return Err(Error::Format("odd-length symbol table".into()));
                }
                let bytes = (0..hex.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                    .collect::<std::result::Result<Vec<u8>, _>>()
                    .map_err(|_| Error::Format("symbol table is not hex".into()))?;
                chars = Some(bytes);
            }
            Some((VOCAB_UNKNOWN, v)) => {
                unknown = v.parse().map_err(|_| Error::Format(format!("bad {VOCAB_UNKNOWN} '{v}'")))?;
            }
            Some((VOCAB_WORDS, v)) => words = Some(v.split(' ').map(String::from).collect()),
            _ => {
                settings.push_str(line);
                settings.push('\n');
            }
        }
    }
    let config = RunConfig::from_kv(&settings)?;
    let vocab = match (chars, words) {
        (Some(symbols), None) => Vocabulary::Chars { symbols, unknown },
        (None, Some(words)) => Vocabulary::Words(words),
        _ => return Err(Error::Format("checkpoint carries no vocabulary".into())),
    };
    Ok((config, vocab))
}
