//! Corpus ingestion and batching.
//!
//! Character corpora are read as raw bytes, one symbol per byte. The symbol
//! table comes from the training split in first-appearance order; evaluation
//! symbols never seen in training map to one reserved id appended after the
//! table, and that id exists only when some split needs it.

mod aspect;

pub use aspect::{build_hds, load_aspect_tsv, parse_aspect_tsv, AspectDataset, WordVocab, UNKNOWN_WORD};

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const LINE_BREAK: u8 = b'\n';

/// Where a character corpus comes from.
#[derive(Clone, Debug)]
pub enum CorpusSource {
    Files { train: PathBuf, valid: PathBuf, test: PathBuf },
    /// One file cut into contiguous train/valid/test pieces.
    Single { path: PathBuf, fractions: [f64; 3] },
}

/// One split: symbol ids plus the id range of each line (line breaks
/// excluded), for length-bucketed evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub ids: Vec<usize>,
    pub lines: Vec<Range<usize>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn line(&self, i: usize) -> &[usize] {
        &self.ids[self.lines[i].clone()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharCorpus {
    /// Training symbols in first-appearance order; id = position.
    pub symbols: Vec<u8>,
    /// Reserved id for evaluation symbols absent from training.
    pub unknown: Option<usize>,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl CharCorpus {
    /// Builds a corpus from in-memory text.
    pub fn from_bytes(train: &[u8], valid: &[u8], test: &[u8]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut table = [None::<usize>; 256];
        let mut symbols = Vec::new();
        for &b in train {
            if table[b as usize].is_none() {
                table[b as usize] = Some(symbols.len());
                symbols.push(b);
            }
        }
        let unseen = valid.iter().chain(test).any(|&b| table[b as usize].is_none());
        let unknown = unseen.then_some(symbols.len());
        let encode = |text: &[u8]| -> Split {
            let ids = text
                .iter()
                .map(|&b| table[b as usize].or(unknown).expect("unknown id reserved for unseen symbols"))
                .collect();
            Split {
                ids,
                lines: line_ranges(text),
            }
        };
        Ok(CharCorpus {
            train: encode(train),
            valid: encode(valid),
            test: encode(test),
            symbols,
            unknown,
        })
    }

    /// Output vocabulary size, including the reserved id when present.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + usize::from(self.unknown.is_some())
    }

    pub fn id_of(&self, symbol: u8) -> Option<usize> {
        self.symbols.iter().position(|&s| s == symbol).or(self.unknown)
    }

    /// Encodes text with this corpus's table.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        text.iter()
            .map(|&b| {
                self.id_of(b)
                    .ok_or_else(|| Error::Data(format!("symbol {:?} not in the vocabulary", b as char)))
            })
            .collect()
    }

    /// Symbol for `id`; the reserved id renders as `?`.
    pub fn symbol(&self, id: usize) -> u8 {
        self.symbols.get(id).copied().unwrap_or(b'?')
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::config("split", format!("unknown split '{other}' (train|valid|test)"))),
        }
    }
}

fn line_ranges(text: &[u8]) -> Vec<Range<usize>> {
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, &b) in text.iter().enumerate() {
        if b == LINE_BREAK {
            lines.push(start..i);
            start = i + 1;
        }
    }
    if start < text.len() {
        lines.push(start..text.len());
    }
    lines
}

fn read(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// Cut points for `n` symbols. Train and valid sizes are rounded, test takes
/// the rest.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split",
            format!("fractions {fractions:?} must be in [0, 1] and sum to 1"),
        ));
    }
    let train = (((n as f64) * fractions[0]).round() as usize).min(n);
    let valid = (((n as f64) * fractions[1]).round() as usize).min(n - train);
    Ok([train, valid, n - train - valid])
}

pub fn load_char_corpus(source: &CorpusSource) -> Result<CharCorpus> {
    match source {
        CorpusSource::Files { train, valid, test } => CharCorpus::from_bytes(&read(train)?, &read(valid)?, &read(test)?),
        CorpusSource::Single { path, fractions } => {
            let text = read(path)?;
            let [a, b, _] = split_sizes(text.len(), *fractions)?;
            CharCorpus::from_bytes(&text[..a], &text[a..a + b], &text[a + b..])
        }
    }
}

/// Contiguous parallel streams cut into `(inputs, targets)` chunks of
/// `batch` rows. Targets are the inputs shifted by one.
#[derive(Clone, Debug)]
pub struct Streams {
    rows: Vec<Vec<usize>>,
    chunk: usize,
    pos: usize,
    keep_tail: bool,
}

impl Streams {
    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    /// Symbols per stream.
    pub fn stream_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Number of chunks a fresh iterator yields.
    pub fn num_chunks(&self) -> usize {
        let steps = self.stream_len().saturating_sub(1);
        if self.keep_tail {
            steps.div_ceil(self.chunk)
        } else {
            steps / self.chunk
        }
    }

    pub fn reset(&mut self) {
        self.pos = 0;
    }

    /// Chunk `i` of a fresh iterator, without advancing.
    pub fn chunk(&self, i: usize) -> Option<Chunk> {
        let steps = self.stream_len().saturating_sub(1);
        let p = i.checked_mul(self.chunk)?;
        let remaining = steps.saturating_sub(p);
        let k = if remaining >= self.chunk {
            self.chunk
        } else if self.keep_tail && remaining > 0 {
            remaining
        } else {
            return None;
        };
        let inputs = self.rows.iter().map(|r| r[p..p + k].to_vec()).collect();
        let targets = self.rows.iter().map(|r| r[p + 1..p + k + 1].to_vec()).collect();
        Some((inputs, targets))
    }
}

/// `(inputs, targets)`, each `batch` rows of equal length.
pub type Chunk = (Vec<Vec<usize>>, Vec<Vec<usize>>);

impl Iterator for Streams {
    type Item = Chunk;

    fn next(&mut self) -> Option<Chunk> {
        let c = self.chunk(self.pos)?;
        self.pos += 1;
        Some(c)
    }
}

fn cut_streams(ids: &[usize], batch: usize, chunk: usize, keep_tail: bool) -> Result<Streams> {
    if batch == 0 || chunk == 0 {
        return Err(Error::config("batch", "batch size and truncation length must be positive"));
    }
    let need = if keep_tail { 2 * batch } else { batch * (chunk + 1) };
    if ids.len() < need {
        return Err(Error::Data(format!(
            "{} symbols cannot fill {batch} streams of {} symbols; lower the batch size or truncation length",
            ids.len(),
            need / batch
        )));
    }
    let len = ids.len() / batch;
    Ok(Streams {
        rows: ids.chunks_exact(len).take(batch).map(<[usize]>::to_vec).collect(),
        chunk,
        pos: 0,
        keep_tail,
    })
}

/// Training streams: trailing symbols that do not fill a stream, and the
/// final partial chunk, are dropped.
pub fn make_streams(ids: &[usize], batch: usize, tbptt: usize) -> Result<Streams> {
    cut_streams(ids, batch, tbptt, false)
}

/// Evaluation streams: like [`make_streams`] but the final partial chunk is
/// kept, so every symbol after the first of each stream is scored.
pub fn eval_streams(ids: &[usize], batch: usize, chunk: usize) -> Result<Streams> {
    cut_streams(ids, batch, chunk, true)
}

/// Repeats `pattern` until `len` bytes.
pub fn periodic_text(pattern: &[u8], len: usize) -> Vec<u8> {
    pattern.iter().copied().cycle().take(len).collect()
}
