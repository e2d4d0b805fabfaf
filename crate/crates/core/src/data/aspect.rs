use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::{AspectExample, Sentiment};

pub const UNKNOWN_WORD: &str = "<unk>";

/// Lowercased word table; id 0 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for WordVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl WordVocab {
    pub fn new() -> Self {
        let mut v = WordVocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.add(UNKNOWN_WORD);
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn get(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lowercases, splits on whitespace and looks up (or adds, when `grow`)
    /// each token.
    pub fn encode(&mut self, text: &str, grow: bool) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| if grow { self.add(w) } else { self.get(w) })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AspectDataset {
    pub examples: Vec<AspectExample>,
    pub vocab: WordVocab,
    /// Set by [`build_hds`].
    pub hds: bool,
}

impl AspectDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Parses `sentence<TAB>aspect<TAB>label` rows. Blank lines are skipped; a
/// first row whose label column reads `label` is taken as a header.
pub fn parse_aspect_tsv(text: &str, path: &Path, vocab: &mut WordVocab, grow: bool) -> Result<Vec<AspectExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        if out.is_empty() && i == 0 && cols[2].trim().eq_ignore_ascii_case("label") {
            continue;
        }
        let label: Sentiment = cols[2].parse().map_err(bad)?;
        let sentence = cols[0].trim().to_owned();
        let tokens = vocab.encode(&sentence, grow);
        let aspect = vocab.encode(cols[1], grow);
        if tokens.is_empty() {
            return Err(bad("empty sentence".into()));
        }
        if aspect.is_empty() {
            return Err(bad("empty aspect term".into()));
        }
        out.push(AspectExample {
            sentence,
            tokens,
            aspect,
            label,
        });
    }
    Ok(out)
}

/// Loads a TSV with a fresh vocabulary grown from it.
pub fn load_aspect_tsv(path: &Path) -> Result<AspectDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = WordVocab::new();
    let examples = parse_aspect_tsv(&text, path, &mut vocab, true)?;
    Ok(AspectDataset {
        examples,
        vocab,
        hds: false,
    })
}

/// Hard sub-dataset: sentences (grouped by exact text) with at least two
/// aspects carrying at least two distinct labels, one copy per aspect, in
/// order of first appearance.
pub fn build_hds(ds: &AspectDataset) -> AspectDataset {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&AspectExample>> = HashMap::new();
    for ex in &ds.examples {
        let g = groups.entry(ex.sentence.as_str()).or_default();
        if g.is_empty() {
            order.push(ex.sentence.as_str());
        }
        g.push(ex);
    }
    let mut examples = Vec::new();
    for sentence in order {
        let group = &groups[sentence];
        let labels: BTreeSet<Sentiment> = group.iter().map(|e| e.label).collect();
        if group.len() >= 2 && labels.len() >= 2 {
            examples.extend(group.iter().map(|&e| e.clone()));
        }
    }
    AspectDataset {
        examples,
        vocab: ds.vocab.clone(),
        hds: true,
    }
}
